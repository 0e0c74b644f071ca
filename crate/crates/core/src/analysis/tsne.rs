use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Perplexity calibration tolerance, in perplexity units.
const PERPLEXITY_TOL: f64 = 1e-4;
const CALIBRATION_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;
const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    /// Length of the exaggeration phase; `None` means a quarter of `iterations`.
    pub exaggeration_iterations: Option<usize>,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 5.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: None,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn exaggeration_phase(&self) -> usize {
        self.exaggeration_iterations.unwrap_or(self.iterations / 4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) with unexaggerated P at the end of the exaggeration phase.
    pub kl_after_exaggeration: f64,
    pub kl_final: f64,
    pub config: TsneConfig,
}

fn validate(points: &[Vec<f64>], perplexity: f64) -> Result<usize, AnalysisError> {
    let n = points.len();
    if n < 4 {
        return Err(AnalysisError::Tsne(format!("need at least 4 points, got {n}")));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(AnalysisError::Tsne("points must share a nonzero dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Tsne("non-finite coordinate".into()));
    }
    if !(perplexity >= 1.0 && perplexity < (n - 1) as f64 / 3.0) {
        return Err(AnalysisError::Tsne(format!(
            "perplexity {perplexity} must lie in [1, {}) for {n} points",
            (n - 1) as f64 / 3.0
        )));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(AnalysisError::Tsne("all points are identical".into()));
    }
    Ok(n)
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional distribution of row `i` at precision `beta`; returns its perplexity.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let n = out.len();
    let dmin = (0..n)
        .filter(|&j| j != i)
        .map(|j| dist[j])
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        out[j] = if j == i { 0.0 } else { (-beta * (dist[j] - dmin)).exp() };
        sum += out[j];
    }
    let mut weighted = 0.0;
    for j in 0..n {
        out[j] /= sum;
        if j != i {
            weighted += (dist[j] - dmin) * out[j];
        }
    }
    (sum.ln() + beta * weighted).exp()
}

/// Bisects the precision of row `i` until its perplexity is within tolerance of the
/// target, leaving the conditional distribution in `row`. Returns the precision.
fn calibrate_row(dist: &[f64], i: usize, perplexity: f64, row: &mut [f64]) -> Result<f64, AnalysisError> {
    let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..CALIBRATION_STEPS {
        let perp = conditional_row(dist, i, beta, row);
        if (perp - perplexity).abs() < PERPLEXITY_TOL {
            return Ok(beta);
        }
        if perp > perplexity {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    Err(AnalysisError::Tsne(format!(
        "could not calibrate point {i} to perplexity {perplexity}"
    )))
}

/// Symmetrized input affinities `P` (row-major N x N) with each conditional
/// bandwidth bisected to the target perplexity.
pub fn joint_probabilities(points: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>, AnalysisError> {
    let n = validate(points, perplexity)?;
    let dist = squared_distances(points);
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        calibrate_row(&dist[i * n..(i + 1) * n], i, perplexity, &mut cond[i * n..(i + 1) * n])?;
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    Ok(p)
}

/// Student-t numerators `1 / (1 + |y_i - y_j|^2)` and their sum.
fn q_numerators(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (num, sum) = q_numerators(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / sum).max(P_FLOOR);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE to two dimensions. Deterministic for a fixed seed.
pub fn tsne(points: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult, AnalysisError> {
    let p = joint_probabilities(points, config.perplexity)?;
    let n = points.len();
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| AnalysisError::Tsne(format!("init_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let stop_exaggeration = config.exaggeration_phase().min(config.iterations);
    let mut kl_after_exaggeration = None;

    for it in 0..config.iterations {
        if it == stop_exaggeration {
            kl_after_exaggeration = Some(kl_divergence(&p, &y));
        }
        let (exaggeration, momentum) = if it < stop_exaggeration {
            (config.early_exaggeration, config.initial_momentum)
        } else {
            (1.0, config.final_momentum)
        };
        let (num, sum) = q_numerators(&y);
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = 4.0 * (exaggeration * p[i * n + j] - w / sum) * w;
                grad[0] += m * (y[i][0] - y[j][0]);
                grad[1] += m * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                gains[i][d] = if (grad[d] > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    gains[i][d] * 0.8
                }
                .max(MIN_GAIN);
                update[i][d] = momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[d];
            }
        }
        for (yi, ui) in y.iter_mut().zip(&update) {
            yi[0] += ui[0];
            yi[1] += ui[1];
        }
        let mean = y.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
    }
    let kl_final = kl_divergence(&p, &y);
    Ok(TsneResult {
        coords: y,
        kl_after_exaggeration: kl_after_exaggeration.unwrap_or(kl_final),
        kl_final,
        config: config.clone(),
    })
}
