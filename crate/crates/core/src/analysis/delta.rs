use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::par::Execution;
use crate::tdump::{DumpKind, TensorDump};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for HeadAggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(HeadAggregation::Mean),
            "max" => Ok(HeadAggregation::Max),
            _ => Err(format!("unknown head aggregation {s:?} (expected mean or max)")),
        }
    }
}

/// Per-key attention variation, laid out on the patch grid when the dumps carry one
/// and as a single row over the sequence otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDelta {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` nonnegative values.
    pub values: Vec<f64>,
    pub on_patch_grid: bool,
    pub layer_index: i64,
    pub head_aggregation: HeadAggregation,
    pub model_name: String,
    pub item_id: String,
    pub clean_condition: String,
    pub marked_condition: String,
}

impl AttentionDelta {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.values.iter().filter(|v| **v > threshold).count()
    }
}

/// Linear-interpolated percentile (`p` in [0, 100]) of a nonempty sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn check_pair(clean: &TensorDump, marked: &TensorDump) -> Result<(), AnalysisError> {
    for d in [clean, marked] {
        if d.kind() != DumpKind::Attention {
            return Err(AnalysisError::Kind {
                expected: DumpKind::Attention,
                found: d.kind(),
            });
        }
    }
    let (a, b) = (&clean.meta, &marked.meta);
    let mismatch = |what: &str, x: &dyn std::fmt::Debug, y: &dyn std::fmt::Debug| {
        Err(AnalysisError::Mismatch(format!("{what} differs: {x:?} vs {y:?}")))
    };
    if clean.shape != marked.shape {
        return mismatch("shape", &clean.shape, &marked.shape);
    }
    if a.layer_index != b.layer_index {
        return mismatch("layer", &a.layer_index, &b.layer_index);
    }
    if a.item_id != b.item_id {
        return mismatch("item", &a.item_id, &b.item_id);
    }
    if a.model_name != b.model_name {
        return mismatch("model", &a.model_name, &b.model_name);
    }
    if a.grid != b.grid {
        return mismatch("patch grid", &a.grid, &b.grid);
    }
    Ok(())
}

/// `|A_marked - A_clean|`, aggregated over heads, then averaged over queries to one
/// value per key position.
pub fn attention_delta(
    clean: &TensorDump,
    marked: &TensorDump,
    aggregation: HeadAggregation,
) -> Result<AttentionDelta, AnalysisError> {
    attention_delta_with(clean, marked, aggregation, Execution::default())
}

pub fn attention_delta_with(
    clean: &TensorDump,
    marked: &TensorDump,
    aggregation: HeadAggregation,
    exec: Execution,
) -> Result<AttentionDelta, AnalysisError> {
    check_pair(clean, marked)?;
    let (heads, seq) = (clean.shape[0], clean.shape[2]);
    let (a, b) = (&clean.data, &marked.data);

    let chunk = seq.div_ceil(64).max(1);
    let partials = exec.map_range(seq.div_ceil(chunk), |c| {
        let mut acc = vec![0.0f64; seq];
        for q in c * chunk..((c + 1) * chunk).min(seq) {
            for (k, slot) in acc.iter_mut().enumerate() {
                let mut agg = 0.0f64;
                for h in 0..heads {
                    let i = (h * seq + q) * seq + k;
                    let d = (a[i] as f64 - b[i] as f64).abs();
                    agg = match aggregation {
                        HeadAggregation::Mean => agg + d,
                        HeadAggregation::Max => agg.max(d),
                    };
                }
                if aggregation == HeadAggregation::Mean {
                    agg /= heads as f64;
                }
                *slot += agg;
            }
        }
        acc
    });
    let mut per_key = vec![0.0f64; seq];
    for p in partials {
        for (s, v) in per_key.iter_mut().zip(p) {
            *s += v;
        }
    }
    for v in &mut per_key {
        *v /= seq as f64;
    }

    let (rows, cols, values, on_grid) = match clean.meta.grid {
        Some(g) => (
            g.rows,
            g.cols,
            per_key[g.offset..g.offset + g.rows * g.cols].to_vec(),
            true,
        ),
        None => (1, seq, per_key, false),
    };
    Ok(AttentionDelta {
        rows,
        cols,
        values,
        on_patch_grid: on_grid,
        layer_index: clean.meta.layer_index,
        head_aggregation: aggregation,
        model_name: clean.meta.model_name.clone(),
        item_id: clean.meta.item_id.clone(),
        clean_condition: clean.meta.condition_id.clone(),
        marked_condition: marked.meta.condition_id.clone(),
    })
}
