use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::cache::{reply_key, CachedReply, ReplyCache, ReplyLog, CACHE_FILE};
use super::config::{EndpointConfig, ExperimentConfig};
use super::HarnessError;
use crate::client::{HttpModel, MockModel, QueryError, VqaModel, PROMPT_TEMPLATE_VERSION};
use crate::corpus::{self, EvalDataset, VqaItem, SAMPLER_PRNG};
use crate::metrics::{aggregate, grade, RecordGroups, ReportMeta, RunReport};
use crate::par::Execution;
use crate::watermark::{render_condition, Condition, ConditionDescriptor, ENGINE_VERSION};

pub const PLAN_FILE: &str = "plan.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const META_FILE: &str = "run_meta.json";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Everything needed to re-grade a run without the original corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Plan {
    pub seed: u64,
    pub sample: Option<usize>,
    pub models: Vec<String>,
    pub conditions: Vec<ConditionDescriptor>,
    pub datasets: Vec<PlannedDataset>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannedDataset {
    pub name: String,
    pub root: PathBuf,
    pub items: Vec<serde_json::Value>,
}

impl PlannedDataset {
    fn of(ds: &EvalDataset) -> Self {
        PlannedDataset {
            name: ds.name.clone(),
            root: ds.root.clone(),
            items: ds
                .items
                .iter()
                .map(|it| serde_json::to_value(it).expect("item serializes"))
                .collect(),
        }
    }

    fn items(&self) -> Result<Vec<VqaItem>, HarnessError> {
        self.items
            .iter()
            .map(|v| {
                VqaItem::from_json_line(&v.to_string())
                    .map_err(|e| HarnessError::Plan(format!("dataset {}: {e}", self.name)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStats {
    /// (model, dataset, condition, item) combinations in the plan.
    pub planned: usize,
    /// Served from the reply cache without querying.
    pub cached: usize,
    /// Queries sent in this invocation.
    pub issued: usize,
    pub answered: usize,
    pub unanswered: usize,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub dir: PathBuf,
    pub stats: QueryStats,
}

#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    started_unix: f64,
    finished_unix: f64,
    elapsed_secs: f64,
    stats: QueryStats,
    unanswered: &'a [UnansweredNote],
}

#[derive(Debug, Clone, Serialize)]
struct UnansweredNote {
    model: String,
    dataset: String,
    condition: String,
    item_id: String,
    reason: String,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and samples every configured dataset.
pub fn prepare_datasets(config: &ExperimentConfig) -> Result<Vec<EvalDataset>, HarnessError> {
    config
        .datasets
        .iter()
        .map(|d| {
            let root = d
                .root
                .clone()
                .or_else(|| d.manifest.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            let mut ds = corpus::load_manifest_with_root(&d.manifest, root)?;
            ds.name = d.name();
            Ok(match config.sample {
                Some(n) => corpus::sample(&ds, n, config.seed)?,
                None => ds,
            })
        })
        .collect()
}

/// Instantiates the configured models. Mock baselines are measured on `datasets`.
pub fn build_models(
    config: &ExperimentConfig,
    datasets: &[EvalDataset],
) -> Result<Vec<Arc<dyn VqaModel>>, HarnessError> {
    config
        .endpoints
        .iter()
        .map(|ep| -> Result<Arc<dyn VqaModel>, HarnessError> {
            match ep {
                EndpointConfig::Http(e) => {
                    let m = HttpModel::new(e.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
                    Ok(Arc::new(m))
                }
                EndpointConfig::Mock { model_name, behavior } => Ok(Arc::new(
                    MockModel::new(model_name.clone(), behavior.clone()).with_baselines(datasets)?,
                )),
            }
        })
        .collect()
}

fn condition_dir(run_dir: &Path, condition: &Condition) -> PathBuf {
    run_dir
        .join("conditions")
        .join(crate::watermark::file_stem(&condition.id))
}

/// Renders every condition except the clean baseline, reusing renders from an earlier
/// invocation when their descriptor matches. Returns datasets indexed
/// `[condition][dataset]`; the clean entry is the input dataset itself.
pub fn render_all(
    run_dir: &Path,
    conditions: &[Condition],
    datasets: &[EvalDataset],
    exec: Execution,
) -> Result<Vec<Vec<EvalDataset>>, HarnessError> {
    let mut out = Vec::with_capacity(conditions.len());
    for cond in conditions {
        if cond.is_clean() {
            out.push(datasets.to_vec());
            continue;
        }
        let cdir = condition_dir(run_dir, cond);
        mkdir(&cdir)?;
        let descriptor = cond.descriptor().to_json();
        write(&cdir.join("condition.json"), &descriptor)?;
        let mut per_ds = Vec::with_capacity(datasets.len());
        for ds in datasets {
            let ddir = cdir.join(crate::watermark::file_stem(&ds.name));
            let rendered = match reuse_render(&ddir, &descriptor, ds) {
                Some(r) => r,
                None => {
                    log::info!("rendering {} / {} ({} items)", cond.id, ds.name, ds.len());
                    render_condition(ds, cond, &ddir, exec)?
                }
            };
            per_ds.push(rendered);
        }
        out.push(per_ds);
    }
    Ok(out)
}

fn reuse_render(dir: &Path, descriptor: &str, ds: &EvalDataset) -> Option<EvalDataset> {
    if fs::read_to_string(dir.join("condition.json")).ok()? != descriptor {
        return None;
    }
    let mut r = corpus::load_manifest_with_root(dir.join("manifest.jsonl"), dir).ok()?;
    let same = r.items.len() == ds.items.len() && r.items.iter().zip(&ds.items).all(|(a, b)| a.id == b.id);
    if !same {
        return None;
    }
    r.name = ds.name.clone();
    Some(r)
}

#[derive(Debug, Clone)]
struct Job {
    model: usize,
    dataset: usize,
    condition: usize,
    item: usize,
    key: String,
}

enum JobResult {
    Answered(CachedReply),
    Unanswered(String),
    Skipped,
}

/// Runs an experiment end to end with the configured endpoints.
pub fn run(config: &ExperimentConfig, exec: Execution) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    let datasets = prepare_datasets(config)?;
    let models = build_models(config, &datasets)?;
    run_with_models(config, &models, exec)
}

/// Runs an experiment with caller-supplied models (one per configured endpoint
/// slot is not required; the given models are used as-is).
pub fn run_with_models(
    config: &ExperimentConfig,
    models: &[Arc<dyn VqaModel>],
    exec: Execution,
) -> Result<RunOutcome, HarnessError> {
    let started = unix_now();
    let clock = Instant::now();
    config.validate()?;
    let conditions = config.conditions()?;
    let datasets = prepare_datasets(config)?;
    let dir = config.output_dir.clone();
    mkdir(&dir)?;

    let plan = Plan {
        seed: config.seed,
        sample: config.sample,
        models: models.iter().map(|m| m.model_name().to_string()).collect(),
        conditions: conditions.iter().map(Condition::descriptor).collect(),
        datasets: datasets.iter().map(PlannedDataset::of).collect(),
    };
    write(&dir.join(CONFIG_FILE), config.to_toml())?;
    write(
        &dir.join(PLAN_FILE),
        serde_json::to_string_pretty(&plan).expect("plan serializes"),
    )?;

    let rendered = render_all(&dir, &conditions, &datasets, exec)?;

    let cache_path = dir.join(CACHE_FILE);
    let mut cache = ReplyCache::load(&cache_path)?;
    let mut jobs = Vec::new();
    let mut stats = QueryStats::default();
    for (mi, model) in models.iter().enumerate() {
        for (di, ds) in datasets.iter().enumerate() {
            for (ci, cond) in plan.conditions.iter().enumerate() {
                for (ii, item) in ds.items.iter().enumerate() {
                    stats.planned += 1;
                    let key = reply_key(&ds.name, &item.id, cond, model.model_name());
                    if cache.contains(&key) {
                        stats.cached += 1;
                    } else {
                        jobs.push(Job {
                            model: mi,
                            dataset: di,
                            condition: ci,
                            item: ii,
                            key,
                        });
                    }
                }
            }
        }
    }
    log::info!(
        "{} queries planned, {} cached, {} to issue",
        stats.planned,
        stats.cached,
        jobs.len()
    );

    let (tx, rx) = mpsc::channel::<CachedReply>();
    let mut log_file = ReplyLog::open(&cache_path)?;
    let writer = thread::spawn(move || -> Result<(), HarnessError> {
        for reply in rx {
            log_file.append(&reply)?;
        }
        Ok(())
    });

    let stop = AtomicBool::new(false);
    let fatal: Mutex<Option<QueryError>> = Mutex::new(None);
    let results = exec.bounded_map(config.max_in_flight, &jobs, |job| {
        if stop.load(Ordering::SeqCst) {
            return JobResult::Skipped;
        }
        let model = &models[job.model];
        let ds = &rendered[job.condition][job.dataset];
        let item = &ds.items[job.item];
        let cond_id = &plan.conditions[job.condition].id;
        let image = match ds.load_image(item) {
            Ok(img) => img,
            Err(e) => return JobResult::Unanswered(format!("image unavailable: {e}")),
        };
        match model.query(item, &image, cond_id) {
            Ok(reply) => {
                let cached = CachedReply {
                    key: job.key.clone(),
                    model: model.model_name().to_string(),
                    dataset: ds.name.clone(),
                    item_id: reply.item_id,
                    condition_id: reply.condition_id,
                    raw_text: reply.raw_text,
                    latency_secs: reply.latency_secs,
                    attempt_count: reply.attempt_count,
                };
                let _ = tx.send(cached.clone());
                JobResult::Answered(cached)
            }
            Err(QueryError::Unanswered { attempts, reason }) => {
                JobResult::Unanswered(format!("after {attempts} attempt(s): {reason}"))
            }
            Err(e) => {
                stop.store(true, Ordering::SeqCst);
                fatal.lock().unwrap().get_or_insert(e);
                JobResult::Skipped
            }
        }
    });
    drop(tx);
    writer.join().expect("reply writer panicked")?;

    let mut unanswered: HashMap<String, String> = HashMap::new();
    for (job, res) in jobs.iter().zip(results) {
        match res {
            JobResult::Answered(r) => {
                stats.issued += 1;
                stats.answered += 1;
                cache.insert(r);
            }
            JobResult::Unanswered(reason) => {
                stats.issued += 1;
                stats.unanswered += 1;
                unanswered.insert(job.key.clone(), reason);
            }
            JobResult::Skipped => {}
        }
    }
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(match e {
            QueryError::Auth(m) => HarnessError::Auth(m),
            other => HarnessError::Aborted(other.to_string()),
        });
    }

    let items: Vec<Vec<VqaItem>> = datasets.iter().map(|d| d.items.clone()).collect();
    let (report, notes) = grade_all(&plan, &items, &cache, &unanswered);
    write_artifacts(&dir, &report)?;
    let meta = RunMeta {
        started_unix: started,
        finished_unix: unix_now(),
        elapsed_secs: clock.elapsed().as_secs_f64(),
        stats,
        unanswered: &notes,
    };
    write(
        &dir.join(META_FILE),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    Ok(RunOutcome { report, dir, stats })
}

fn grade_all(
    plan: &Plan,
    items: &[Vec<VqaItem>],
    cache: &ReplyCache,
    unanswered: &HashMap<String, String>,
) -> (RunReport, Vec<UnansweredNote>) {
    let mut groups = RecordGroups::new();
    let mut notes = Vec::new();
    for model in &plan.models {
        for (pd, ds_items) in plan.datasets.iter().zip(items) {
            let mut records = Vec::new();
            for cond in &plan.conditions {
                for item in ds_items {
                    let key = reply_key(&pd.name, &item.id, cond, model);
                    let reply = cache.get(&key).map(|r| r.raw_text.as_str());
                    if reply.is_none() {
                        notes.push(UnansweredNote {
                            model: model.clone(),
                            dataset: pd.name.clone(),
                            condition: cond.id.clone(),
                            item_id: item.id.clone(),
                            reason: unanswered.get(&key).cloned().unwrap_or_else(|| "no reply recorded".into()),
                        });
                    }
                    records.push(grade(item, &cond.id, reply));
                }
            }
            groups.insert((model.clone(), pd.name.clone()), records);
        }
    }
    let meta = ReportMeta {
        seed: plan.seed,
        sampler: SAMPLER_PRNG.to_string(),
        sample_size: plan.sample,
        prompt_template_version: PROMPT_TEMPLATE_VERSION.to_string(),
        engine_version: ENGINE_VERSION.to_string(),
        models: plan.models.clone(),
        datasets: plan.datasets.iter().map(|d| d.name.clone()).collect(),
        conditions: plan.conditions.clone(),
    };
    (aggregate(meta, &groups), notes)
}

/// Writes `report.json`, the table CSVs and `summary.txt`.
pub fn write_artifacts(dir: &Path, report: &RunReport) -> Result<(), HarnessError> {
    let io = |path: PathBuf| move |source| HarnessError::Io { path, source };
    write(&dir.join(REPORT_FILE), report.to_json())?;
    let cells = dir.join("cells.csv");
    report.write_cells_csv(&cells).map_err(io(cells))?;
    let mut defenses: Vec<Option<u8>> = vec![None];
    defenses.extend(report.defenses().into_iter().map(Some));
    for d in defenses {
        let suffix = d.map_or(String::new(), |q| format!("_jpeg{q}"));
        for (name, table) in [
            ("position_table", report.position_table(d)),
            ("content_table", report.content_table(d)),
        ] {
            let p = dir.join(format!("{name}{suffix}.csv"));
            table.write_csv(&p).map_err(io(p.clone()))?;
        }
    }
    write(&dir.join(SUMMARY_FILE), report.summary())
}

/// Rebuilds the report of a run directory from its plan and reply log only.
pub fn regrade(run_dir: &Path) -> Result<RunReport, HarnessError> {
    let plan_path = run_dir.join(PLAN_FILE);
    let text = fs::read_to_string(&plan_path).map_err(|source| HarnessError::Io {
        path: plan_path.clone(),
        source,
    })?;
    let plan: Plan = serde_json::from_str(&text).map_err(|e| HarnessError::Plan(e.to_string()))?;
    let items = plan
        .datasets
        .iter()
        .map(PlannedDataset::items)
        .collect::<Result<Vec<_>, _>>()?;
    let cache = ReplyCache::load(&run_dir.join(CACHE_FILE))?;
    let (report, _) = grade_all(&plan, &items, &cache, &HashMap::new());
    write_artifacts(run_dir, &report)?;
    Ok(report)
}
