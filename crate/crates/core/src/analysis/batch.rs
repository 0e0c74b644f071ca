use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    attention_delta_with, cosine_similarity, percentile, render_heatmap, render_scatter, tsne,
    write_scatter_csv, AnalysisError, EmbeddingSummary, HeadAggregation, TsneConfig,
};
use crate::par::Execution;
use crate::tdump::{DumpKind, TensorDump, EXTENSION};
use crate::watermark::{file_stem, CLEAN_CONDITION_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub clean_condition: String,
    /// Layer to analyze; the deepest layer present per (model, item) when unset.
    pub layer: Option<i64>,
    pub heads: HeadAggregation,
    pub tsne: TsneConfig,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            clean_condition: CLEAN_CONDITION_ID.to_string(),
            layer: None,
            heads: HeadAggregation::Mean,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub model: String,
    pub item: String,
    pub condition: String,
    pub layer: i64,
    pub mean: f64,
    pub max: f64,
    pub p90: f64,
    pub heatmap: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub model: String,
    pub item: String,
    pub condition: String,
    pub layer: i64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneOutcome {
    pub points: usize,
    pub kl_after_exaggeration: f64,
    pub kl_final: f64,
}

/// Everything `analyze_dir` computed; also written to `analysis.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub options: AnalyzeOptions,
    pub dumps_read: usize,
    pub attention: Vec<AttentionRow>,
    pub cosine: Vec<CosineRow>,
    pub tsne: Option<TsneOutcome>,
    /// Why t-SNE was not run, when it was not.
    pub tsne_skipped: Option<String>,
}

type Key = (String, String);

/// Dumps of one kind grouped by (model, item), then layer, then condition.
type Grouped<'a> = BTreeMap<Key, BTreeMap<i64, BTreeMap<String, &'a TensorDump>>>;

fn group(dumps: &[TensorDump], kind: DumpKind) -> Grouped<'_> {
    let mut g: Grouped = BTreeMap::new();
    for d in dumps.iter().filter(|d| d.kind() == kind) {
        g.entry((d.meta.model_name.clone(), d.meta.item_id.clone()))
            .or_default()
            .entry(d.meta.layer_index)
            .or_default()
            .insert(d.meta.condition_id.clone(), d);
    }
    g
}

/// The (clean, marked) pairs at the selected layer of every (model, item).
fn pairs<'a>(g: &Grouped<'a>, opts: &AnalyzeOptions) -> Vec<(i64, &'a TensorDump, &'a TensorDump)> {
    let mut out = Vec::new();
    for layers in g.values() {
        let layer = match opts.layer {
            Some(l) => l,
            None => match layers.keys().next_back() {
                Some(l) => *l,
                None => continue,
            },
        };
        let Some(conds) = layers.get(&layer) else {
            continue;
        };
        let Some(clean) = conds.get(&opts.clean_condition) else {
            continue;
        };
        for (cond, marked) in conds {
            if *cond != opts.clean_condition {
                out.push((layer, *clean, *marked));
            }
        }
    }
    out
}

fn read_dumps(dir: &Path) -> Result<Vec<TensorDump>, AnalysisError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(AnalysisError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| TensorDump::read(&p).map_err(|source| AnalysisError::Dump { path: p, source }))
        .collect()
}

fn csv_err(e: csv::Error) -> AnalysisError {
    AnalysisError::Image(e.to_string())
}

/// Reads every dump in `dumps`, pairs each condition with the clean condition of the
/// same (model, item, layer) and writes heatmaps, cosine similarities and a t-SNE
/// projection of all embedding summaries into `out`.
pub fn analyze_dir(
    dumps: &Path,
    out: &Path,
    opts: &AnalyzeOptions,
    exec: Execution,
) -> Result<AnalysisSummary, AnalysisError> {
    let all = read_dumps(dumps)?;
    if all.is_empty() {
        return Err(AnalysisError::Empty(format!("no .{EXTENSION} files in {}", dumps.display())));
    }
    let attention = group(&all, DumpKind::Attention);
    let embedding = group(&all, DumpKind::Embedding);
    let att_pairs = pairs(&attention, opts);
    let emb_pairs = pairs(&embedding, opts);
    if att_pairs.is_empty() && emb_pairs.is_empty() {
        return Err(AnalysisError::Empty(format!(
            "no dump has a {:?} counterpart at the selected layer",
            opts.clean_condition
        )));
    }
    let heat_dir = out.join("heatmaps");
    fs::create_dir_all(&heat_dir).map_err(AnalysisError::io(&heat_dir))?;

    let att_rows = exec
        .map(&att_pairs, |(layer, clean, marked)| -> Result<AttentionRow, AnalysisError> {
            let delta = attention_delta_with(clean, marked, opts.heads, Execution::Sequential)?;
            let m = &marked.meta;
            let name = format!(
                "{}__{}__{}__L{layer}.png",
                file_stem(&m.model_name),
                file_stem(&m.item_id),
                file_stem(&m.condition_id)
            );
            render_heatmap(&delta, &heat_dir.join(&name))?;
            Ok(AttentionRow {
                model: m.model_name.clone(),
                item: m.item_id.clone(),
                condition: m.condition_id.clone(),
                layer: *layer,
                mean: delta.values.iter().sum::<f64>() / delta.values.len() as f64,
                max: delta.max(),
                p90: percentile(&delta.values, 90.0),
                heatmap: format!("heatmaps/{name}"),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let cosine = emb_pairs
        .iter()
        .map(|(layer, clean, marked)| {
            let c = EmbeddingSummary::from_dump(clean)?;
            let m = EmbeddingSummary::from_dump(marked)?;
            Ok(CosineRow {
                model: m.model_name.clone(),
                item: m.item_id.clone(),
                condition: m.condition_id.clone(),
                layer: *layer,
                cosine: cosine_similarity(&c, &m)?,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;

    let att_csv = out.join("attention.csv");
    let mut w = csv::Writer::from_path(&att_csv).map_err(csv_err)?;
    w.write_record(["model", "item", "condition", "layer", "mean", "max", "p90", "heatmap"])
        .map_err(csv_err)?;
    for r in &att_rows {
        w.write_record([
            r.model.clone(),
            r.item.clone(),
            r.condition.clone(),
            r.layer.to_string(),
            format!("{:e}", r.mean),
            format!("{:e}", r.max),
            format!("{:e}", r.p90),
            r.heatmap.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(AnalysisError::io(&att_csv))?;

    let cos_csv = out.join("cosine.csv");
    let mut w = csv::Writer::from_path(&cos_csv).map_err(csv_err)?;
    w.write_record(["model", "item", "condition", "layer", "cosine"]).map_err(csv_err)?;
    for r in &cosine {
        w.write_record([
            r.model.clone(),
            r.item.clone(),
            r.condition.clone(),
            r.layer.to_string(),
            format!("{:.17}", r.cosine),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(AnalysisError::io(&cos_csv))?;

    let (tsne_outcome, tsne_skipped) = project(&embedding, opts, out)?;
    let summary = AnalysisSummary {
        options: opts.clone(),
        dumps_read: all.len(),
        attention: att_rows,
        cosine,
        tsne: tsne_outcome,
        tsne_skipped,
    };
    let json = out.join("analysis.json");
    fs::write(&json, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(AnalysisError::io(&json))?;
    Ok(summary)
}

/// t-SNE over the embedding summaries at the selected layer, labelled by condition.
fn project(
    embedding: &Grouped<'_>,
    opts: &AnalyzeOptions,
    out: &Path,
) -> Result<(Option<TsneOutcome>, Option<String>), AnalysisError> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for ((model, item), layers) in embedding {
        let layer = opts.layer.or_else(|| layers.keys().next_back().copied());
        let Some(conds) = layer.and_then(|l| layers.get(&l)) else {
            continue;
        };
        for (cond, dump) in conds {
            points.push(EmbeddingSummary::from_dump(dump)?.vector);
            labels.push(cond.clone());
            ids.push(format!("{model}/{item}"));
        }
    }
    let n = points.len();
    let max_perplexity = (n as f64 - 1.0) / 3.0;
    if n < 4 || opts.tsne.perplexity >= max_perplexity {
        let why = format!(
            "{n} embedding summaries are too few for perplexity {}",
            opts.tsne.perplexity
        );
        log::warn!("skipping t-SNE: {why}");
        return Ok((None, Some(why)));
    }
    let result = tsne(&points, &opts.tsne)?;
    render_scatter(&result.coords, &labels, &out.join("tsne.png"))?;
    write_scatter_csv(&result.coords, &labels, &ids, &out.join("tsne.csv"))?;
    Ok((
        Some(TsneOutcome {
            points: n,
            kl_after_exaggeration: result.kl_after_exaggeration,
            kl_final: result.kl_final,
        }),
        None,
    ))
}
