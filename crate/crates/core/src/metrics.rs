//! Grading and aggregation: answer parsing, accuracy, performance drop rate, and the
//! position/content PDR tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Category, OptionLetter, VqaItem};
use crate::watermark::{
    Condition, ConditionDescriptor, PositionMode, WatermarkContent,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("accuracy is undefined: no graded records")]
    UndefinedAccuracy,
    #[error("PDR is undefined: clean accuracy is zero")]
    UndefinedPdr,
}

/// Words that may join letters in an answer list.
const CONNECTORS: [&str; 2] = ["and", "&"];

/// Words after which a bare capital "A" still reads as an option letter.
const A_VERBS: [&str; 8] = ["and", "&", "is", "are", "was", "were", "seems", "appears"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token<'a> {
    Letter(OptionLetter, bool),
    Connector,
    Other(&'a str),
}

fn letter_core(tok: &str) -> (&str, bool) {
    let core = tok.trim_matches(|c: char| !c.is_ascii_alphanumeric());
    let tail = tok.trim_end_matches(|c: char| matches!(c, '*' | '"' | '\'' | '`' | ')' | ']'));
    let ends_sentence = tail.ends_with(['.', '!', '?', ';']);
    (core, ends_sentence)
}

fn tokenize(raw: &str) -> Vec<Token<'_>> {
    let words: Vec<&str> = raw
        .split(|c: char| c.is_whitespace() || c == ',' || c == '/')
        .filter(|w| !w.is_empty())
        .collect();
    let mut out = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        if CONNECTORS.contains(&w.to_ascii_lowercase().as_str()) {
            out.push(Token::Connector);
            continue;
        }
        let (core, ends) = letter_core(w);
        let mut chars = core.chars();
        let letter = match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_uppercase() => OptionLetter::from_char(c),
            _ => None,
        };
        let is_article = letter == Some(OptionLetter::A)
            && *w == "A"
            && words.get(i + 1).is_some_and(|next| {
                next.starts_with(|c: char| c.is_ascii_lowercase())
                    && !A_VERBS.contains(&next.trim_end_matches(|c: char| !c.is_ascii_alphanumeric()))
            });
        match letter {
            Some(l) if !is_article => out.push(Token::Letter(l, ends)),
            _ => out.push(Token::Other(w)),
        }
    }
    out
}

/// Rule 1: the first run of standalone letters joined by spaces, commas or "and".
fn standalone_letters(raw: &str) -> Vec<OptionLetter> {
    let mut run = Vec::new();
    for tok in tokenize(raw) {
        match tok {
            Token::Letter(l, ends) => {
                run.push(l);
                if ends {
                    break;
                }
            }
            Token::Connector => {}
            Token::Other(_) if run.is_empty() => {}
            Token::Other(_) => break,
        }
    }
    run
}

fn line_start_letter(line: &str) -> Option<OptionLetter> {
    let s = line.trim_start().trim_start_matches(['(', '*', '-', '>']).trim_start();
    let mut chars = s.chars();
    let l = OptionLetter::from_char(chars.next()?)?;
    matches!(chars.next(), Some('.') | Some(')')).then_some(l)
}

/// Rule 2: letters followed by "." or ")" at the start of a line.
fn enumerated_letters(raw: &str) -> Vec<OptionLetter> {
    raw.lines().filter_map(line_start_letter).collect()
}

/// Rule 3: the reply is exactly one option's text.
fn option_text_match(raw: &str, options: &BTreeMap<OptionLetter, String>) -> Option<OptionLetter> {
    let norm = |s: &str| {
        s.trim()
            .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*'))
            .trim_end_matches('.')
            .trim()
            .to_lowercase()
    };
    let reply = norm(raw);
    if reply.is_empty() {
        return None;
    }
    options
        .iter()
        .find(|(_, text)| norm(text) == reply)
        .map(|(l, _)| *l)
}

fn finish(letters: Vec<OptionLetter>, category: Category) -> BTreeSet<OptionLetter> {
    if category.is_multiple_response() {
        letters.into_iter().collect()
    } else {
        letters.into_iter().take(1).collect()
    }
}

/// Extracts option letters from a reply using the letter rules only.
pub fn parse_answer(raw: &str, category: Category) -> BTreeSet<OptionLetter> {
    parse_answer_with_options(raw, category, &BTreeMap::new())
}

/// Extracts option letters from a reply. Rules in priority order: a leading
/// enumerated line list ("A. ..." / "B) ..."), the first run of standalone letters,
/// any enumerated lines, then an exact option-text match. Unparseable replies give
/// the empty set.
pub fn parse_answer_with_options(
    raw: &str,
    category: Category,
    options: &BTreeMap<OptionLetter, String>,
) -> BTreeSet<OptionLetter> {
    let first_line = raw.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if line_start_letter(first_line).is_some() {
        return finish(enumerated_letters(raw), category);
    }
    let run = standalone_letters(raw);
    if !run.is_empty() {
        return finish(run, category);
    }
    let listed = enumerated_letters(raw);
    if !listed.is_empty() {
        return finish(listed, category);
    }
    finish(option_text_match(raw, options).into_iter().collect(), category)
}

/// Grading outcome of one item under one condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub condition_id: String,
    pub parsed_answer: BTreeSet<OptionLetter>,
    pub correct: bool,
    pub unanswered: bool,
}

/// Grades a reply by exact letter-set equality. `None` marks the item unanswered.
pub fn grade(item: &VqaItem, condition_id: &str, reply: Option<&str>) -> EvalRecord {
    match reply {
        Some(raw) => {
            let parsed = parse_answer_with_options(raw, item.category, &item.options);
            EvalRecord {
                item_id: item.id.clone(),
                condition_id: condition_id.to_string(),
                correct: parsed == item.answer,
                parsed_answer: parsed,
                unanswered: false,
            }
        }
        None => EvalRecord {
            item_id: item.id.clone(),
            condition_id: condition_id.to_string(),
            parsed_answer: BTreeSet::new(),
            correct: false,
            unanswered: true,
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub graded: usize,
    pub unanswered: usize,
}

impl Counts {
    pub fn of(records: &[EvalRecord]) -> Self {
        let mut c = Counts::default();
        for r in records {
            if r.unanswered {
                c.unanswered += 1;
            } else {
                c.graded += 1;
                c.correct += r.correct as usize;
            }
        }
        c
    }

    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        if self.graded == 0 {
            Err(MetricsError::UndefinedAccuracy)
        } else {
            Ok(self.correct as f64 / self.graded as f64)
        }
    }
}

/// Correct over graded; unanswered records are excluded from both.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    Counts::of(records).accuracy()
}

/// Percentage drop from `acc_clean` to `acc_marked`; negative when accuracy rose.
pub fn pdr(acc_clean: f64, acc_marked: f64) -> Result<f64, MetricsError> {
    if acc_clean == 0.0 {
        Err(MetricsError::UndefinedPdr)
    } else {
        Ok(100.0 * (acc_clean - acc_marked) / acc_clean)
    }
}

/// Integer rendering used in tables: rounded half away from zero, "n/a" when undefined.
pub fn format_pdr(value: Option<f64>) -> String {
    match value {
        Some(v) => {
            let r = v.round();
            format!("{}", if r == 0.0 { 0.0 } else { r })
        }
        None => "n/a".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub sampler: String,
    pub sample_size: Option<usize>,
    pub prompt_template_version: String,
    pub engine_version: String,
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub conditions: Vec<ConditionDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub model: String,
    pub dataset: String,
    pub condition: String,
    pub counts: Counts,
    pub accuracy: Option<f64>,
    /// Against the undefended clean condition of the same model and dataset.
    pub pdr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub meta: ReportMeta,
    pub cells: Vec<CellReport>,
}

/// Records of one (model, dataset) pair, keyed by condition id.
pub type RecordGroups = BTreeMap<(String, String), Vec<EvalRecord>>;

/// Builds the report. Cells follow model, dataset and condition order from `meta`;
/// conditions without records are omitted.
pub fn aggregate(meta: ReportMeta, groups: &RecordGroups) -> RunReport {
    let clean_id = meta
        .conditions
        .iter()
        .find(|c| c.condition().is_clean())
        .map(|c| c.id.clone());
    let mut cells = Vec::new();
    for model in &meta.models {
        for dataset in &meta.datasets {
            let Some(records) = groups.get(&(model.clone(), dataset.clone())) else {
                continue;
            };
            let mut by_cond: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
            for r in records {
                by_cond.entry(r.condition_id.as_str()).or_default().push(r.clone());
            }
            let acc_clean = clean_id
                .as_deref()
                .and_then(|id| by_cond.get(id))
                .and_then(|rs| accuracy(rs).ok());
            for cond in &meta.conditions {
                let Some(rs) = by_cond.get(cond.id.as_str()) else {
                    continue;
                };
                let counts = Counts::of(rs);
                let acc = counts.accuracy().ok();
                let p = match (acc_clean, acc) {
                    (Some(c), Some(m)) => pdr(c, m).ok(),
                    _ => None,
                };
                cells.push(CellReport {
                    model: model.clone(),
                    dataset: dataset.clone(),
                    condition: cond.id.clone(),
                    counts,
                    accuracy: acc,
                    pdr: p,
                });
            }
        }
    }
    RunReport { meta, cells }
}

/// A model-by-(dataset x column) PDR table with an AVG row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdrTable {
    pub title: String,
    pub datasets: Vec<String>,
    pub columns: Vec<String>,
    /// Condition id behind each column, `None` if the run has no such condition.
    pub column_conditions: Vec<Option<String>>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    /// Dataset-major: all columns of the first dataset, then the next.
    pub values: Vec<Option<f64>>,
}

fn pick(
    conditions: &[Condition],
    defense: Option<u8>,
    want: impl Fn(&crate::watermark::WatermarkSpec) -> bool,
    prefer: impl Fn(&crate::watermark::WatermarkSpec) -> bool,
) -> Option<String> {
    let candidates: Vec<&Condition> = conditions
        .iter()
        .filter(|c| c.jpeg_quality == defense && c.spec.as_ref().is_some_and(&want))
        .collect();
    candidates
        .iter()
        .find(|c| c.spec.as_ref().is_some_and(&prefer))
        .or(candidates.first())
        .map(|c| c.id.clone())
}

impl RunReport {
    pub fn cell(&self, model: &str, dataset: &str, condition: &str) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.dataset == dataset && c.condition == condition)
    }

    fn conditions(&self) -> Vec<Condition> {
        self.meta.conditions.iter().map(|d| d.condition()).collect()
    }

    fn table(&self, title: String, columns: Vec<(String, Option<String>)>) -> PdrTable {
        let mut rows: Vec<TableRow> = self
            .meta
            .models
            .iter()
            .map(|model| TableRow {
                label: model.clone(),
                values: self
                    .meta
                    .datasets
                    .iter()
                    .flat_map(|ds| {
                        columns.iter().map(move |(_, id)| {
                            id.as_deref()
                                .and_then(|id| self.cell(model, ds, id))
                                .and_then(|c| c.pdr)
                        })
                    })
                    .collect(),
            })
            .collect();
        let width = self.meta.datasets.len() * columns.len();
        let avg = (0..width)
            .map(|i| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.values[i]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        rows.push(TableRow {
            label: "AVG".into(),
            values: avg,
        });
        PdrTable {
            title,
            datasets: self.meta.datasets.clone(),
            columns: columns.iter().map(|(l, _)| l.clone()).collect(),
            column_conditions: columns.into_iter().map(|(_, id)| id).collect(),
            rows,
        }
    }

    /// PDR by watermark position for the default text watermark.
    pub fn position_table(&self, defense: Option<u8>) -> PdrTable {
        let conds = self.conditions();
        let columns = PositionMode::ALL
            .into_iter()
            .map(|p| {
                let id = pick(
                    &conds,
                    defense,
                    |s| s.position == p && s.content == WatermarkContent::text(),
                    |_| true,
                );
                (p.label().to_string(), id)
            })
            .collect();
        self.table(table_title("PDR (%) by watermark position", defense), columns)
    }

    /// PDR by watermark content, preferring centered conditions.
    pub fn content_table(&self, defense: Option<u8>) -> PdrTable {
        let conds = self.conditions();
        let columns = [
            WatermarkContent::text(),
            WatermarkContent::symbol(),
            WatermarkContent::Mask,
        ]
        .into_iter()
        .map(|content| {
            let id = pick(
                &conds,
                defense,
                |s| s.content == content,
                |s| s.position == PositionMode::Center,
            );
            (content.label(), id)
        })
        .collect();
        self.table(table_title("PDR (%) by watermark content", defense), columns)
    }

    /// JPEG qualities used as defenses in this run, ascending.
    pub fn defenses(&self) -> Vec<u8> {
        self.meta
            .conditions
            .iter()
            .filter_map(|c| c.jpeg_quality)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-cell counts, accuracy and PDR as CSV.
    pub fn write_cells_csv(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "model", "dataset", "condition", "correct", "graded", "unanswered", "accuracy", "pdr",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.model.clone(),
                c.dataset.clone(),
                c.condition.clone(),
                c.counts.correct.to_string(),
                c.counts.graded.to_string(),
                c.counts.unanswered.to_string(),
                c.accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                c.pdr.map_or("n/a".into(), |p| format!("{p:.2}")),
            ])?;
        }
        w.flush()
    }

    /// Human-readable tables with per-dataset maxima flagged by `*`.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut tables = vec![self.position_table(None), self.content_table(None)];
        for q in self.defenses() {
            tables.push(self.position_table(Some(q)));
            tables.push(self.content_table(Some(q)));
        }
        for t in tables.iter().filter(|t| t.column_conditions.iter().any(Option::is_some)) {
            out.push_str(&t.render_text());
            out.push('\n');
        }
        out.push_str("Accuracy by condition\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "  {:<16} {:<12} {:<48} acc {:>6}  pdr {:>4}  ({}/{} graded, {} unanswered)",
                c.model,
                c.dataset,
                c.condition,
                c.accuracy.map_or("n/a".into(), |a| format!("{a:.3}")),
                format_pdr(c.pdr),
                c.counts.correct,
                c.counts.graded,
                c.counts.unanswered,
            );
        }
        out
    }
}

fn table_title(base: &str, defense: Option<u8>) -> String {
    match defense {
        Some(q) => format!("{base}, JPEG q{q} defense"),
        None => base.to_string(),
    }
}

impl PdrTable {
    /// Flags per row and dataset: cells equal to the group's rounded maximum, unless
    /// every defined cell in the group is equal.
    pub fn maxima(&self) -> Vec<Vec<bool>> {
        let k = self.columns.len();
        self.rows
            .iter()
            .map(|row| {
                let mut flags = vec![false; row.values.len()];
                for (g, group) in row.values.chunks(k.max(1)).enumerate() {
                    let rounded: Vec<Option<f64>> =
                        group.iter().map(|v| v.map(f64::round)).collect();
                    let defined: Vec<f64> = rounded.iter().flatten().copied().collect();
                    let Some(max) = defined.iter().copied().reduce(f64::max) else {
                        continue;
                    };
                    if defined.iter().all(|v| *v == max) && defined.len() > 1 {
                        continue;
                    }
                    for (i, v) in rounded.iter().enumerate() {
                        flags[g * k + i] = *v == Some(max);
                    }
                }
                flags
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["model".to_string()];
        for ds in &self.datasets {
            for col in &self.columns {
                header.push(format!("{ds}/{col}"));
            }
        }
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.label.clone()];
            rec.extend(row.values.iter().map(|v| format_pdr(*v)));
            w.write_record(&rec)?;
        }
        w.flush()
    }

    pub fn render_text(&self) -> String {
        const CELL: usize = 10;
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let group_w = CELL * self.columns.len();
        let mut out = format!("{}\n", self.title);
        let _ = write!(out, "{:<label_w$}", "Model");
        for ds in &self.datasets {
            let _ = write!(out, " |{:^group_w$}", ds);
        }
        out.push('\n');
        let _ = write!(out, "{:<label_w$}", "");
        for _ in &self.datasets {
            out.push_str(" |");
            for c in &self.columns {
                let _ = write!(out, "{:>CELL$}", c);
            }
        }
        out.push('\n');
        let flags = self.maxima();
        let k = self.columns.len().max(1);
        for (row, fl) in self.rows.iter().zip(&flags) {
            let _ = write!(out, "{:<label_w$}", row.label);
            for (i, v) in row.values.iter().enumerate() {
                if i % k == 0 {
                    out.push_str(" |");
                }
                let s = format!("{}{}", format_pdr(*v), if fl[i] { "*" } else { "" });
                let _ = write!(out, "{:>CELL$}", s);
            }
            out.push('\n');
        }
        out
    }
}
