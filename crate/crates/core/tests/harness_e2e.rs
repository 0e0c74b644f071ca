mod common;

use std::collections::HashSet;
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use common::*;
use docmark::client::{
    mock_oracle, MockBehavior, MockModel, ModelReply, QueryError, Region, VqaModel,
};
use docmark::corpus::{DocumentImage, VqaItem};
use docmark::harness::{self, CachedReply, HarnessError, CACHE_FILE};
use docmark::metrics::RunReport;
use docmark::watermark::{compute_placement, Condition, PositionMode, WatermarkContent, WatermarkSpec};
use docmark::Execution;

fn mark_id(position: PositionMode) -> String {
    Condition::watermark(WatermarkSpec::new(WatermarkContent::text(), position)).id
}

fn pdr(report: &RunReport, position: PositionMode) -> f64 {
    report
        .cell("mock", "synthetic", &mark_id(position))
        .and_then(|c| c.pdr)
        .expect("pdr defined")
}

fn overlaps(b: (f64, f64, f64, f64), r: &Region) -> bool {
    let (w, h) = (WIDTH as f64, HEIGHT as f64);
    b.0 < r.x1 * w && r.x0 * w < b.2 && b.1 < r.y1 * h && r.y0 * h < b.3
}

fn regions_hit(position: PositionMode) -> usize {
    let spec = WatermarkSpec::new(WatermarkContent::text(), position);
    let boxes = compute_placement(WIDTH, HEIGHT, &spec).unwrap();
    anchor_regions()
        .iter()
        .filter(|r| boxes.iter().any(|b| overlaps(b.bounds(), r)))
        .count()
}

#[test]
fn scattered_marks_hurt_most() {
    assert_eq!(regions_hit(PositionMode::Scattered), 5);
    assert_eq!(regions_hit(PositionMode::Center), 1);
    assert_eq!(regions_hit(PositionMode::TopLeft), 0);

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&dir.path().join("corpus"), ITEMS);
    let cfg = mock_config(&manifest, &dir.path().join("run"), "positions", flip_behavior());
    let t = Instant::now();
    let out = harness::run(&cfg, Execution::Parallel).unwrap();
    assert!(t.elapsed().as_secs_f64() < 30.0);

    let r = &out.report;
    let clean = r.cell("mock", "synthetic", "clean").unwrap();
    assert_eq!(clean.accuracy, Some(1.0));
    // 39 of 40 items carry content under some anchor, 16 under the center one
    assert_eq!(pdr(r, PositionMode::Scattered), 97.5);
    assert_eq!(pdr(r, PositionMode::Center), 40.0);
    assert_eq!(pdr(r, PositionMode::TopLeft), 0.0);
    assert_eq!(out.stats.planned, 4 * ITEMS);
    assert_eq!(out.stats.issued, 4 * ITEMS);

    for f in ["report.json", "cells.csv", "position_table.csv", "content_table.csv", "summary.txt", "run_meta.json", "config.toml", "plan.json"] {
        assert!(out.dir.join(f).is_file(), "{f} missing");
    }
    let summary = fs::read_to_string(out.dir.join("summary.txt")).unwrap();
    assert!(summary.contains("98*"), "{summary}");
}

#[test]
fn always_correct_has_zero_drop() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&dir.path().join("corpus"), 8);
    let cfg = mock_config(&manifest, &dir.path().join("run"), "positions", MockBehavior::AlwaysCorrect);
    let out = harness::run(&cfg, Execution::Parallel).unwrap();
    assert_eq!(out.report.cells.len(), 4);
    for c in &out.report.cells {
        assert_eq!(c.accuracy, Some(1.0));
        if c.condition != "clean" {
            assert_eq!(c.pdr, Some(0.0));
        }
    }
}

#[test]
fn reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&dir.path().join("corpus"), 12);
    let mut reports = Vec::new();
    for (i, exec) in [Execution::Parallel, Execution::Sequential, Execution::Parallel].into_iter().enumerate() {
        let mut cfg = mock_config(&manifest, &dir.path().join(format!("run{i}")), "contents", flip_behavior());
        cfg.defense.jpeg_quality = Some(30);
        harness::run(&cfg, exec).unwrap();
        reports.push(fs::read(cfg.output_dir.join("report.json")).unwrap());
        assert!(cfg.output_dir.join("content_table_jpeg30.csv").is_file());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);
}

fn cache_lines(path: &std::path::Path) -> Vec<CachedReply> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn interrupted_run_resumes_without_duplicate_queries() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&dir.path().join("corpus"), ITEMS);
    let cfg = mock_config(&manifest, &dir.path().join("run"), "positions", flip_behavior());
    let datasets = harness::prepare_datasets(&cfg).unwrap();
    let planned = 4 * ITEMS;
    let half = planned / 2;

    let first = Arc::new(MockModel::new("mock", flip_behavior()).with_baselines(&datasets).unwrap().abort_after(half));
    let err = harness::run_with_models(&cfg, &[first.clone() as Arc<dyn VqaModel>], Execution::Parallel).unwrap_err();
    assert!(matches!(err, HarnessError::Aborted(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert_eq!(first.query_count(), half);
    let log = cfg.output_dir.join(CACHE_FILE);
    assert_eq!(cache_lines(&log).len(), half);

    let second = Arc::new(MockModel::new("mock", flip_behavior()).with_baselines(&datasets).unwrap());
    let out = harness::run_with_models(&cfg, &[second.clone() as Arc<dyn VqaModel>], Execution::Parallel).unwrap();
    assert_eq!(out.stats.cached, half);
    assert_eq!(out.stats.issued, planned - half);
    assert_eq!(second.query_count(), planned - half);

    let lines = cache_lines(&log);
    let keys: HashSet<_> = lines.iter().map(|r| r.key.clone()).collect();
    assert_eq!(lines.len(), planned);
    assert_eq!(keys.len(), planned);

    // a third invocation is served entirely from the cache
    let third = Arc::new(MockModel::new("mock", flip_behavior()).with_baselines(&datasets).unwrap());
    let again = harness::run_with_models(&cfg, &[third.clone() as Arc<dyn VqaModel>], Execution::Parallel).unwrap();
    assert_eq!(third.query_count(), 0);
    assert_eq!(again.stats.cached, planned);

    let fresh = mock_config(&manifest, &dir.path().join("fresh"), "positions", flip_behavior());
    harness::run(&fresh, Execution::Sequential).unwrap();
    assert_eq!(
        fs::read(fresh.output_dir.join("report.json")).unwrap(),
        fs::read(cfg.output_dir.join("report.json")).unwrap()
    );
}

#[test]
fn regrade_needs_only_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let manifest = write_corpus(&corpus, 10);
    let cfg = mock_config(&manifest, &dir.path().join("run"), "positions", flip_behavior());
    let out = harness::run(&cfg, Execution::Parallel).unwrap();
    let original = fs::read(out.dir.join("report.json")).unwrap();

    fs::remove_dir_all(&corpus).unwrap();
    fs::remove_dir_all(out.dir.join("conditions")).unwrap();
    fs::remove_file(out.dir.join("report.json")).unwrap();
    let report = harness::regrade(&out.dir).unwrap();
    assert_eq!(report, out.report);
    assert_eq!(fs::read(out.dir.join("report.json")).unwrap(), original);
}

/// Fails the first query of every item whose number is divisible by three.
struct Flaky {
    seen: std::sync::Mutex<HashSet<String>>,
    queries: AtomicUsize,
}

impl VqaModel for Flaky {
    fn model_name(&self) -> &str {
        "mock"
    }

    fn query(&self, item: &VqaItem, image: &DocumentImage, condition_id: &str) -> Result<ModelReply, QueryError> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        let k: usize = item.id.trim_start_matches("item-").parse().unwrap();
        let first = self.seen.lock().unwrap().insert(format!("{}/{condition_id}", item.id));
        if k % 3 == 0 && first {
            return Err(QueryError::Unanswered {
                attempts: 3,
                reason: "HTTP 503".into(),
            });
        }
        Ok(ModelReply {
            item_id: item.id.clone(),
            condition_id: condition_id.into(),
            raw_text: mock_oracle(&MockBehavior::AlwaysCorrect, item, image, None),
            latency_secs: 0.0,
            attempt_count: 1,
        })
    }
}

#[test]
fn unanswered_items_are_excluded_then_retried() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&dir.path().join("corpus"), 9);
    let cfg = mock_config(&manifest, &dir.path().join("run"), "positions", MockBehavior::AlwaysCorrect);
    let flaky = Arc::new(Flaky {
        seen: Default::default(),
        queries: AtomicUsize::new(0),
    });
    let models = [flaky.clone() as Arc<dyn VqaModel>];
    let out = harness::run_with_models(&cfg, &models, Execution::Parallel).unwrap();
    assert_eq!(out.stats.unanswered, 4 * 3);
    for c in &out.report.cells {
        assert_eq!((c.counts.graded, c.counts.unanswered), (6, 3));
        assert_eq!(c.accuracy, Some(1.0));
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.dir.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["unanswered"].as_array().unwrap().len(), 12);
    assert!(meta["unanswered"][0]["reason"].as_str().unwrap().contains("503"));

    let before = flaky.queries.load(Ordering::SeqCst);
    let out = harness::run_with_models(&cfg, &models, Execution::Parallel).unwrap();
    assert_eq!(flaky.queries.load(Ordering::SeqCst) - before, 12);
    assert_eq!(out.stats.unanswered, 0);
    assert!(out.report.cells.iter().all(|c| c.counts.unanswered == 0));
}

struct Rejected;

impl VqaModel for Rejected {
    fn model_name(&self) -> &str {
        "mock"
    }

    fn query(&self, _: &VqaItem, _: &DocumentImage, _: &str) -> Result<ModelReply, QueryError> {
        Err(QueryError::Auth("HTTP 401".into()))
    }
}

#[test]
fn auth_failure_stops_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&dir.path().join("corpus"), 4);
    let cfg = mock_config(&manifest, &dir.path().join("run"), "positions", MockBehavior::AlwaysCorrect);
    let err = harness::run_with_models(&cfg, &[Arc::new(Rejected) as Arc<dyn VqaModel>], Execution::Parallel).unwrap_err();
    assert!(matches!(err, HarnessError::Auth(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(!cfg.output_dir.join("report.json").exists());
}

#[test]
fn invalid_config_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mock_config(&dir.path().join("missing.jsonl"), &dir.path().join("run"), "positions", MockBehavior::AlwaysCorrect);
    let err = harness::run(&cfg, Execution::Parallel).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(!cfg.output_dir.exists());
}

#[test]
fn renders_are_reused_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&dir.path().join("corpus"), 3);
    let cfg = mock_config(&manifest, &dir.path().join("run"), "positions", MockBehavior::AlwaysCorrect);
    harness::run(&cfg, Execution::Parallel).unwrap();
    let png = cfg
        .output_dir
        .join("conditions")
        .join(mark_id(PositionMode::Center))
        .join("synthetic/images/item-01.png");
    let stamp = fs::metadata(&png).unwrap().modified().unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    harness::run(&cfg, Execution::Parallel).unwrap();
    assert_eq!(fs::metadata(&png).unwrap().modified().unwrap(), stamp);
}
