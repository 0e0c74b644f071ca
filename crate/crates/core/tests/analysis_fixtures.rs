mod common;

use std::collections::BTreeMap;

use common::fixtures;
use docmark::analysis::{
    analyze_dir, attention_delta, cosine_similarity, joint_probabilities, percentile, AnalyzeOptions,
    EmbeddingSummary, HeadAggregation,
};
use docmark::tdump::{self, DumpKind, TensorDump};
use docmark::Execution;
use serde_json::Value;

fn expected() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("expected.json")).unwrap()).unwrap()
}

fn dump(item: &str, cond: &str, kind: &str) -> TensorDump {
    TensorDump::read(fixtures().join(format!("dumps/{item}__{cond}__{kind}__L11.tdump"))).unwrap()
}

fn grid(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .flat_map(|row| row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()))
        .collect()
}

#[test]
fn fixture_dumps_are_readable_and_normalized() {
    let all = tdump::read_dir(fixtures().join("dumps")).unwrap();
    assert_eq!(all.len(), 21);
    for (path, d) in &all {
        let name = path.file_name().unwrap().to_str().unwrap();
        assert_eq!(tdump::dump_file_name(&d.meta), name);
        if d.kind() == DumpKind::Attention {
            d.check_softmax(1e-4).unwrap();
        }
        // byte-exact round trip
        assert_eq!(d.to_bytes().unwrap(), std::fs::read(path).unwrap());
    }
}

#[test]
fn attention_deltas_match_numpy() {
    let exp = expected();
    let clean = dump("doc01", "clean", "attention");
    for cond in ["mark-center", "mark-scattered"] {
        let marked = dump("doc01", cond, "attention");
        for (agg, key) in [(HeadAggregation::Mean, "mean"), (HeadAggregation::Max, "max")] {
            let d = attention_delta(&clean, &marked, agg).unwrap();
            assert!(d.on_patch_grid);
            assert_eq!((d.rows, d.cols), (8, 8));
            let want = grid(&exp["attention"]["deltas"][cond][key]);
            for (got, want) in d.values.iter().zip(&want) {
                assert!((got - want).abs() < 1e-9, "{cond}/{key}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn scattered_changes_more_positions_than_center() {
    let clean = dump("doc01", "clean", "attention");
    let center = attention_delta(&clean, &dump("doc01", "mark-center", "attention"), HeadAggregation::Mean).unwrap();
    let scattered =
        attention_delta(&clean, &dump("doc01", "mark-scattered", "attention"), HeadAggregation::Mean).unwrap();
    let pooled: Vec<f64> = center.values.iter().chain(&scattered.values).copied().collect();
    let t = percentile(&pooled, 90.0);
    let (c, s) = (center.count_above(t), scattered.count_above(t));
    assert!(s > c, "scattered {s} vs center {c} above {t}");
    assert_eq!((c, s), (4, 9));

    // the hottest cells are exactly the perturbed ones
    let exp = expected();
    for (delta, cells) in [(&center, "center_cells"), (&scattered, "scattered_cells")] {
        let hot: Vec<(usize, usize)> = exp["attention"][cells]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| (c[0].as_u64().unwrap() as usize, c[1].as_u64().unwrap() as usize))
            .collect();
        let coldest_hot = hot.iter().map(|&(r, c)| delta.at(r, c)).fold(f64::INFINITY, f64::min);
        for r in 0..delta.rows {
            for c in 0..delta.cols {
                if !hot.contains(&(r, c)) {
                    assert!(delta.at(r, c) < coldest_hot);
                }
            }
        }
    }
}

#[test]
fn embedding_summaries_and_cosines_match_numpy() {
    let exp = expected();
    for (key, want) in exp["embedding"]["summaries"].as_object().unwrap() {
        let (item, cond) = key.split_once('/').unwrap();
        let s = EmbeddingSummary::from_dump(&dump(item, cond, "embedding")).unwrap();
        assert_eq!(s.pooled_positions, 10);
        for (g, w) in s.vector.iter().zip(want.as_array().unwrap()) {
            assert!((g - w.as_f64().unwrap()).abs() < 1e-12);
        }
    }
    for (key, want) in exp["embedding"]["cosine"].as_object().unwrap() {
        let (item, cond) = key.split_once('/').unwrap();
        let a = EmbeddingSummary::from_dump(&dump(item, "clean", "embedding")).unwrap();
        let b = EmbeddingSummary::from_dump(&dump(item, cond, "embedding")).unwrap();
        let got = cosine_similarity(&a, &b).unwrap();
        assert!((got - want.as_f64().unwrap()).abs() < 1e-12, "{key}: {got} vs {want}");
    }
}

#[test]
fn affinities_match_scikit_learn() {
    let exp = &expected()["affinities"];
    let points: Vec<Vec<f64>> = exp["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect();
    let n = points.len();
    let p = joint_probabilities(&points, exp["perplexity"].as_f64().unwrap()).unwrap();
    let want = grid(&exp["p"]);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                worst = worst.max((p[i * n + j] - want[i * n + j]).abs());
            }
        }
    }
    // the reference calibrates in float32 to an entropy tolerance of 1e-5
    assert!(worst < 1e-5, "max |dP| = {worst}");
}

#[test]
fn analyze_dir_writes_every_artifact() {
    let out = tempfile::tempdir().unwrap();
    let summary = analyze_dir(&fixtures().join("dumps"), out.path(), &AnalyzeOptions::default(), Execution::Parallel).unwrap();
    assert_eq!(summary.dumps_read, 21);
    assert_eq!(summary.attention.len(), 2);
    assert_eq!(summary.cosine.len(), 15);
    let t = summary.tsne.clone().expect("t-SNE ran");
    assert_eq!(t.points, 18);
    assert!(t.kl_final <= t.kl_after_exaggeration);
    for f in ["attention.csv", "cosine.csv", "tsne.csv", "tsne.png", "analysis.json"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    for row in &summary.attention {
        let png = out.path().join(&row.heatmap);
        assert!(png.is_file());
        assert!(png.with_extension("json").is_file());
        assert!(png.with_extension("csv").is_file());
    }

    // content ordering built into the fixture: marks drift most, masks least
    let mut by_cond: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &summary.cosine {
        by_cond.entry(r.condition.as_str()).or_default().push(r.cosine);
    }
    let mean = |c: &str| by_cond[c].iter().sum::<f64>() / by_cond[c].len() as f64;
    assert!(mean("mark-center") < mean("symbol-center"));
    assert!(mean("symbol-center") < mean("mask-center"));

    let again = tempfile::tempdir().unwrap();
    let seq = analyze_dir(&fixtures().join("dumps"), again.path(), &AnalyzeOptions::default(), Execution::Sequential).unwrap();
    assert_eq!(seq, summary);
}

#[test]
fn analyze_dir_rejects_unpaired_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert!(analyze_dir(dir.path(), out.path(), &AnalyzeOptions::default(), Execution::Parallel).is_err());
    std::fs::copy(
        fixtures().join("dumps/doc01__mark-center__attention__L11.tdump"),
        dir.path().join("doc01__mark-center__attention__L11.tdump"),
    )
    .unwrap();
    assert!(analyze_dir(dir.path(), out.path(), &AnalyzeOptions::default(), Execution::Parallel).is_err());
    std::fs::write(dir.path().join("bad__clean__attention__L11.tdump"), b"short").unwrap();
    let err = analyze_dir(dir.path(), out.path(), &AnalyzeOptions::default(), Execution::Parallel).unwrap_err();
    assert!(err.to_string().contains("bad__clean"), "{err}");
}
