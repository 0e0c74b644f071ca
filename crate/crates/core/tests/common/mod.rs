#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use docmark::client::{MockBehavior, Region};
use docmark::corpus::{Category, DocumentImage, EvalDataset, OptionLetter, VqaItem};
use docmark::harness::{DatasetConfig, EndpointConfig, ExperimentConfig, GridConfig};
use docmark::watermark::SCATTERED_ANCHORS;

pub const ITEMS: usize = 40;
pub const WIDTH: u32 = 200;
pub const HEIGHT: u32 = 160;
/// Half-size of a mock region and of the ink patch under it, as a fraction of W and H.
pub const REGION_HALF: f64 = 0.04;
pub const PATCH_GRAY: u8 = 128;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn anchor_regions() -> Vec<Region> {
    SCATTERED_ANCHORS
        .iter()
        .map(|&(x, y)| Region::around(x, y, REGION_HALF))
        .collect()
}

/// Bit `a` of the mask says whether item `k` has content under anchor `a`.
pub fn content_mask(k: usize) -> usize {
    k % 32
}

fn category(k: usize) -> Category {
    Category::ALL[k % 4]
}

fn answer(k: usize, cat: Category) -> BTreeSet<OptionLetter> {
    let first = OptionLetter::ALL[k % 4];
    let mut set = BTreeSet::from([first]);
    if cat.is_multiple_response() {
        set.insert(OptionLetter::ALL[(k + 2) % 4]);
    }
    set
}

/// White pages with gray patches under the anchors selected by [`content_mask`];
/// items are numbered 1..=n.
pub fn write_corpus(dir: &Path, n: usize) -> PathBuf {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut items = Vec::new();
    for k in 1..=n {
        let mut img = DocumentImage::filled(WIDTH, HEIGHT, [255; 3]);
        let mask = content_mask(k);
        for (a, &(ax, ay)) in SCATTERED_ANCHORS.iter().enumerate() {
            if mask & (1 << a) == 0 {
                continue;
            }
            let px = |f: f64, n: u32| (f * n as f64).round() as u32;
            img.fill_rect(
                px(ax - REGION_HALF, WIDTH),
                px(ay - REGION_HALF, HEIGHT),
                px(ax + REGION_HALF, WIDTH),
                px(ay + REGION_HALF, HEIGHT),
                [PATCH_GRAY; 3],
            );
        }
        let rel = format!("images/item-{k:02}.png");
        img.save_png(dir.join(&rel)).unwrap();
        let cat = category(k);
        items.push(VqaItem {
            id: format!("item-{k:02}"),
            image_path: rel,
            category: cat,
            question: format!("What does region {k} of the page show?"),
            options: OptionLetter::ALL
                .into_iter()
                .map(|l| (l, format!("choice {l} for {k}")))
                .collect::<BTreeMap<_, _>>(),
            answer: answer(k, cat),
        });
    }
    let manifest = dir.join("synthetic.jsonl");
    EvalDataset {
        name: "synthetic".into(),
        root: dir.to_path_buf(),
        items,
    }
    .write_manifest(&manifest)
    .unwrap();
    manifest
}

pub fn flip_behavior() -> MockBehavior {
    MockBehavior::FlipIfDarkened {
        regions: anchor_regions(),
        threshold: 4.0,
        content_only: true,
    }
}

pub fn mock_config(manifest: &Path, out: &Path, preset: &str, behavior: MockBehavior) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: out.to_path_buf(),
        seed: 7,
        sample: None,
        max_in_flight: 4,
        datasets: vec![DatasetConfig {
            manifest: manifest.to_path_buf(),
            name: None,
            root: None,
        }],
        endpoints: vec![EndpointConfig::Mock {
            model_name: "mock".into(),
            behavior,
        }],
        grid: GridConfig {
            preset: Some(preset.into()),
            conditions: vec![],
        },
        defense: Default::default(),
    }
}
