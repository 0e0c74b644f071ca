use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{ModelReply, QueryError, VqaModel};
use crate::corpus::{format_letters, DocumentImage, EvalDataset, OptionLetter, VqaItem};

/// Axis-aligned rectangle in fractions of image width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub fn around(cx: f64, cy: f64, half: f64) -> Self {
        Region {
            x0: cx - half,
            y0: cy - half,
            x1: cx + half,
            y1: cy + half,
        }
    }

    fn pixel_range(lo: f64, hi: f64, n: u32) -> (u32, u32) {
        let a = (lo.clamp(0.0, 1.0) * n as f64).floor() as u32;
        let b = (hi.clamp(0.0, 1.0) * n as f64).ceil() as u32;
        (a.min(n), b.min(n))
    }

    /// Mean Rec.601 luma over the pixels the region touches. Empty regions read as 255.
    pub fn luminance(&self, image: &DocumentImage) -> f64 {
        let (xa, xb) = Self::pixel_range(self.x0, self.x1, image.width());
        let (ya, yb) = Self::pixel_range(self.y0, self.y1, image.height());
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in ya..yb {
            for x in xa..xb {
                let [r, g, b] = image.pixel(x, y);
                sum += 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                n += 1;
            }
        }
        if n == 0 {
            255.0
        } else {
            sum / n as f64
        }
    }
}

/// Luma below which a region is considered to hold content.
pub const CONTENT_LUMA: f64 = 250.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MockBehavior {
    AlwaysCorrect,
    AlwaysWrong,
    /// Correct unless some region's mean luma moved more than `threshold` levels away
    /// from the clean image. With `content_only`, regions that are blank in the clean
    /// image (luma at or above [`CONTENT_LUMA`]) are ignored.
    FlipIfDarkened {
        regions: Vec<Region>,
        threshold: f64,
        #[serde(default)]
        content_only: bool,
    },
}

/// A letter set that differs from the gold answer.
pub fn wrong_answer(item: &VqaItem) -> String {
    let letter = OptionLetter::ALL
        .into_iter()
        .find(|l| !item.answer.contains(l))
        .unwrap_or(OptionLetter::A);
    letter.to_string()
}

/// Reply text of the mock for one item. `baseline` holds the clean-image luma of each
/// region; without it the current image is its own baseline.
pub fn mock_oracle(
    behavior: &MockBehavior,
    item: &VqaItem,
    image: &DocumentImage,
    baseline: Option<&[f64]>,
) -> String {
    let correct = format_letters(&item.answer);
    match behavior {
        MockBehavior::AlwaysCorrect => correct,
        MockBehavior::AlwaysWrong => wrong_answer(item),
        MockBehavior::FlipIfDarkened {
            regions,
            threshold,
            content_only,
        } => {
            let Some(base) = baseline else {
                return correct;
            };
            let flipped = regions.iter().zip(base).any(|(r, &b)| {
                (!content_only || b < CONTENT_LUMA) && (b - r.luminance(image)).abs() > *threshold
            });
            if flipped {
                wrong_answer(item)
            } else {
                correct
            }
        }
    }
}

/// Deterministic offline model.
#[derive(Debug)]
pub struct MockModel {
    name: String,
    behavior: MockBehavior,
    baselines: HashMap<String, Vec<f64>>,
    queries: AtomicUsize,
    abort_after: Option<usize>,
}

impl MockModel {
    pub fn new(name: impl Into<String>, behavior: MockBehavior) -> Self {
        MockModel {
            name: name.into(),
            behavior,
            baselines: HashMap::new(),
            queries: AtomicUsize::new(0),
            abort_after: None,
        }
    }

    /// Records clean-image region luma for every item, keyed by item id.
    pub fn with_baselines<'a>(
        mut self,
        datasets: impl IntoIterator<Item = &'a EvalDataset>,
    ) -> Result<Self, crate::corpus::CorpusError> {
        let MockBehavior::FlipIfDarkened { regions, .. } = &self.behavior else {
            return Ok(self);
        };
        let regions = regions.clone();
        for ds in datasets {
            for item in &ds.items {
                let img = ds.load_image(item)?;
                let lum = regions.iter().map(|r| r.luminance(&img)).collect();
                if self.baselines.insert(item.id.clone(), lum).is_some() {
                    log::warn!("mock baseline for item {} defined twice; last one wins", item.id);
                }
            }
        }
        Ok(self)
    }

    /// After `n` successful queries every further query fails with
    /// [`QueryError::Aborted`], simulating an interrupted run.
    pub fn abort_after(mut self, n: usize) -> Self {
        self.abort_after = Some(n);
        self
    }

    /// Number of queries answered so far.
    pub fn query_count(&self) -> usize {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn behavior(&self) -> &MockBehavior {
        &self.behavior
    }
}

impl VqaModel for MockModel {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn query(
        &self,
        item: &VqaItem,
        image: &DocumentImage,
        condition_id: &str,
    ) -> Result<ModelReply, QueryError> {
        let n = self.queries.fetch_add(1, Ordering::SeqCst);
        if self.abort_after.is_some_and(|limit| n >= limit) {
            self.queries.fetch_sub(1, Ordering::SeqCst);
            return Err(QueryError::Aborted(format!("mock query budget of {n} exhausted")));
        }
        let baseline = self.baselines.get(&item.id).map(Vec::as_slice);
        Ok(ModelReply {
            item_id: item.id.clone(),
            condition_id: condition_id.to_string(),
            raw_text: mock_oracle(&self.behavior, item, image, baseline),
            latency_secs: 0.0,
            attempt_count: 1,
        })
    }
}
