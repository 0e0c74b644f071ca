use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DocumentImage, EvalDataset};
use crate::font;
use crate::par::Execution;

use super::placement::{MARGIN_FRACTION, SCATTERED_ANCHORS};
use super::raster::{composite_with, SUBSAMPLES};
use super::{WatermarkError, WatermarkSpec};

pub const ENGINE_VERSION: &str = concat!("docmark-watermark/", env!("CARGO_PKG_VERSION"));
pub const CLEAN_CONDITION_ID: &str = "clean";

/// One evaluation condition: an optional watermark followed by an optional JPEG
/// re-encode defense. The clean condition has neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub id: String,
    pub spec: Option<WatermarkSpec>,
    pub jpeg_quality: Option<u8>,
}

impl Condition {
    pub fn clean() -> Self {
        Condition {
            id: CLEAN_CONDITION_ID.to_string(),
            spec: None,
            jpeg_quality: None,
        }
    }

    pub fn watermark(spec: WatermarkSpec) -> Self {
        Condition {
            id: spec.slug(),
            spec: Some(spec),
            jpeg_quality: None,
        }
    }

    pub fn with_defense(mut self, quality: u8) -> Self {
        self.id = format!("{}+jpeg{quality}", self.id);
        self.jpeg_quality = Some(quality);
        self
    }

    /// The undefended clean baseline.
    pub fn is_clean(&self) -> bool {
        self.spec.is_none() && self.jpeg_quality.is_none()
    }

    pub fn apply(&self, image: &DocumentImage, exec: Execution) -> Result<DocumentImage, WatermarkError> {
        let marked = match &self.spec {
            Some(spec) => composite_with(image, spec, exec)?,
            None => image.clone(),
        };
        match self.jpeg_quality {
            Some(q) => jpeg_defense(&marked, q),
            None => Ok(marked),
        }
    }

    pub fn descriptor(&self) -> ConditionDescriptor {
        let f = font::bundled();
        ConditionDescriptor {
            id: self.id.clone(),
            spec: self.spec.clone(),
            jpeg_quality: self.jpeg_quality,
            engine_version: ENGINE_VERSION.to_string(),
            font: FontInfo {
                name: f.name().to_string(),
                sha256: f.checksum(),
            },
            scattered_anchors: SCATTERED_ANCHORS.iter().map(|(x, y)| [*x, *y]).collect(),
            margin_fraction: MARGIN_FRACTION,
            subsamples: SUBSAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FontInfo {
    pub name: String,
    pub sha256: String,
}

/// Self-describing record of a condition, written as `condition.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDescriptor {
    pub id: String,
    pub spec: Option<WatermarkSpec>,
    pub jpeg_quality: Option<u8>,
    pub engine_version: String,
    pub font: FontInfo,
    pub scattered_anchors: Vec<[f64; 2]>,
    pub margin_fraction: f64,
    pub subsamples: u32,
}

impl ConditionDescriptor {
    pub fn condition(&self) -> Condition {
        Condition {
            id: self.id.clone(),
            spec: self.spec.clone(),
            jpeg_quality: self.jpeg_quality,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }
}

/// Per-item failures collected while rendering a condition.
#[derive(Debug, thiserror::Error)]
#[error("{} item(s) failed to render: {}", failures.len(), summarize(failures))]
pub struct RenderError {
    pub failures: Vec<(String, WatermarkError)>,
}

fn summarize(failures: &[(String, WatermarkError)]) -> String {
    failures
        .iter()
        .take(5)
        .map(|(id, e)| format!("{id}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// File stem for an item id: safe ids are used verbatim, others are sanitized and
/// disambiguated with a hash prefix.
pub fn file_stem(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if safe == id && !id.starts_with('.') {
        safe
    } else {
        let digest = Sha256::digest(id.as_bytes());
        format!("{}-{}", safe.trim_start_matches('.'), &hex::encode(digest)[..8])
    }
}

/// Applies `condition` to every item image and writes the result under `out_dir`:
/// `images/<item>.png`, `manifest.jsonl` and `condition.json`.
///
/// The returned dataset equals the input except that image paths point at the new
/// files (and the root is `out_dir`). Items are processed in parallel; output order
/// follows input order.
pub fn render_condition(
    dataset: &EvalDataset,
    condition: &Condition,
    out_dir: &Path,
    exec: Execution,
) -> Result<EvalDataset, RenderError> {
    let wrap = |e: WatermarkError| RenderError {
        failures: vec![(String::new(), e)],
    };
    fs::create_dir_all(out_dir.join("images")).map_err(|e| wrap(e.into()))?;

    let results = exec.map(&dataset.items, |item| {
        let rel = format!("images/{}.png", file_stem(&item.id));
        let out = dataset
            .load_image(item)
            .map_err(WatermarkError::from)
            .and_then(|img| condition.apply(&img, Execution::Sequential))
            .and_then(|img| img.save_png(out_dir.join(&rel)).map_err(WatermarkError::from));
        out.map(|_| {
            let mut it = item.clone();
            it.image_path = rel;
            it
        })
    });

    let mut items = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (item, r) in dataset.items.iter().zip(results) {
        match r {
            Ok(it) => items.push(it),
            Err(e) => failures.push((item.id.clone(), e)),
        }
    }
    if !failures.is_empty() {
        return Err(RenderError { failures });
    }
    let rendered = EvalDataset {
        name: dataset.name.clone(),
        root: out_dir.to_path_buf(),
        items,
    };
    rendered
        .write_manifest(out_dir.join("manifest.jsonl"))
        .map_err(|e| wrap(e.into()))?;
    fs::write(out_dir.join("condition.json"), condition.descriptor().to_json())
        .map_err(|e| wrap(e.into()))?;
    Ok(rendered)
}

/// Encodes an image as baseline JPEG at `quality`.
pub fn encode_jpeg(image: &DocumentImage, quality: u8) -> Result<Vec<u8>, WatermarkError> {
    use image::codecs::jpeg::JpegEncoder;
    use image::ImageEncoder;
    if !(1..=100).contains(&quality) {
        return Err(WatermarkError::JpegQuality(quality));
    }
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality)
        .write_image(
            image.pixels(),
            image.width(),
            image.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| WatermarkError::Jpeg(e.to_string()))?;
    Ok(out)
}

/// JPEG re-encode and decode, the compression preprocessing defense.
pub fn jpeg_defense(image: &DocumentImage, quality: u8) -> Result<DocumentImage, WatermarkError> {
    let bytes = encode_jpeg(image, quality)?;
    DocumentImage::decode(&bytes).map_err(|e| WatermarkError::Jpeg(e.to_string()))
}
