use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, AttentionDelta, HeadAggregation};
use crate::corpus::DocumentImage;

pub const COLORMAP: &str = "viridis";

/// Target edge length of a heatmap image, in pixels.
const HEATMAP_EDGE: usize = 256;
const MIN_ROW_PX: usize = 16;
const SCATTER_EDGE: u32 = 512;
const SCATTER_MARGIN: f64 = 24.0;
const MARKER_RADIUS: i64 = 3;

/// Sidecar describing how a heatmap was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub colormap: String,
    /// Value mapped to the bottom of the colormap.
    pub min: f64,
    /// Value mapped to the top of the colormap.
    pub max: f64,
    pub rows: usize,
    pub cols: usize,
    pub cell_width_px: usize,
    pub cell_height_px: usize,
    pub on_patch_grid: bool,
    pub layer_index: i64,
    pub head_aggregation: HeadAggregation,
    pub model_name: String,
    pub item_id: String,
    pub clean_condition: String,
    pub marked_condition: String,
}

fn rgb(c: colorous::Color) -> [u8; 3] {
    [c.r, c.g, c.b]
}

/// Writes `out` (PNG), plus `out` with `.json` (colorbar scale) and `.csv` (raw
/// values, one grid row per line). Values are min-max normalized per image.
pub fn render_heatmap(delta: &AttentionDelta, out: &Path) -> Result<HeatmapMeta, AnalysisError> {
    if delta.values.is_empty() || delta.rows == 0 || delta.cols == 0 {
        return Err(AnalysisError::Empty("attention delta grid is empty".into()));
    }
    let min = delta.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = delta.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;

    let cell_w = (HEATMAP_EDGE / delta.rows.max(delta.cols)).max(1);
    let cell_h = if delta.rows == 1 { cell_w.max(MIN_ROW_PX) } else { cell_w };
    let (w, h) = (delta.cols * cell_w, delta.rows * cell_h);
    let mut img = DocumentImage::filled(w as u32, h as u32, [0; 3]);
    for r in 0..delta.rows {
        for c in 0..delta.cols {
            let t = if span > 0.0 { (delta.at(r, c) - min) / span } else { 0.0 };
            let color = rgb(colorous::VIRIDIS.eval_continuous(t));
            img.fill_rect(
                (c * cell_w) as u32,
                (r * cell_h) as u32,
                ((c + 1) * cell_w) as u32,
                ((r + 1) * cell_h) as u32,
                color,
            );
        }
    }
    img.save_png(out)
        .map_err(|e| AnalysisError::Image(e.to_string()))?;

    let meta = HeatmapMeta {
        colormap: COLORMAP.into(),
        min,
        max,
        rows: delta.rows,
        cols: delta.cols,
        cell_width_px: cell_w,
        cell_height_px: cell_h,
        on_patch_grid: delta.on_patch_grid,
        layer_index: delta.layer_index,
        head_aggregation: delta.head_aggregation,
        model_name: delta.model_name.clone(),
        item_id: delta.item_id.clone(),
        clean_condition: delta.clean_condition.clone(),
        marked_condition: delta.marked_condition.clone(),
    };
    let json_path = out.with_extension("json");
    fs::write(&json_path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
        .map_err(AnalysisError::io(&json_path))?;

    let csv_path = out.with_extension("csv");
    let mut text = String::new();
    for r in 0..delta.rows {
        let row: Vec<String> = (0..delta.cols).map(|c| format!("{:e}", delta.at(r, c))).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&csv_path, text).map_err(AnalysisError::io(&csv_path))?;
    Ok(meta)
}

/// Distinct labels in order of first appearance.
fn label_order(labels: &[String]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for l in labels {
        if !out.contains(&l.as_str()) {
            out.push(l);
        }
    }
    out
}

/// Scatter plot of 2-D points colored by label.
pub fn render_scatter(coords: &[[f64; 2]], labels: &[String], out: &Path) -> Result<(), AnalysisError> {
    if coords.is_empty() {
        return Err(AnalysisError::Empty("no points to plot".into()));
    }
    if coords.len() != labels.len() {
        return Err(AnalysisError::Dimension(coords.len(), labels.len()));
    }
    let order = label_order(labels);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for [x, y] in coords {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    let extent = (x1 - x0).max(y1 - y0).max(f64::MIN_POSITIVE);
    let usable = SCATTER_EDGE as f64 - 2.0 * SCATTER_MARGIN;
    let mut img = DocumentImage::filled(SCATTER_EDGE, SCATTER_EDGE, [255; 3]);
    for ([x, y], label) in coords.iter().zip(labels) {
        let idx = order.iter().position(|l| *l == label).unwrap();
        let color = rgb(colorous::CATEGORY10[idx % colorous::CATEGORY10.len()]);
        let px = (SCATTER_MARGIN + (x - x0) / extent * usable).round() as i64;
        // screen y grows downward
        let py = (SCATTER_MARGIN + (y1 - y) / extent * usable).round() as i64;
        let lo = |v: i64| (v - MARKER_RADIUS).max(0) as u32;
        let hi = |v: i64| (v + MARKER_RADIUS + 1).min(SCATTER_EDGE as i64) as u32;
        img.fill_rect(lo(px), lo(py), hi(px), hi(py), color);
    }
    img.save_png(out).map_err(|e| AnalysisError::Image(e.to_string()))
}

/// `id,label,x,y` rows for regenerating a scatter plot.
pub fn write_scatter_csv(
    coords: &[[f64; 2]],
    labels: &[String],
    ids: &[String],
    out: &Path,
) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(out).map_err(|e| AnalysisError::Image(e.to_string()))?;
    let io = |e: csv::Error| AnalysisError::Image(e.to_string());
    w.write_record(["id", "label", "x", "y"]).map_err(io)?;
    for ((c, l), id) in coords.iter().zip(labels).zip(ids) {
        w.write_record([id.clone(), l.clone(), format!("{:e}", c[0]), format!("{:e}", c[1])])
            .map_err(io)?;
    }
    w.flush().map_err(AnalysisError::io(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_image;
    use sha2::{Digest, Sha256};

    fn delta(rows: usize, cols: usize, values: Vec<f64>) -> AttentionDelta {
        AttentionDelta {
            rows,
            cols,
            values,
            on_patch_grid: true,
            layer_index: -1,
            head_aggregation: HeadAggregation::Mean,
            model_name: "m".into(),
            item_id: "i".into(),
            clean_condition: "clean".into(),
            marked_condition: "mark".into(),
        }
    }

    #[test]
    fn zero_delta_is_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let meta = render_heatmap(&delta(4, 4, vec![0.0; 16]), &p).unwrap();
        assert_eq!((meta.min, meta.max), (0.0, 0.0));
        let img = load_image(&p).unwrap();
        let first = img.pixel(0, 0);
        assert!(img.pixels().chunks(3).all(|px| px == first));
        assert!(dir.path().join("h.json").exists());
        assert_eq!(std::fs::read_to_string(dir.path().join("h.csv")).unwrap().lines().count(), 4);
    }

    #[test]
    fn single_hot_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let mut v = vec![0.1; 16];
        v[6] = 0.9;
        let meta = render_heatmap(&delta(4, 4, v), &p).unwrap();
        let img = load_image(&p).unwrap();
        let top = rgb(colorous::VIRIDIS.eval_continuous(1.0));
        let hot: Vec<(u32, u32)> = (0..img.height())
            .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| img.pixel(x, y) == top)
            .collect();
        let cw = meta.cell_width_px as u32;
        assert_eq!(hot.len() as u32, cw * cw);
        assert!(hot.iter().all(|&(x, y)| x / cw == 2 && y / cw == 1));
    }

    #[test]
    fn golden_heatmap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let v: Vec<f64> = (0..24).map(|i| ((i * 7) % 24) as f64 / 23.0).collect();
        render_heatmap(&delta(4, 6, v), &p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width(), img.height()), (252, 168));
        let digest = hex::encode(Sha256::digest(img.pixels()));
        assert_eq!(digest, GOLDEN_HEATMAP_SHA256);
    }

    const GOLDEN_HEATMAP_SHA256: &str =
        "51a435e0bb892ac0894cdec5247745f57f9af6d69cd7af49eb65531633b6b537";

    #[test]
    fn scatter_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let coords = [[0.0, 0.0], [1.0, 1.0], [0.5, -2.0]];
        let labels: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let ids: Vec<String> = ["1", "2", "3"].iter().map(|s| s.to_string()).collect();
        render_scatter(&coords, &labels, &dir.path().join("s.png")).unwrap();
        write_scatter_csv(&coords, &labels, &ids, &dir.path().join("s.csv")).unwrap();
        let img = load_image(dir.path().join("s.png")).unwrap();
        let blue = rgb(colorous::CATEGORY10[0]);
        let orange = rgb(colorous::CATEGORY10[1]);
        assert!(img.pixels().chunks(3).any(|p| p == blue));
        assert!(img.pixels().chunks(3).any(|p| p == orange));
        assert!(render_scatter(&coords, &labels[..2], &dir.path().join("x.png")).is_err());
    }
}
