use crate::font::{self, BitmapFont, TextBitmap, MIN_SCALE};

use super::{PlacementBox, PositionMode, WatermarkContent, WatermarkError, WatermarkSpec};

/// Box centers for scattered placement, as fractions of (width, height).
pub const SCATTERED_ANCHORS: [(f64, f64); 5] = [
    (0.25, 0.25),
    (0.75, 0.25),
    (0.25, 0.75),
    (0.75, 0.75),
    (0.5, 0.5),
];

/// Inset of the top-left box and minimum clearance of every box, as a fraction of
/// the smaller image dimension.
pub const MARGIN_FRACTION: f64 = 0.02;

pub const MIN_IMAGE_DIM: u32 = 16;

/// Upper end of the scale bracket searched by the bisection.
pub const MAX_SCALE: f64 = 4096.0;

const SCALE_FLOOR: f64 = 1e-3;
const BISECTION_ITERS: usize = 40;
const AREA_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphScale {
    /// Pixels per font cell.
    pub scale: f64,
    /// Ink bounding-box area at `scale`, in px^2.
    pub rendered_area: f64,
    pub iterations: usize,
}

impl GlyphScale {
    pub fn relative_error(&self, target: f64) -> f64 {
        (self.rendered_area - target).abs() / target
    }
}

/// Bisects the glyph scale over a fixed bracket so that the result is monotone in
/// `target`.
fn bisect_scale(layout: &TextBitmap, target: f64, lo: f64) -> GlyphScale {
    let (mut lo, mut hi) = (lo, MAX_SCALE);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if layout.rendered_area(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = 0.5 * (lo + hi);
    GlyphScale {
        scale,
        rendered_area: layout.rendered_area(scale),
        iterations: BISECTION_ITERS,
    }
}

/// Finds the scale at which the content's rendered bounding box covers `target_area`.
///
/// Text and symbols are solved by bisection and must stay at or above the minimum
/// legible scale; a mask is a rectangle shaped like the default text and solves in
/// closed form.
pub fn solve_glyph_scale(
    content: &WatermarkContent,
    target_area: f64,
    font: &BitmapFont,
) -> Result<GlyphScale, WatermarkError> {
    let layout = font.layout(content.reference_text())?;
    if !content.is_glyph() {
        if !(target_area.is_finite() && target_area > 0.0) {
            return Err(WatermarkError::UnreachableTarget {
                target: target_area,
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        let scale = (target_area / (layout.cols() * layout.rows()) as f64).sqrt();
        return Ok(GlyphScale {
            scale,
            rendered_area: layout.rendered_area(scale),
            iterations: 0,
        });
    }
    let (min, max) = (
        layout.rendered_area(MIN_SCALE),
        layout.rendered_area(MAX_SCALE),
    );
    if !(min..=max).contains(&target_area) {
        return Err(WatermarkError::UnreachableTarget {
            target: target_area,
            min,
            max,
        });
    }
    let solved = bisect_scale(&layout, target_area, MIN_SCALE);
    if solved.relative_error(target_area) > AREA_TOLERANCE {
        return Err(WatermarkError::UnreachableTarget {
            target: target_area,
            min,
            max,
        });
    }
    Ok(solved)
}

/// Computes the watermark boxes for a `width x height` image.
///
/// Boxes are shaped by the content's reference text (the default text for masks, so
/// a mask sits exactly where the text watermark would). Each of the `n` boxes gets
/// `area_ratio * width * height / n` px^2. A box wider (or taller) than the space
/// available to its anchor is clamped on that axis and stretched on the other so its
/// area is preserved.
pub fn compute_placement(
    width: u32,
    height: u32,
    spec: &WatermarkSpec,
) -> Result<Vec<PlacementBox>, WatermarkError> {
    spec.validate()?;
    let too_small = |reason: String| WatermarkError::ImageTooSmall {
        width,
        height,
        reason,
    };
    if width < MIN_IMAGE_DIM || height < MIN_IMAGE_DIM {
        return Err(too_small(format!(
            "minimum size is {MIN_IMAGE_DIM}x{MIN_IMAGE_DIM}"
        )));
    }
    let (wf, hf) = (width as f64, height as f64);
    let layout = font::bundled().layout(spec.content.reference_text())?;
    let n = spec.position.box_count();
    let per_box = spec.area_ratio * wf * hf / n as f64;

    let margin = MARGIN_FRACTION * wf.min(hf);
    let (max_w, max_h) = match spec.position {
        PositionMode::Scattered => (wf / 2.0 - 2.0 * margin, hf / 2.0 - 2.0 * margin),
        PositionMode::Center | PositionMode::TopLeft => (wf - 2.0 * margin, hf - 2.0 * margin),
    };

    let scale = bisect_scale(&layout, per_box, SCALE_FLOOR).scale;
    let (mut w, mut h) = layout.rendered_size(scale);
    if w > max_w {
        w = max_w;
        h = per_box / w;
    } else if h > max_h {
        h = max_h;
        w = per_box / h;
    }
    if w > max_w * (1.0 + 1e-9) || h > max_h * (1.0 + 1e-9) {
        return Err(too_small(format!(
            "{per_box:.0} px^2 per box does not fit in {max_w:.1}x{max_h:.1}"
        )));
    }
    if spec.content.is_glyph() {
        let sx = w / layout.cols() as f64;
        let sy = h / layout.rows() as f64;
        if sx.min(sy) < MIN_SCALE {
            return Err(too_small(format!(
                "glyph scale {:.2} below minimum legible scale {MIN_SCALE} \
                 (needs at least {}x{} px per box)",
                sx.min(sy),
                layout.cols(),
                layout.rows()
            )));
        }
    }

    let boxed = |cx: f64, cy: f64| PlacementBox {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
        angle: spec.angle,
    };
    Ok(match spec.position {
        PositionMode::Center => vec![boxed(wf / 2.0, hf / 2.0)],
        PositionMode::TopLeft => vec![PlacementBox {
            x: margin,
            y: margin,
            w,
            h,
            angle: spec.angle,
        }],
        PositionMode::Scattered => SCATTERED_ANCHORS
            .iter()
            .map(|(ax, ay)| boxed(ax * wf, ay * hf))
            .collect(),
    })
}
