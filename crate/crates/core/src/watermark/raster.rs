use crate::corpus::DocumentImage;
use crate::font::{self, TextBitmap};
use crate::par::Execution;

use super::placement::compute_placement;
use super::{PlacementBox, WatermarkError, WatermarkSpec};

/// Supersamples per pixel axis; coverage is quantized to `1 / SUBSAMPLES^2`.
pub const SUBSAMPLES: u32 = 4;
const SAMPLES_PER_PIXEL: u32 = SUBSAMPLES * SUBSAMPLES;

/// Per-pixel watermark coverage, stored as the number of covered subsamples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    width: u32,
    height: u32,
    hits: Vec<u8>,
}

impl Coverage {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Coverage in `[0, 1]`.
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.hits[y as usize * self.width as usize + x as usize] as f64 / SAMPLES_PER_PIXEL as f64
    }

    pub fn hits(&self) -> &[u8] {
        &self.hits
    }

    /// Number of pixels whose coverage exceeds `threshold`.
    pub fn count_above(&self, threshold: f64) -> usize {
        self.hits
            .iter()
            .filter(|h| **h as f64 / SAMPLES_PER_PIXEL as f64 > threshold)
            .count()
    }

    /// Half-open pixel bounds `(x0, y0, x1, y1)` of all pixels with nonzero coverage.
    pub fn nonzero_bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for (i, h) in self.hits.iter().enumerate() {
            if *h == 0 {
                continue;
            }
            let (x, y) = ((i % self.width as usize) as u32, (i / self.width as usize) as u32);
            b = Some(match b {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        b
    }
}

/// One placement box prepared for point-in-shape tests.
struct Shape<'a> {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    cos: f64,
    sin: f64,
    glyph: Option<(&'a TextBitmap, f64, f64)>,
    // Pixel rows/cols touched by the rotated box, clipped to the image.
    px0: u32,
    py0: u32,
    px1: u32,
    py1: u32,
}

impl<'a> Shape<'a> {
    fn new(b: &PlacementBox, glyph: Option<&'a TextBitmap>, width: u32, height: u32) -> Self {
        let (cx, cy) = b.center();
        let (sin, cos) = b.angle.to_radians().sin_cos();
        let (x0, y0, x1, y1) = b.bounds();
        let clip = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
        Shape {
            cx,
            cy,
            w: b.w,
            h: b.h,
            cos,
            sin,
            glyph: glyph.map(|g| (g, b.w / g.cols() as f64, b.h / g.rows() as f64)),
            px0: clip(x0.floor(), width),
            py0: clip(y0.floor(), height),
            px1: clip(x1.ceil(), width),
            py1: clip(y1.ceil(), height),
        }
    }

    /// Point test in image coordinates. Rotation is counterclockwise on screen, so
    /// the inverse map uses the y-down form of the rotation matrix.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos - dy * self.sin + self.w / 2.0;
        let v = dx * self.sin + dy * self.cos + self.h / 2.0;
        if !(u >= 0.0 && u < self.w && v >= 0.0 && v < self.h) {
            return false;
        }
        match self.glyph {
            None => true,
            Some((g, sx, sy)) => g.ink((u / sx) as usize, (v / sy) as usize),
        }
    }
}

/// Rasterizes the watermark content for an image size into a coverage map.
///
/// Overlapping boxes form a single layer: a subsample counts once no matter how many
/// boxes cover it.
pub fn coverage(
    width: u32,
    height: u32,
    spec: &WatermarkSpec,
    exec: Execution,
) -> Result<Coverage, WatermarkError> {
    let boxes = compute_placement(width, height, spec)?;
    let layout = if spec.content.is_glyph() {
        Some(font::bundled().layout(spec.content.reference_text())?)
    } else {
        None
    };
    let shapes: Vec<Shape> = boxes
        .iter()
        .map(|b| Shape::new(b, layout.as_ref(), width, height))
        .collect();

    let mut hits = vec![0u8; width as usize * height as usize];
    let step = 1.0 / SUBSAMPLES as f64;
    exec.for_each_row(&mut hits, width as usize, |y, row| {
        let y = y as u32;
        let active: Vec<&Shape> = shapes
            .iter()
            .filter(|s| s.py0 <= y && y < s.py1)
            .collect();
        let Some(x0) = active.iter().map(|s| s.px0).min() else {
            return;
        };
        let x1 = active.iter().map(|s| s.px1).max().unwrap_or(x0);
        for x in x0..x1 {
            let mut count = 0u8;
            for j in 0..SUBSAMPLES {
                let sy = y as f64 + (j as f64 + 0.5) * step;
                for i in 0..SUBSAMPLES {
                    let sx = x as f64 + (i as f64 + 0.5) * step;
                    if active.iter().any(|s| s.contains(sx, sy)) {
                        count += 1;
                    }
                }
            }
            row[x as usize] = count;
        }
    });
    Ok(Coverage {
        width,
        height,
        hits,
    })
}

/// Blends one channel: `round(a*color + (1 - a)*base)`, rounding halves up.
fn blend(base: u8, color: u8, a: f64) -> u8 {
    (a * color as f64 + (1.0 - a) * base as f64 + 0.5).floor() as u8
}

/// Alpha-blends the watermark described by `spec` into a copy of `image`.
pub fn composite(image: &DocumentImage, spec: &WatermarkSpec) -> Result<DocumentImage, WatermarkError> {
    composite_with(image, spec, Execution::default())
}

pub fn composite_with(
    image: &DocumentImage,
    spec: &WatermarkSpec,
    exec: Execution,
) -> Result<DocumentImage, WatermarkError> {
    let cov = coverage(image.width(), image.height(), spec, exec)?;
    let mut out = image.clone();
    let width = image.width() as usize;
    let alpha = spec.opacity;
    let color = spec.color;
    exec.for_each_row(out.pixels_mut(), 3 * width, |y, row| {
        let hits = &cov.hits[y * width..(y + 1) * width];
        for (x, h) in hits.iter().enumerate() {
            if *h == 0 {
                continue;
            }
            let a = alpha * (*h as f64 / SAMPLES_PER_PIXEL as f64);
            for c in 0..3 {
                let p = &mut row[3 * x + c];
                *p = blend(*p, color[c], a);
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::watermark::{PositionMode, WatermarkContent};
    use proptest::prelude::*;

    /// Deterministic noisy document-like image.
    fn noisy(width: u32, height: u32, seed: u32) -> DocumentImage {
        let mut px = Vec::with_capacity((3 * width * height) as usize);
        let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
        for _ in 0..3 * width * height {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            px.push((state >> 24) as u8);
        }
        DocumentImage::new(width, height, px).unwrap()
    }

    #[test]
    fn zero_opacity_is_identity() {
        let img = noisy(160, 120, 3);
        for content in [WatermarkContent::text(), WatermarkContent::symbol(), WatermarkContent::Mask] {
            let spec = WatermarkSpec::new(content, PositionMode::Scattered).with_opacity(0.0);
            assert_eq!(composite(&img, &spec).unwrap(), img);
        }
    }

    #[test]
    fn opaque_black_mask_blacks_out_interior() {
        let img = noisy(200, 160, 9);
        let spec = WatermarkSpec::new(WatermarkContent::Mask, PositionMode::Center).with_opacity(1.0);
        let out = composite(&img, &spec).unwrap();
        let b = compute_placement(200, 160, &spec).unwrap()[0];
        for y in (b.y.ceil() as u32)..(b.y + b.h).floor() as u32 {
            for x in (b.x.ceil() as u32)..(b.x + b.w).floor() as u32 {
                assert_eq!(out.pixel(x, y), [0, 0, 0]);
            }
        }
    }

    #[test]
    fn half_black_mask_on_white_is_128() {
        // Oracle: round(0.5 * 0 + 0.5 * 255) = round(127.5) = 128 with halves rounded up.
        let expected = (0.5f64 * 0.0 + 0.5 * 255.0 + 0.5).floor() as u8;
        assert_eq!(expected, 128);
        let img = DocumentImage::filled(100, 100, [255; 3]);
        let spec = WatermarkSpec::new(WatermarkContent::Mask, PositionMode::Center).with_area_ratio(0.3);
        let out = composite(&img, &spec).unwrap();
        assert_eq!(out.pixel(50, 50), [expected; 3]);
    }

    #[test]
    fn zero_rotation_equals_unrotated_render() {
        // An angle of exactly zero goes through the same rotation code path with
        // cos = 1 and sin = 0; a fresh unrotated spec must match bit for bit.
        let img = noisy(300, 200, 1);
        let spec = WatermarkSpec::new(WatermarkContent::text(), PositionMode::Scattered);
        let a = composite(&img, &spec).unwrap();
        let b = composite(&img, &spec.clone().with_angle(0.0)).unwrap();
        assert_eq!(a, b);
        let rotated = composite(&img, &spec.with_angle(45.0)).unwrap();
        assert_ne!(a, rotated);
    }

    #[test]
    fn rotation_by_90_swaps_bounds() {
        let spec = WatermarkSpec::new(WatermarkContent::Mask, PositionMode::Center).with_angle(90.0);
        let cov = coverage(400, 400, &spec, Execution::Sequential).unwrap();
        let (x0, y0, x1, y1) = cov.nonzero_bounds().unwrap();
        assert!(y1 - y0 > 3 * (x1 - x0), "{:?}", (x0, y0, x1, y1));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let img = noisy(257, 131, 5);
        let spec = WatermarkSpec::new(WatermarkContent::symbol(), PositionMode::Scattered).with_angle(30.0);
        assert_eq!(
            composite_with(&img, &spec, Execution::Sequential).unwrap(),
            composite_with(&img, &spec, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn text_has_holes_mask_does_not() {
        let spec = WatermarkSpec::new(WatermarkContent::text(), PositionMode::Center).with_area_ratio(0.2);
        let text = coverage(500, 400, &spec, Execution::default()).unwrap();
        let mask = coverage(500, 400, &WatermarkSpec { content: WatermarkContent::Mask, ..spec }, Execution::default()).unwrap();
        assert_eq!(text.nonzero_bounds(), mask.nonzero_bounds());
        assert!(text.count_above(0.5) < mask.count_above(0.5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pixels_outside_coverage_are_untouched(
            w in 16u32..80, h in 16u32..80, seed in any::<u32>(),
            rho in 0.1f64..0.8, alpha in 0.0f64..=1.0, angle in 0.0f64..360.0,
            pos in prop::sample::select(PositionMode::ALL.to_vec()),
            content in prop::sample::select(vec![WatermarkContent::text(), WatermarkContent::symbol(), WatermarkContent::Mask]),
        ) {
            let img = noisy(w, h, seed);
            let spec = WatermarkSpec { content, position: pos, color: [200, 10, 40], opacity: alpha, angle, area_ratio: rho };
            if let Ok(out) = composite(&img, &spec) {
                let cov = coverage(w, h, &spec, Execution::Sequential).unwrap();
                for y in 0..h {
                    for x in 0..w {
                        if cov.at(x, y) == 0.0 {
                            prop_assert_eq!(out.pixel(x, y), img.pixel(x, y));
                        }
                    }
                }
                prop_assert_eq!(&composite(&img, &spec).unwrap(), &out);
            }
        }
    }
}
