//! Visible watermark synthesis.
//!
//! A [`WatermarkSpec`] fixes one perturbation condition (content, position, color,
//! opacity, angle, area ratio). [`compute_placement`] turns it into placement boxes for
//! an image size, [`composite`] alpha-blends the rendered content into an image, and
//! [`render_condition`] produces a watermarked copy of a whole dataset.

mod placement;
mod raster;
mod render;

pub use placement::{
    compute_placement, solve_glyph_scale, GlyphScale, MARGIN_FRACTION, MAX_SCALE, MIN_IMAGE_DIM,
    SCATTERED_ANCHORS,
};
pub use raster::{composite, composite_with, coverage, Coverage, SUBSAMPLES};
pub use render::{
    encode_jpeg, file_stem, jpeg_defense, render_condition, Condition, ConditionDescriptor, FontInfo,
    RenderError, CLEAN_CONDITION_ID, ENGINE_VERSION,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::font::FontError;

pub const DEFAULT_TEXT: &str = "MARK";
pub const DEFAULT_SYMBOL: &str = "###";
pub const DEFAULT_OPACITY: f64 = 0.5;
pub const DEFAULT_AREA_RATIO: f64 = 0.10;
pub const MIN_AREA_RATIO: f64 = 0.10;
pub const MAX_AREA_RATIO: f64 = 0.80;

#[derive(Debug, thiserror::Error)]
pub enum WatermarkError {
    #[error("invalid watermark spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Font(#[from] FontError),
    #[error("{width}x{height} image cannot host the watermark: {reason}")]
    ImageTooSmall {
        width: u32,
        height: u32,
        reason: String,
    },
    #[error("target area {target:.1} px^2 outside renderable range [{min:.1}, {max:.1}]")]
    UnreachableTarget { target: f64, min: f64, max: f64 },
    #[error("jpeg quality {0} outside 1..=100")]
    JpegQuality(u8),
    #[error("jpeg codec failure: {0}")]
    Jpeg(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What is drawn inside each placement box.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum WatermarkContent {
    Text(String),
    Symbol(String),
    /// A filled rectangle laid out where the default text watermark would be.
    Mask,
}

impl Default for WatermarkContent {
    fn default() -> Self {
        WatermarkContent::Text(DEFAULT_TEXT.to_string())
    }
}

impl WatermarkContent {
    pub fn text() -> Self {
        WatermarkContent::Text(DEFAULT_TEXT.to_string())
    }

    pub fn symbol() -> Self {
        WatermarkContent::Symbol(DEFAULT_SYMBOL.to_string())
    }

    /// The string whose laid-out ink box shapes the placement boxes.
    pub fn reference_text(&self) -> &str {
        match self {
            WatermarkContent::Text(s) | WatermarkContent::Symbol(s) => s,
            WatermarkContent::Mask => DEFAULT_TEXT,
        }
    }

    pub fn is_glyph(&self) -> bool {
        !matches!(self, WatermarkContent::Mask)
    }

    /// Short label as used in report tables.
    pub fn label(&self) -> String {
        match self {
            WatermarkContent::Text(s) | WatermarkContent::Symbol(s) => s.clone(),
            WatermarkContent::Mask => "MASK".to_string(),
        }
    }

    fn slug(&self) -> String {
        match self {
            WatermarkContent::Text(s) => format!("text-{}", slug_str(s)),
            WatermarkContent::Symbol(s) => format!("symbol-{}", slug_str(s)),
            WatermarkContent::Mask => "mask".to_string(),
        }
    }
}

/// Alphanumeric strings pass through; anything else is hex-encoded.
fn slug_str(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric()) {
        s.to_string()
    } else {
        hex::encode(s.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    #[default]
    Center,
    TopLeft,
    /// Five equal boxes at the quadrant centers and the image center.
    Scattered,
}

impl PositionMode {
    pub const ALL: [PositionMode; 3] = [
        PositionMode::Center,
        PositionMode::Scattered,
        PositionMode::TopLeft,
    ];

    pub fn box_count(self) -> usize {
        match self {
            PositionMode::Scattered => 5,
            _ => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PositionMode::Center => "Center",
            PositionMode::TopLeft => "Top-left",
            PositionMode::Scattered => "Scattered",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            PositionMode::Center => "center",
            PositionMode::TopLeft => "top-left",
            PositionMode::Scattered => "scattered",
        }
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

fn default_opacity() -> f64 {
    DEFAULT_OPACITY
}

fn default_area_ratio() -> f64 {
    DEFAULT_AREA_RATIO
}

/// Full parameterization of one watermark condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSpec {
    #[serde(default)]
    pub content: WatermarkContent,
    #[serde(default)]
    pub position: PositionMode,
    #[serde(default)]
    pub color: [u8; 3],
    #[serde(default = "default_opacity")]
    pub opacity: f64,
    /// Degrees, counterclockwise.
    #[serde(default)]
    pub angle: f64,
    #[serde(default = "default_area_ratio")]
    pub area_ratio: f64,
}

impl Default for WatermarkSpec {
    fn default() -> Self {
        WatermarkSpec {
            content: WatermarkContent::default(),
            position: PositionMode::default(),
            color: [0, 0, 0],
            opacity: DEFAULT_OPACITY,
            angle: 0.0,
            area_ratio: DEFAULT_AREA_RATIO,
        }
    }
}

impl WatermarkSpec {
    pub fn new(content: WatermarkContent, position: PositionMode) -> Self {
        WatermarkSpec {
            content,
            position,
            ..Default::default()
        }
    }

    pub fn with_opacity(mut self, opacity: f64) -> Self {
        self.opacity = opacity;
        self
    }

    pub fn with_area_ratio(mut self, ratio: f64) -> Self {
        self.area_ratio = ratio;
        self
    }

    pub fn with_angle(mut self, degrees: f64) -> Self {
        self.angle = degrees;
        self
    }

    pub fn with_color(mut self, rgb: [u8; 3]) -> Self {
        self.color = rgb;
        self
    }

    pub fn validate(&self) -> Result<(), WatermarkError> {
        let bad = |msg: String| Err(WatermarkError::InvalidSpec(msg));
        if !(0.0..=1.0).contains(&self.opacity) {
            return bad(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if !(MIN_AREA_RATIO..=MAX_AREA_RATIO).contains(&self.area_ratio) {
            return bad(format!(
                "area ratio {} outside [{MIN_AREA_RATIO}, {MAX_AREA_RATIO}]",
                self.area_ratio
            ));
        }
        if !(0.0..360.0).contains(&self.angle) {
            return bad(format!("angle {} outside [0, 360)", self.angle));
        }
        if let WatermarkContent::Text(s) | WatermarkContent::Symbol(s) = &self.content {
            if s.is_empty() || !s.chars().all(|c| (' '..='~').contains(&c)) {
                return bad(format!("watermark text {s:?} must be nonempty printable ASCII"));
            }
        }
        Ok(())
    }

    /// Stable, filesystem-safe identifier for this condition.
    pub fn slug(&self) -> String {
        format!(
            "{}-{}-a{}-r{}-rot{}-{}",
            self.content.slug(),
            self.position.slug(),
            self.opacity,
            self.area_ratio,
            self.angle,
            hex::encode(self.color)
        )
    }
}

/// A rectangle (top-left corner and size, in pixels) rotated about its center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub angle: f64,
}

impl PlacementBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)` of the rotated box.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center();
        let (sin, cos) = self.angle.to_radians().sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let ex = (hw * cos).abs() + (hh * sin).abs();
        let ey = (hw * sin).abs() + (hh * cos).abs();
        (cx - ex, cy - ey, cx + ex, cy + ey)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_fixed_experiment_parameters() {
        let s = WatermarkSpec::default();
        assert_eq!(s.color, [0, 0, 0]);
        assert_eq!(s.opacity, 0.5);
        assert_eq!(s.angle, 0.0);
        assert_eq!(s.content, WatermarkContent::Text("MARK".into()));
        s.validate().unwrap();
    }

    #[test]
    fn validation_bounds() {
        let base = WatermarkSpec::default();
        assert!(base.clone().with_opacity(1.2).validate().is_err());
        assert!(base.clone().with_opacity(-0.1).validate().is_err());
        assert!(base.clone().with_area_ratio(0.05).validate().is_err());
        assert!(base.clone().with_area_ratio(0.81).validate().is_err());
        assert!(base.clone().with_area_ratio(0.8).validate().is_ok());
        assert!(base.clone().with_angle(360.0).validate().is_err());
        assert!(base.clone().with_angle(359.5).validate().is_ok());
        let empty = WatermarkSpec::new(WatermarkContent::Text(String::new()), PositionMode::Center);
        assert!(empty.validate().is_err());
        let tab = WatermarkSpec::new(WatermarkContent::Symbol("#\t#".into()), PositionMode::Center);
        assert!(tab.validate().is_err());
    }

    #[test]
    fn spec_serde_shape() {
        let s = WatermarkSpec::new(WatermarkContent::symbol(), PositionMode::TopLeft);
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["content"], serde_json::json!({"kind": "symbol", "value": "###"}));
        assert_eq!(v["position"], "top-left");
        let mask: WatermarkSpec =
            serde_json::from_str(r#"{"content":{"kind":"mask"},"position":"scattered"}"#).unwrap();
        assert_eq!(mask.content, WatermarkContent::Mask);
        assert_eq!(mask.opacity, DEFAULT_OPACITY);
    }

    #[test]
    fn slugs_are_distinct_and_safe() {
        let a = WatermarkSpec::new(WatermarkContent::symbol(), PositionMode::Center).slug();
        let b = WatermarkSpec::new(WatermarkContent::text(), PositionMode::Center).slug();
        let c = WatermarkSpec::new(WatermarkContent::Mask, PositionMode::Scattered).slug();
        assert_eq!(b, "text-MARK-center-a0.5-r0.1-rot0-000000");
        assert_eq!(a, "symbol-232323-center-a0.5-r0.1-rot0-000000");
        assert_eq!(c, "mask-scattered-a0.5-r0.1-rot0-000000");
    }
}
