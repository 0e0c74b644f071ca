use super::HarnessError;
use crate::watermark::{PositionMode, WatermarkContent, WatermarkSpec};

pub const PRESET_NAMES: [&str; 7] = [
    "positions",
    "contents",
    "opacity",
    "rotation",
    "colors",
    "area-ratio",
    "jpeg-defense",
];

pub const OPACITIES: [f64; 3] = [0.2, 0.5, 0.8];
pub const ANGLES: [f64; 3] = [0.0, 45.0, 90.0];
pub const COLORS: [(&str, [u8; 3]); 3] = [("black", [0, 0, 0]), ("red", [255, 0, 0]), ("green", [0, 255, 0])];
pub const AREA_RATIOS: [f64; 8] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
pub const DEFENSE_QUALITY: u8 = 30;

/// A named condition grid; the clean baseline is added by the harness.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub conditions: Vec<WatermarkSpec>,
    pub jpeg_quality: Option<u8>,
}

fn mark(position: PositionMode) -> WatermarkSpec {
    WatermarkSpec::new(WatermarkContent::text(), position)
}

fn contents() -> [WatermarkContent; 3] {
    [WatermarkContent::text(), WatermarkContent::symbol(), WatermarkContent::Mask]
}

pub fn preset(name: &str) -> Result<Preset, HarnessError> {
    let positions = || PositionMode::ALL.into_iter().map(mark).collect::<Vec<_>>();
    let conditions = match name {
        "positions" | "jpeg-defense" => positions(),
        "contents" => contents()
            .into_iter()
            .map(|c| WatermarkSpec::new(c, PositionMode::Center))
            .collect(),
        "opacity" => OPACITIES
            .iter()
            .map(|a| mark(PositionMode::Scattered).with_opacity(*a))
            .collect(),
        "rotation" => ANGLES
            .iter()
            .map(|a| mark(PositionMode::Scattered).with_angle(*a))
            .collect(),
        "colors" => COLORS
            .iter()
            .flat_map(|(_, rgb)| {
                contents()
                    .into_iter()
                    .map(move |c| WatermarkSpec::new(c, PositionMode::Scattered).with_color(*rgb))
            })
            .collect(),
        "area-ratio" => AREA_RATIOS
            .iter()
            .map(|r| mark(PositionMode::Scattered).with_area_ratio(*r))
            .collect(),
        _ => return Err(HarnessError::UnknownPreset(name.to_string())),
    };
    Ok(Preset {
        conditions,
        jpeg_quality: (name == "jpeg-defense").then_some(DEFENSE_QUALITY),
    })
}
