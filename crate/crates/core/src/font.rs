//! Bundled bitmap font used to draw text watermarks.
//!
//! The font is the public-domain 8x8 "font8x8" basic set. Each glyph is a grid of
//! unit cells; rendering scales cells to `sx x sy` pixel rectangles, so the rendered
//! ink box of a string is its cell extent times the scale.

use sha2::{Digest, Sha256};

/// SHA-256 of the bundled glyph table (128 glyphs x 8 row bytes, ASCII order).
pub const BUNDLED_FONT_SHA256: &str =
    "66bba26c3b351634ed4dd3ad7561f6cc892e1727d4887204bd4d1d3883a18b37";

pub const BUNDLED_FONT_NAME: &str = "font8x8-basic";

/// Glyph cell size of the bundled font.
pub const GLYPH_CELLS: usize = 8;

/// Smallest legible scale: one pixel per font cell.
pub const MIN_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FontError {
    #[error("watermark text is empty")]
    Empty,
    #[error("character {0:?} is not printable ASCII")]
    Unsupported(char),
    #[error("text {0:?} has no visible ink")]
    NoInk(String),
}

#[derive(Debug)]
pub struct BitmapFont {
    glyphs: &'static [[u8; 8]; 128],
}

static BUNDLED: BitmapFont = BitmapFont {
    glyphs: &font8x8::legacy::BASIC_LEGACY,
};

pub fn bundled() -> &'static BitmapFont {
    &BUNDLED
}

impl BitmapFont {
    pub fn name(&self) -> &'static str {
        BUNDLED_FONT_NAME
    }

    /// Hex SHA-256 over the glyph table.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for g in self.glyphs.iter() {
            h.update(g);
        }
        hex::encode(h.finalize())
    }

    /// Row bitmaps for a printable ASCII character; bit 0 is the leftmost cell.
    pub fn glyph(&self, ch: char) -> Option<&[u8; 8]> {
        if (' '..='~').contains(&ch) {
            Some(&self.glyphs[ch as usize])
        } else {
            None
        }
    }

    /// Lays out `text` on a single line and crops to the ink bounding box.
    pub fn layout(&self, text: &str) -> Result<TextBitmap, FontError> {
        if text.is_empty() {
            return Err(FontError::Empty);
        }
        let glyphs = text
            .chars()
            .map(|c| self.glyph(c).ok_or(FontError::Unsupported(c)))
            .collect::<Result<Vec<_>, _>>()?;
        let full_cols = glyphs.len() * GLYPH_CELLS;
        let ink = |x: usize, y: usize| glyphs[x / GLYPH_CELLS][y] >> (x % GLYPH_CELLS) & 1 == 1;

        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..GLYPH_CELLS {
            for x in 0..full_cols {
                if ink(x, y) {
                    x0 = x0.min(x);
                    x1 = x1.max(x + 1);
                    y0 = y0.min(y);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            return Err(FontError::NoInk(text.to_string()));
        }
        let (cols, rows) = (x1 - x0, y1 - y0);
        let mut cells = Vec::with_capacity(cols * rows);
        for y in y0..y1 {
            for x in x0..x1 {
                cells.push(ink(x, y));
            }
        }
        Ok(TextBitmap { cols, rows, cells })
    }
}

/// Ink-cropped cell grid of a laid-out string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextBitmap {
    cols: usize,
    rows: usize,
    cells: Vec<bool>,
}

impl TextBitmap {
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Width-to-height ratio of the ink box.
    pub fn aspect(&self) -> f64 {
        self.cols as f64 / self.rows as f64
    }

    pub fn ink(&self, col: usize, row: usize) -> bool {
        col < self.cols && row < self.rows && self.cells[row * self.cols + col]
    }

    /// Fraction of ink cells inside the ink box.
    pub fn density(&self) -> f64 {
        self.cells.iter().filter(|c| **c).count() as f64 / self.cells.len() as f64
    }

    /// Rendered ink-box size in pixels at a uniform scale.
    pub fn rendered_size(&self, scale: f64) -> (f64, f64) {
        (self.cols as f64 * scale, self.rows as f64 * scale)
    }

    pub fn rendered_area(&self, scale: f64) -> f64 {
        let (w, h) = self.rendered_size(scale);
        w * h
    }
}
