//! VQA corpora: JSON-Lines manifests of questions over document images.
//!
//! Each manifest line is one [`VqaItem`]:
//!
//! ```json
//! {"id":"t1","image_path":"img/t1.png","category":"TextS","question":"...",
//!  "options":{"A":"..","B":"..","C":"..","D":".."},"answer":["B"]}
//! ```
//!
//! Image paths are POSIX-style and resolved against the dataset root, which defaults
//! to the directory holding the manifest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// PRNG used by [`sample`], recorded in run reports for provenance.
pub const SAMPLER_PRNG: &str = "rand_chacha::ChaCha8Rng + rand::seq::index::sample";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}:{line}: malformed manifest line: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: item {id:?}: {kind}")]
    Validation {
        path: PathBuf,
        line: usize,
        id: String,
        kind: ValidationError,
    },
    #[error("item {id:?}: image not readable at {path}: {source}")]
    MissingImage {
        id: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported image format (expected PNG or JPEG)")]
    UnsupportedFormat { path: PathBuf },
    #[error("{path}: corrupt image: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("invalid image buffer: {0}")]
    InvalidBuffer(String),
    #[error("sample size {n} out of range 1..={len}")]
    SampleSize { n: usize, len: usize },
    #[error("image encoding failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("empty id")]
    EmptyId,
    #[error("duplicate id")]
    DuplicateId,
    #[error("invalid option letter {0:?} (expected A-D)")]
    BadLetter(String),
    #[error("expected exactly 4 options A-D, found {0}")]
    OptionCount(usize),
    #[error("empty answer set")]
    EmptyAnswer,
    #[error("answer cardinality {found} inconsistent with category {category}")]
    Cardinality { category: Category, found: usize },
}

/// The four dataset classes: text, single-choice chart, multiple-response chart, table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    TextS,
    ChartS,
    ChartM,
    TableS,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::TextS,
        Category::ChartS,
        Category::ChartM,
        Category::TableS,
    ];

    /// Multiple-response categories accept (and require) more than one correct option.
    pub fn is_multiple_response(self) -> bool {
        matches!(self, Category::ChartM)
    }

    fn accepts_cardinality(self, n: usize) -> bool {
        if self.is_multiple_response() {
            n >= 2
        } else {
            n == 1
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::TextS => "TextS",
            Category::ChartS => "ChartS",
            Category::ChartM => "ChartM",
            Category::TableS => "TableS",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptionLetter {
    A,
    B,
    C,
    D,
}

impl OptionLetter {
    pub const ALL: [OptionLetter; 4] = [OptionLetter::A, OptionLetter::B, OptionLetter::C, OptionLetter::D];

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'A' => Some(OptionLetter::A),
            'B' => Some(OptionLetter::B),
            'C' => Some(OptionLetter::C),
            'D' => Some(OptionLetter::D),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            OptionLetter::A => 'A',
            OptionLetter::B => 'B',
            OptionLetter::C => 'C',
            OptionLetter::D => 'D',
        }
    }

    fn parse(s: &str) -> Result<Self, ValidationError> {
        let mut chars = s.chars();
        match (chars.next().and_then(Self::from_char), chars.next()) {
            (Some(l), None) => Ok(l),
            _ => Err(ValidationError::BadLetter(s.to_string())),
        }
    }
}

impl fmt::Display for OptionLetter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Formats a letter set as `"A, C"`.
pub fn format_letters(letters: &BTreeSet<OptionLetter>) -> String {
    letters
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// One question over one document image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VqaItem {
    pub id: String,
    pub image_path: String,
    pub category: Category,
    pub question: String,
    pub options: BTreeMap<OptionLetter, String>,
    pub answer: BTreeSet<OptionLetter>,
}

/// Manifest line as written on disk, before validation.
#[derive(Debug, Deserialize)]
struct RawItem {
    id: String,
    image_path: String,
    category: Category,
    question: String,
    options: BTreeMap<String, String>,
    answer: Vec<String>,
}

impl TryFrom<RawItem> for VqaItem {
    type Error = ValidationError;

    fn try_from(raw: RawItem) -> Result<Self, Self::Error> {
        if raw.id.is_empty() {
            return Err(ValidationError::EmptyId);
        }
        let mut options = BTreeMap::new();
        for (k, v) in raw.options {
            options.insert(OptionLetter::parse(&k)?, v);
        }
        if options.len() != 4 {
            return Err(ValidationError::OptionCount(options.len()));
        }
        let answer = raw
            .answer
            .iter()
            .map(|s| OptionLetter::parse(s))
            .collect::<Result<BTreeSet<_>, _>>()?;
        if answer.is_empty() {
            return Err(ValidationError::EmptyAnswer);
        }
        if !raw.category.accepts_cardinality(answer.len()) {
            return Err(ValidationError::Cardinality {
                category: raw.category,
                found: answer.len(),
            });
        }
        Ok(VqaItem {
            id: raw.id,
            image_path: raw.image_path,
            category: raw.category,
            question: raw.question,
            options,
            answer,
        })
    }
}

impl VqaItem {
    /// Parses and validates a single manifest line.
    pub fn from_json_line(line: &str) -> Result<Self, ItemParseError> {
        let raw: RawItem = serde_json::from_str(line).map_err(ItemParseError::Json)?;
        VqaItem::try_from(raw).map_err(ItemParseError::Invalid)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ItemParseError {
    #[error(transparent)]
    Json(serde_json::Error),
    #[error(transparent)]
    Invalid(ValidationError),
}

/// An ordered list of items plus the directory their image paths are relative to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalDataset {
    pub name: String,
    pub root: PathBuf,
    pub items: Vec<VqaItem>,
}

impl EvalDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Resolves an item's POSIX-style image path against the dataset root.
    pub fn image_path(&self, item: &VqaItem) -> PathBuf {
        let mut p = self.root.clone();
        for part in item.image_path.split('/').filter(|s| !s.is_empty() && *s != ".") {
            p.push(part);
        }
        p
    }

    pub fn load_image(&self, item: &VqaItem) -> Result<DocumentImage, CorpusError> {
        load_image(self.image_path(item))
    }

    /// Writes the items back as JSON-Lines.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        for item in &self.items {
            serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads a manifest, resolving image paths against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<EvalDataset, CorpusError> {
    let path = path.as_ref();
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    load_manifest_with_root(path, root)
}

pub fn load_manifest_with_root(
    path: impl AsRef<Path>,
    root: impl Into<PathBuf>,
) -> Result<EvalDataset, CorpusError> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut dataset = EvalDataset {
        name,
        root: root.into(),
        items: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = match VqaItem::from_json_line(&line) {
            Ok(item) => item,
            Err(ItemParseError::Json(source)) => {
                return Err(CorpusError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    source,
                })
            }
            Err(ItemParseError::Invalid(kind)) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|v| v.as_str()).map(str::to_string))
                    .unwrap_or_default();
                return Err(CorpusError::Validation {
                    path: path.to_path_buf(),
                    line: line_no,
                    id,
                    kind,
                });
            }
        };
        if !seen.insert(item.id.clone()) {
            return Err(CorpusError::Validation {
                path: path.to_path_buf(),
                line: line_no,
                id: item.id,
                kind: ValidationError::DuplicateId,
            });
        }
        let image = dataset.image_path(&item);
        if let Err(source) = File::open(&image) {
            return Err(CorpusError::MissingImage {
                id: item.id,
                path: image,
                source,
            });
        }
        dataset.items.push(item);
    }
    Ok(dataset)
}

/// Deterministic order-preserving subsample of `n` items.
pub fn sample(dataset: &EvalDataset, n: usize, seed: u64) -> Result<EvalDataset, CorpusError> {
    let len = dataset.items.len();
    if n == 0 || n > len {
        return Err(CorpusError::SampleSize { n, len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    Ok(EvalDataset {
        name: dataset.name.clone(),
        root: dataset.root.clone(),
        items: picked.into_iter().map(|i| dataset.items[i].clone()).collect(),
    })
}

/// An 8-bit RGB raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct DocumentImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for DocumentImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DocumentImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl DocumentImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, CorpusError> {
        if width == 0 || height == 0 {
            return Err(CorpusError::InvalidBuffer(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = 3 * width as usize * height as usize;
        if pixels.len() != expected {
            return Err(CorpusError::InvalidBuffer(format!(
                "expected {expected} bytes for {width}x{height}, got {}",
                pixels.len()
            )));
        }
        Ok(DocumentImage {
            width,
            height,
            pixels,
        })
    }

    /// A uniformly colored image.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(3 * width as usize * height as usize)
            .collect();
        DocumentImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fills the half-open pixel rectangle `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, rgb: [u8; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set_pixel(x, y, rgb);
            }
        }
    }

    fn from_dynamic(img: DynamicImage) -> Self {
        let rgb = if img.color().has_alpha() {
            flatten_on_white(&img.to_rgba8())
        } else {
            img.to_rgb8().into_raw()
        };
        DocumentImage {
            width: img.width(),
            height: img.height(),
            pixels: rgb,
        }
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction")
    }

    /// Lossless PNG encoding with fixed encoder parameters.
    pub fn encode_png(&self) -> Result<Vec<u8>, CorpusError> {
        use image::codecs::png::{CompressionType, FilterType, PngEncoder};
        use image::ImageEncoder;
        let mut out = Vec::new();
        PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive)
            .write_image(
                &self.pixels,
                self.width,
                self.height,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| CorpusError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, CorpusError> {
        decode_with_path(bytes, Path::new("<memory>"))
    }
}

fn flatten_on_white(rgba: &image::RgbaImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(rgba.width() as usize * rgba.height() as usize * 3);
    for px in rgba.pixels() {
        let a = px[3] as u32;
        for c in &px.0[..3] {
            // round(c*a/255 + 255*(255-a)/255)
            out.push(((*c as u32 * a + 255 * (255 - a) + 127) / 255) as u8);
        }
    }
    out
}

fn decode_with_path(bytes: &[u8], path: &Path) -> Result<DocumentImage, CorpusError> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(CorpusError::Io)?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        _ => {
            return Err(CorpusError::UnsupportedFormat {
                path: path.to_path_buf(),
            })
        }
    }
    let img = reader.decode().map_err(|e| CorpusError::CorruptImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(DocumentImage::from_dynamic(img))
}

/// Loads a PNG or JPEG file as 8-bit RGB; transparency is flattened against white.
pub fn load_image(path: impl AsRef<Path>) -> Result<DocumentImage, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_with_path(&bytes, path)
}
