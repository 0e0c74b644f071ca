//! `.tdump` tensor files: a 256-byte space-padded JSON header followed by a
//! little-endian float32 payload in row-major order.
//!
//! Header fields: `name`, `shape`, `dtype` (always `"float32"`) and `meta`
//! (`model_name`, `item_id`, `condition_id`, `layer_index`, `kind`, and optionally
//! `grid` and `valid_len`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const HEADER_LEN: usize = 256;
pub const DTYPE: &str = "float32";
pub const EXTENSION: &str = "tdump";

#[derive(Debug, thiserror::Error)]
pub enum TdumpError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("file is {0} bytes, shorter than the {HEADER_LEN}-byte header")]
    Truncated(usize),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("header is {0} bytes, exceeds {HEADER_LEN}")]
    HeaderTooLong(usize),
    #[error("unsupported dtype {0:?}")]
    Dtype(String),
    #[error("payload has {found} values, shape {shape:?} needs {expected}")]
    Payload {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("{kind} dump has invalid shape {shape:?}")]
    Shape { kind: DumpKind, shape: Vec<usize> },
    #[error("invalid metadata: {0}")]
    Meta(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("attention row {row} of head {head} sums to {sum}")]
    NotNormalized { head: usize, row: usize, sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpKind {
    Attention,
    Embedding,
}

impl std::fmt::Display for DumpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DumpKind::Attention => "attention",
            DumpKind::Embedding => "embedding",
        })
    }
}

/// Image-patch layout of a token sequence: positions `offset..offset + rows*cols`
/// are patches in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpMeta {
    pub model_name: String,
    pub item_id: String,
    pub condition_id: String,
    pub layer_index: i64,
    pub kind: DumpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PatchGrid>,
    /// Number of non-padding sequence positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_len: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    meta: DumpMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub name: String,
    pub shape: Vec<usize>,
    pub meta: DumpMeta,
    pub data: Vec<f32>,
}

impl TensorDump {
    /// Builds and validates a dump.
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        meta: DumpMeta,
        data: Vec<f32>,
    ) -> Result<Self, TdumpError> {
        let d = TensorDump {
            name: name.into(),
            shape,
            meta,
            data,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), TdumpError> {
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(TdumpError::Payload {
                shape: self.shape.clone(),
                expected,
                found: self.data.len(),
            });
        }
        let shape_ok = match self.meta.kind {
            DumpKind::Attention => {
                self.shape.len() == 3 && self.shape[1] == self.shape[2] && self.shape.iter().all(|d| *d > 0)
            }
            DumpKind::Embedding => self.shape.len() == 2 && self.shape.iter().all(|d| *d > 0),
        };
        if !shape_ok {
            return Err(TdumpError::Shape {
                kind: self.meta.kind,
                shape: self.shape.clone(),
            });
        }
        let seq = self.seq_len();
        if let Some(v) = self.meta.valid_len {
            if v == 0 || v > seq {
                return Err(TdumpError::Meta(format!("valid_len {v} outside 1..={seq}")));
            }
        }
        if let Some(g) = self.meta.grid {
            if g.rows == 0 || g.cols == 0 || g.offset + g.rows * g.cols > seq {
                return Err(TdumpError::Meta(format!(
                    "grid {}x{} at offset {} does not fit sequence length {seq}",
                    g.rows, g.cols, g.offset
                )));
            }
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(TdumpError::NonFinite(i));
        }
        Ok(())
    }

    pub fn kind(&self) -> DumpKind {
        self.meta.kind
    }

    /// Sequence length: the key axis of attention, the row axis of embeddings.
    pub fn seq_len(&self) -> usize {
        match self.meta.kind {
            DumpKind::Attention => self.shape.get(2).copied().unwrap_or(0),
            DumpKind::Embedding => self.shape.first().copied().unwrap_or(0),
        }
    }

    /// Checks that every attention row sums to one within `tol`.
    pub fn check_softmax(&self, tol: f64) -> Result<(), TdumpError> {
        if self.meta.kind != DumpKind::Attention {
            return Ok(());
        }
        let s = self.shape[2];
        for (i, row) in self.data.chunks(s).enumerate() {
            let sum: f64 = row.iter().map(|v| *v as f64).sum();
            if (sum - 1.0).abs() > tol {
                return Err(TdumpError::NotNormalized {
                    head: i / s,
                    row: i % s,
                    sum,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TdumpError> {
        self.validate()?;
        let header = serde_json::to_string(&Header {
            name: self.name.clone(),
            shape: self.shape.clone(),
            dtype: DTYPE.into(),
            meta: self.meta.clone(),
        })
        .map_err(|e| TdumpError::Header(e.to_string()))?;
        if header.len() > HEADER_LEN {
            return Err(TdumpError::HeaderTooLong(header.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.resize(HEADER_LEN, b' ');
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TdumpError> {
        if bytes.len() < HEADER_LEN {
            return Err(TdumpError::Truncated(bytes.len()));
        }
        let (head, payload) = bytes.split_at(HEADER_LEN);
        let text = std::str::from_utf8(head)
            .map_err(|e| TdumpError::Header(e.to_string()))?
            .trim_end_matches([' ', '\0', '\n', '\r', '\t']);
        let h: Header = serde_json::from_str(text).map_err(|e| TdumpError::Header(e.to_string()))?;
        if h.dtype != DTYPE {
            return Err(TdumpError::Dtype(h.dtype));
        }
        if payload.len() % 4 != 0 {
            return Err(TdumpError::Payload {
                expected: h.shape.iter().product(),
                shape: h.shape,
                found: payload.len() / 4,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        TensorDump::new(h.name, h.shape, h.meta, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TdumpError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| TdumpError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TdumpError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|source| TdumpError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Attention weight of `head`, query `q`, key `k`.
    pub fn attention(&self, head: usize, q: usize, k: usize) -> f32 {
        let s = self.shape[2];
        self.data[(head * s + q) * s + k]
    }
}

/// `<item>__<condition>__<kind>__L<layer>.tdump`
pub fn dump_file_name(meta: &DumpMeta) -> String {
    format!(
        "{}__{}__{}__L{}.{EXTENSION}",
        meta.item_id, meta.condition_id, meta.kind, meta.layer_index
    )
}

/// Splits a dump file name into (item, condition, kind, layer).
pub fn parse_dump_file_name(name: &str) -> Option<(String, String, DumpKind, i64)> {
    let stem = name.strip_suffix(&format!(".{EXTENSION}"))?;
    let parts: Vec<&str> = stem.rsplitn(3, "__").collect();
    let [layer, kind, rest] = parts.as_slice() else {
        return None;
    };
    let layer: i64 = layer.strip_prefix('L')?.parse().ok()?;
    let kind = match *kind {
        "attention" => DumpKind::Attention,
        "embedding" => DumpKind::Embedding,
        _ => return None,
    };
    let (item, condition) = rest.split_once("__")?;
    Some((item.to_string(), condition.to_string(), kind, layer))
}

/// Reads every `.tdump` file in `dir`, sorted by file name.
pub fn read_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, TensorDump)>, TdumpError> {
    let dir = dir.as_ref();
    let io = |source| TdumpError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| TensorDump::read(&p).map(|d| (p, d)))
        .collect()
}
