use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::tdump::{DumpKind, TensorDump};

/// Mean-pooled embedding over the non-padding positions of a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub vector: Vec<f64>,
    pub model_name: String,
    pub item_id: String,
    pub condition_id: String,
    pub layer_index: i64,
    pub pooled_positions: usize,
}

impl EmbeddingSummary {
    pub fn from_dump(dump: &TensorDump) -> Result<Self, AnalysisError> {
        if dump.kind() != DumpKind::Embedding {
            return Err(AnalysisError::Kind {
                expected: DumpKind::Embedding,
                found: dump.kind(),
            });
        }
        let (seq, hidden) = (dump.shape[0], dump.shape[1]);
        let valid = dump.meta.valid_len.unwrap_or(seq);
        let mut vector = vec![0.0f64; hidden];
        for row in dump.data.chunks(hidden).take(valid) {
            for (s, v) in vector.iter_mut().zip(row) {
                *s += *v as f64;
            }
        }
        for s in &mut vector {
            *s /= valid as f64;
        }
        Ok(EmbeddingSummary {
            vector,
            model_name: dump.meta.model_name.clone(),
            item_id: dump.meta.item_id.clone(),
            condition_id: dump.meta.condition_id.clone(),
            layer_index: dump.meta.layer_index,
            pooled_positions: valid,
        })
    }
}

pub fn cosine_similarity(a: &EmbeddingSummary, b: &EmbeddingSummary) -> Result<f64, AnalysisError> {
    cosine_similarity_slices(&a.vector, &b.vector)
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_similarity_slices(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Dimension(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(AnalysisError::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
