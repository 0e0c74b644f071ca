//! Watermark robustness harness for document visual question answering.
//!
//! The crate is organised as a pipeline:
//!
//! * [`corpus`] loads JSON-Lines VQA manifests and their document images.
//! * [`watermark`] synthesizes controlled visible-watermark perturbations.
//! * [`client`] queries a vision-language model over HTTP (or a deterministic mock).
//! * [`metrics`] grades replies and computes accuracy and performance drop rate.
//! * [`analysis`] computes attention-variation maps, embedding similarity and t-SNE
//!   projections from [`tdump`] tensor files.
//! * [`harness`] wires everything into resumable experiment runs.
//!
//! Data-parallel loops go through [`par::Execution`]; with the `parallel` feature
//! disabled every loop runs sequentially.

pub mod analysis;
pub mod client;
pub mod corpus;
pub mod font;
pub mod harness;
pub mod metrics;
pub mod par;
pub mod tdump;
pub mod watermark;

pub use corpus::{Category, DocumentImage, EvalDataset, OptionLetter, VqaItem};
pub use par::Execution;
pub use watermark::{PlacementBox, PositionMode, WatermarkContent, WatermarkSpec};
