//! Open-vocabulary symbol recognition by in-context matching.
//!
//! A query image is labelled by comparing its symbols with a context image
//! whose symbols carry context-relative label tokens. Modules:
//!
//! - [`tokenizer`]: context-aware token assignment, encoding and decoding
//! - [`datagen`]: synthetic context/query samples and offline datasets
//! - [`model`]: a small multimodal decoder with analytic gradients
//! - [`train`]: AdamW + cosine schedule training loop and checkpoints
//! - [`eval`]: CER/TER/ooc-F1 metrics, α/β sweeps and baseline comparison

pub mod datagen;
pub mod eval;
pub mod model;
pub mod tokenizer;
pub mod train;
