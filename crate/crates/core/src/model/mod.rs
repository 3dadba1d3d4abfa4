//! Multimodal decoder with hand-written gradients.
//!
//! The context and query images are padded to a common size and cut into
//! patches; co-located patches are concatenated and embedded by one linear
//! map, encoded by a bidirectional transformer with 2D rotary positions,
//! projected to the decoder width and spliced between `<vision_start>` and
//! `<vision_end>`. The context's label tokens follow, then `<sep_query>` and
//! the answer. A causal decoder with multimodal rotary positions predicts
//! the answer tokens.

mod checkpoint;
mod config;
mod input;
mod layers;
mod network;
mod params;
mod rope;
mod tensor;

use image::GrayImage;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{Fusion, ModelConfig, Precision, BASELINE_CHARS, BASELINE_SPECIALS};
pub use input::{
    assemble_prompt, baseline_char_id, baseline_id_char, baseline_special, emission_mask, eos_id, patchify, patchify_for,
    patchify_pair, BaselineSpecial, MultimodalSequence, PatchGrid, Slot,
};
pub use layers::{gelu, gelu_grad, rotary_logits};
pub use network::{cross_entropy, softmax_rows, DecoderTrace, Example, LossStats, Model, MAX_DECODE_LEN};
pub use params::{BlockIdx, Init, Layout, LinearIdx, NormIdx, Segment};
pub use rope::{mrope_sections, Rotary};
pub use tensor::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("query text {0:?} is outside the baseline character set")]
    BaselineCharset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// Baseline target ids for a query string (`a..z` only).
pub fn baseline_targets(query_text: &str) -> Result<Vec<u32>, ModelError> {
    query_text
        .chars()
        .map(baseline_char_id)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ModelError::BaselineCharset(query_text.to_string()))
}

/// Builds a teacher-forced example. `answer` holds the ids the model must
/// emit (label/`<ooc>` ids, or characters for the baseline); `<eos>` is
/// appended to the targets. `context_ids` is ignored by the baseline.
pub fn prepare_example<T: Scalar>(
    cfg: &ModelConfig,
    context_image: &GrayImage,
    query_image: &GrayImage,
    context_ids: &[u32],
    answer: &[u32],
) -> Result<Example<T>, ModelError> {
    let patches = patchify_for(cfg, Some(context_image), query_image);
    let seq = assemble_prompt(cfg, patches.grid_h, patches.grid_w, context_ids, answer)?;
    let mut targets = answer.to_vec();
    targets.push(eos_id(cfg));
    Ok(Example { patches, seq, targets })
}
