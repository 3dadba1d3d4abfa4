//! Full network: patch embedding, vision encoder, projector and causal decoder.

use super::config::ModelConfig;
use super::input::{assemble_prompt, emission_mask, eos_id, MultimodalSequence, PatchGrid, Slot};
use super::layers::{block_bwd, block_fwd, layer_norm_bwd, layer_norm_fwd, linear_bwd, linear_fwd, AttnSpec, BlockCache, NormCache};
use super::params::Layout;
use super::rope::Rotary;
use super::tensor::{matmul, matmul_a_bt, matmul_at_b, zeros, Scalar};
use super::ModelError;

/// Longest generated answer (15 symbols plus `<eos>`).
pub const MAX_DECODE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
}

/// One supervised example: images as patches, the teacher-forced prompt and
/// the target ids for every target position (answer followed by `<eos>`).
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub patches: PatchGrid<T>,
    pub seq: MultimodalSequence,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats<T> {
    pub loss: T,
    pub correct: usize,
    pub count: usize,
}

struct VisionCache<T> {
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
    normed: Vec<T>,
    rotary: Rotary<T>,
}

struct DecoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
    normed: Vec<T>,
    rotary: Rotary<T>,
}

/// Hidden states after every decoder layer plus logits at every row.
#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    pub layer_outputs: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Model { config, layout })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        self.layout.init(self.config.init_std, seed)
    }

    fn vit_spec<'a, T>(&self, rotary: &'a Rotary<T>) -> AttnSpec<'a, T> {
        AttnSpec { heads: self.config.vit_heads, rotary, causal: false }
    }

    fn dec_spec<'a, T>(&self, rotary: &'a Rotary<T>) -> AttnSpec<'a, T> {
        AttnSpec { heads: self.config.dec_heads, rotary, causal: true }
    }

    /// Fused patch embeddings, `n_patches × vit_dim`.
    pub fn embed_patches<T: Scalar>(&self, p: &[T], grid: &PatchGrid<T>) -> Vec<T> {
        assert_eq!(grid.patch_in, self.config.patch_in(), "patch width does not match fusion mode");
        linear_fwd(p, self.layout.patch_embed, &grid.patches, grid.len())
    }

    /// Vision encoder output before projection, `n_patches × vit_dim`.
    pub fn vit_encode<T: Scalar>(&self, p: &[T], grid: &PatchGrid<T>) -> Vec<T> {
        self.vision_forward(p, grid).normed
    }

    fn vision_forward<T: Scalar>(&self, p: &[T], grid: &PatchGrid<T>) -> VisionCache<T> {
        let n = grid.len();
        let rotary = Rotary::grid(&grid.coords(), self.config.vit_head_dim(), self.config.rope_base);
        let mut x = self.embed_patches(p, grid);
        let mut blocks = Vec::with_capacity(self.layout.vit_blocks.len());
        for b in &self.layout.vit_blocks {
            let (y, cache) = block_fwd(p, b, &x, n, &self.vit_spec(&rotary));
            blocks.push(cache);
            x = y;
        }
        let (normed, norm) = layer_norm_fwd(p, self.layout.vit_norm, &x);
        VisionCache { blocks, norm, normed, rotary }
    }

    /// Visual tokens in decoder width, `n_patches × dec_dim`.
    pub fn visual_tokens<T: Scalar>(&self, p: &[T], grid: &PatchGrid<T>) -> Vec<T> {
        let v = self.vit_encode(p, grid);
        linear_fwd(p, self.layout.projector, &v, grid.len())
    }

    /// Decoder input rows: token embeddings or visual tokens per slot.
    pub fn embed_sequence<T: Scalar>(&self, p: &[T], seq: &MultimodalSequence, visual: &[T]) -> Vec<T> {
        let d = self.config.dec_dim;
        let mut x = zeros(seq.len() * d);
        for (row, slot) in x.chunks_exact_mut(d).zip(&seq.slots) {
            match *slot {
                Slot::Text(id) => {
                    let off = self.layout.embed + id as usize * d;
                    row.copy_from_slice(&p[off..off + d]);
                }
                Slot::Visual(i) => row.copy_from_slice(&visual[i * d..(i + 1) * d]),
            }
        }
        x
    }

    fn decoder_forward_cached<T: Scalar>(&self, p: &[T], seq: &MultimodalSequence, mut x: Vec<T>) -> (Vec<T>, DecoderCache<T>) {
        let cfg = &self.config;
        let rows = seq.len();
        let rotary = Rotary::multimodal(&seq.positions, cfg.dec_head_dim(), cfg.rope_base);
        let mut blocks = Vec::with_capacity(self.layout.dec_blocks.len());
        for b in &self.layout.dec_blocks {
            let (y, cache) = block_fwd(p, b, &x, rows, &self.dec_spec(&rotary));
            blocks.push(cache);
            x = y;
        }
        let tail = &x[seq.target_start * cfg.dec_dim..];
        let (normed, norm) = layer_norm_fwd(p, self.layout.dec_norm, tail);
        let nt = seq.target_count();
        let mut logits = zeros(nt * cfg.vocab_size);
        matmul(&normed, self.head(p), &mut logits, nt, cfg.dec_dim, cfg.vocab_size, false);
        (logits, DecoderCache { blocks, norm, normed, rotary })
    }

    fn head<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.layout.head..self.layout.head + self.config.dec_dim * self.config.vocab_size]
    }

    /// Logits at the target positions, `target_count × vocab_size`.
    pub fn decoder_forward<T: Scalar>(&self, p: &[T], seq: &MultimodalSequence, visual: &[T]) -> Vec<T> {
        let x = self.embed_sequence(p, seq, visual);
        self.decoder_forward_cached(p, seq, x).0
    }

    /// Runs the decoder on explicit input rows and keeps every layer's output
    /// and the logits of every row.
    pub fn decode_embeddings<T: Scalar>(&self, p: &[T], seq: &MultimodalSequence, x: Vec<T>) -> DecoderTrace<T> {
        let cfg = &self.config;
        let rows = seq.len();
        let rotary = Rotary::multimodal(&seq.positions, cfg.dec_head_dim(), cfg.rope_base);
        let mut x = x;
        let mut layer_outputs = Vec::new();
        for b in &self.layout.dec_blocks {
            x = block_fwd(p, b, &x, rows, &self.dec_spec(&rotary)).0;
            layer_outputs.push(x.clone());
        }
        let (normed, _) = layer_norm_fwd(p, self.layout.dec_norm, &x);
        let mut logits = zeros(rows * cfg.vocab_size);
        matmul(&normed, self.head(p), &mut logits, rows, cfg.dec_dim, cfg.vocab_size, false);
        DecoderTrace { layer_outputs, logits }
    }

    /// Forward pass returning target-position logits.
    pub fn forward<T: Scalar>(&self, p: &[T], ex: &Example<T>) -> Vec<T> {
        let visual = self.visual_tokens(p, &ex.patches);
        self.decoder_forward(p, &ex.seq, &visual)
    }

    /// Mean cross-entropy over target positions.
    pub fn loss<T: Scalar>(&self, p: &[T], ex: &Example<T>) -> T {
        let logits = self.forward(p, ex);
        cross_entropy(&logits, &ex.targets, self.config.vocab_size, None).loss
    }

    /// Loss and accumulation of its gradient into `grad`.
    pub fn backward<T: Scalar>(&self, p: &[T], ex: &Example<T>, grad: &mut [T]) -> LossStats<T> {
        let cfg = &self.config;
        let l = &self.layout;
        assert_eq!(grad.len(), l.total);
        assert_eq!(ex.targets.len(), ex.seq.target_count(), "one target per target position");
        let d = cfg.dec_dim;
        let n_vis = ex.patches.len();

        let vis = self.vision_forward(p, &ex.patches);
        let visual = linear_fwd(p, l.projector, &vis.normed, n_vis);
        let x = self.embed_sequence(p, &ex.seq, &visual);
        let (logits, dec) = self.decoder_forward_cached(p, &ex.seq, x);

        let nt = ex.seq.target_count();
        let mut dlogits = zeros(nt * cfg.vocab_size);
        let stats = cross_entropy(&logits, &ex.targets, cfg.vocab_size, Some(&mut dlogits));

        // output head and final norm (target rows only)
        matmul_at_b(&dec.normed, &dlogits, &mut grad[l.head..l.head + d * cfg.vocab_size], nt, d, cfg.vocab_size, true);
        let mut dnormed = zeros(nt * d);
        matmul_a_bt(&dlogits, self.head(p), &mut dnormed, nt, cfg.vocab_size, d, false);
        let dtail = layer_norm_bwd(p, grad, l.dec_norm, &dec.norm, &dnormed);
        let rows = ex.seq.len();
        let mut dx = zeros(rows * d);
        dx[ex.seq.target_start * d..].copy_from_slice(&dtail);

        for (b, cache) in l.dec_blocks.iter().zip(&dec.blocks).rev() {
            dx = block_bwd(p, grad, b, cache, &dx, rows, &self.dec_spec(&dec.rotary));
        }

        let mut dvisual = zeros(n_vis * d);
        for (row, slot) in dx.chunks_exact(d).zip(&ex.seq.slots) {
            match *slot {
                Slot::Text(id) => {
                    let off = l.embed + id as usize * d;
                    grad[off..off + d].iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                }
                Slot::Visual(i) => dvisual[i * d..(i + 1) * d].copy_from_slice(row),
            }
        }

        let dv = linear_bwd(p, grad, l.projector, &vis.normed, &dvisual, n_vis, true).expect("dx requested");
        let mut dv = layer_norm_bwd(p, grad, l.vit_norm, &vis.norm, &dv);
        for (b, cache) in l.vit_blocks.iter().zip(&vis.blocks).rev() {
            dv = block_bwd(p, grad, b, cache, &dv, n_vis, &self.vit_spec(&vis.rotary));
        }
        linear_bwd(p, grad, l.patch_embed, &ex.patches.patches, &dv, n_vis, false);
        stats
    }

    /// Greedy decoding restricted to the emission mask. Returns emitted ids
    /// without the final `<eos>`.
    pub fn generate<T: Scalar>(&self, p: &[T], patches: &PatchGrid<T>, context_ids: &[u32]) -> Result<Vec<u32>, ModelError> {
        let cfg = &self.config;
        let visual = self.visual_tokens(p, patches);
        let mask = emission_mask(cfg);
        let eos = eos_id(cfg);
        let mut out = Vec::new();
        while out.len() < MAX_DECODE_LEN {
            let seq = assemble_prompt(cfg, patches.grid_h, patches.grid_w, context_ids, &out)?;
            let logits = self.decoder_forward(p, &seq, &visual);
            let last = &logits[(seq.target_count() - 1) * cfg.vocab_size..];
            let next = argmax_masked(last, &mask);
            if next == eos {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

fn argmax_masked<T: Scalar>(row: &[T], mask: &[bool]) -> u32 {
    let mut best = None::<(usize, T)>;
    for (i, (&v, &ok)) in row.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.expect("mask allows at least one id").0 as u32
}

/// Mean token cross-entropy; fills `dlogits` with its gradient when given.
pub fn cross_entropy<T: Scalar>(logits: &[T], targets: &[u32], vocab: usize, mut dlogits: Option<&mut [T]>) -> LossStats<T> {
    let n = targets.len();
    assert_eq!(logits.len(), n * vocab);
    let inv_n = T::one() / T::of(n.max(1) as f64);
    let mut total = T::zero();
    let mut correct = 0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let (mut arg, mut max) = (0, row[0]);
        for (j, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                arg = j;
            }
        }
        if arg == t as usize {
            correct += 1;
        }
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t as usize];
        if let Some(d) = dlogits.as_deref_mut() {
            let drow = &mut d[i * vocab..(i + 1) * vocab];
            for (g, &v) in drow.iter_mut().zip(row) {
                *g = (v - lse).exp() * inv_n;
            }
            drow[t as usize] -= inv_n;
        }
    }
    LossStats { loss: total * inv_n, correct, count: n }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(logits: &[T], vocab: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(vocab) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}
