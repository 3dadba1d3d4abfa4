//! Image patching and multimodal prompt assembly.

use image::GrayImage;

use super::config::{Fusion, ModelConfig, BASELINE_CHARS};
use super::tensor::Scalar;
use super::ModelError;
use crate::tokenizer::{SpecialToken, Vocab};

/// Patches of one image (or image pair) in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    /// `grid_h * grid_w × patch_in`
    pub patches: Vec<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_in: usize,
}

impl<T> PatchGrid<T> {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> Vec<(usize, usize)> {
        (0..self.grid_h).flat_map(|r| (0..self.grid_w).map(move |c| (r, c))).collect()
    }
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m).max(1) * m
}

/// Ink intensity in `[0, 1]`: white background is 0.
fn ink<T: Scalar>(img: &GrayImage, x: usize, y: usize) -> T {
    if x < img.width() as usize && y < img.height() as usize {
        T::of((255 - img.get_pixel(x as u32, y as u32).0[0]) as f64 / 255.0)
    } else {
        T::zero()
    }
}

fn grid_for(images: &[&GrayImage], patch: usize) -> (usize, usize) {
    let h = images.iter().map(|i| i.height() as usize).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width() as usize).max().unwrap_or(0);
    (round_up(h, patch) / patch, round_up(w, patch) / patch)
}

/// Pads every image with white to the elementwise maximum size, rounded up to
/// a multiple of `patch`, and concatenates co-located patches frame by frame.
pub fn patchify<T: Scalar>(images: &[&GrayImage], patch: usize) -> PatchGrid<T> {
    let (grid_h, grid_w) = grid_for(images, patch);
    let area = patch * patch;
    let patch_in = images.len() * area;
    let mut patches = Vec::with_capacity(grid_h * grid_w * patch_in);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            for img in images {
                for py in 0..patch {
                    for px in 0..patch {
                        patches.push(ink(img, gc * patch + px, gr * patch + py));
                    }
                }
            }
        }
    }
    PatchGrid { patches, grid_h, grid_w, patch_in }
}

/// Context and query patches fused per spatial location (context first).
pub fn patchify_pair<T: Scalar>(context: &GrayImage, query: &GrayImage, patch: usize) -> PatchGrid<T> {
    patchify(&[context, query], patch)
}

pub fn patchify_for<T: Scalar>(cfg: &ModelConfig, context: Option<&GrayImage>, query: &GrayImage) -> PatchGrid<T> {
    match (cfg.fusion, context) {
        (Fusion::Paired, Some(c)) => patchify_pair(c, query, cfg.patch_size),
        (Fusion::Paired, None) => panic!("paired fusion needs a context image"),
        (Fusion::Single, _) => patchify(&[query], cfg.patch_size),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Text(u32),
    /// Index into the projected visual tokens.
    Visual(usize),
}

/// Assembled decoder input:
/// `<bos> <vision_start> [visual] <vision_end> [context tokens] <sep_query> [target prefix]`
/// (the baseline uses `[visual] <bos> [target prefix]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    pub slots: Vec<Slot>,
    /// `(temporal, height, width)` rotary coordinates per slot.
    pub positions: Vec<[usize; 3]>,
    /// First slot whose output predicts a target token.
    pub target_start: usize,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.slots.len() - self.target_start
    }
}

struct SeqBuilder {
    slots: Vec<Slot>,
    positions: Vec<[usize; 3]>,
    next_t: usize,
}

impl SeqBuilder {
    fn text(&mut self, id: u32) {
        self.slots.push(Slot::Text(id));
        self.positions.push([self.next_t; 3]);
        self.next_t += 1;
    }

    fn visual(&mut self, grid_h: usize, grid_w: usize) {
        let s = self.next_t;
        for r in 0..grid_h {
            for c in 0..grid_w {
                self.slots.push(Slot::Visual(r * grid_w + c));
                self.positions.push([s, s + r, s + c]);
            }
        }
        self.next_t = s + grid_h.max(grid_w);
    }
}

/// Builds the contextual prompt. `context_ids` and `target_prefix` are
/// vocabulary ids.
pub fn assemble_prompt(
    cfg: &ModelConfig,
    grid_h: usize,
    grid_w: usize,
    context_ids: &[u32],
    target_prefix: &[u32],
) -> Result<MultimodalSequence, ModelError> {
    let vocab = Vocab::new(cfg.label_count);
    let mut b = SeqBuilder { slots: Vec::new(), positions: Vec::new(), next_t: 0 };
    let target_start;
    match cfg.fusion {
        Fusion::Paired => {
            b.text(vocab.special_id(SpecialToken::Bos));
            b.text(vocab.special_id(SpecialToken::VisionStart));
            b.visual(grid_h, grid_w);
            b.text(vocab.special_id(SpecialToken::VisionEnd));
            context_ids.iter().for_each(|&id| b.text(id));
            target_start = b.slots.len();
            b.text(vocab.special_id(SpecialToken::SepQuery));
        }
        Fusion::Single => {
            b.visual(grid_h, grid_w);
            target_start = b.slots.len();
            b.text(baseline_special(BaselineSpecial::Bos));
        }
    }
    target_prefix.iter().for_each(|&id| b.text(id));
    if b.slots.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceOverflow { len: b.slots.len(), max: cfg.max_seq_len });
    }
    Ok(MultimodalSequence { slots: b.slots, positions: b.positions, target_start })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineSpecial {
    Bos,
    Eos,
    Pad,
}

/// Ids of the baseline's static vocabulary: `a..z` then `<bos> <eos> <pad>`.
pub fn baseline_special(s: BaselineSpecial) -> u32 {
    BASELINE_CHARS as u32
        + match s {
            BaselineSpecial::Bos => 0,
            BaselineSpecial::Eos => 1,
            BaselineSpecial::Pad => 2,
        }
}

pub fn baseline_char_id(c: char) -> Option<u32> {
    c.is_ascii_lowercase().then(|| c as u32 - 'a' as u32)
}

pub fn baseline_id_char(id: u32) -> Option<char> {
    (id < BASELINE_CHARS as u32).then(|| char::from(b'a' + id as u8))
}

/// End-of-sequence id for the model's vocabulary.
pub fn eos_id(cfg: &ModelConfig) -> u32 {
    match cfg.fusion {
        Fusion::Paired => Vocab::new(cfg.label_count).special_id(SpecialToken::Eos),
        Fusion::Single => baseline_special(BaselineSpecial::Eos),
    }
}

/// Ids the decoder may emit: labels, `<ooc>` and `<eos>` (characters and
/// `<eos>` for the baseline).
pub fn emission_mask(cfg: &ModelConfig) -> Vec<bool> {
    let mut mask = vec![false; cfg.vocab_size];
    mask[..cfg.label_count].iter_mut().for_each(|m| *m = true);
    match cfg.fusion {
        Fusion::Paired => {
            let v = Vocab::new(cfg.label_count);
            mask[v.special_id(SpecialToken::Ooc) as usize] = true;
        }
        Fusion::Single => {}
    }
    mask[eos_id(cfg) as usize] = true;
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn white(w: u32, h: u32) -> GrayImage {
        GrayImage::from_pixel(w, h, Luma([255]))
    }

    #[test]
    fn grid_arithmetic() {
        let g: PatchGrid<f64> = patchify_pair(&white(42, 20), &white(30, 28), 14);
        assert_eq!((g.grid_h, g.grid_w), (2, 3));
        assert_eq!(g.len(), 6);
        assert_eq!(g.patch_in, 392);
        assert_eq!(g.patches.len(), 6 * 392);
    }

    #[test]
    fn white_pair_gives_identical_patches() {
        let g: PatchGrid<f64> = patchify_pair(&white(50, 30), &white(50, 30), 14);
        assert!(g.patches.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_first_then_query() {
        let mut c = white(14, 14);
        c.put_pixel(0, 0, Luma([0]));
        let q = white(14, 14);
        let g: PatchGrid<f64> = patchify_pair(&c, &q, 14);
        assert_eq!(g.patches[0], 1.0);
        assert_eq!(g.patches[196], 0.0);
    }

    #[test]
    fn prompt_layout() {
        let cfg = ModelConfig::desk();
        let v = Vocab::new(26);
        let seq = assemble_prompt(&cfg, 2, 3, &[0, 1, 2], &[1, 26]).unwrap();
        assert_eq!(seq.len(), 2 + 6 + 1 + 3 + 1 + 2);
        assert_eq!(seq.slots[0], Slot::Text(v.special_id(SpecialToken::Bos)));
        assert_eq!(seq.slots[1], Slot::Text(v.special_id(SpecialToken::VisionStart)));
        assert_eq!(seq.slots[2], Slot::Visual(0));
        assert_eq!(seq.slots[7], Slot::Visual(5));
        assert_eq!(seq.slots[8], Slot::Text(v.special_id(SpecialToken::VisionEnd)));
        assert_eq!(seq.target_start, 12);
        assert_eq!(seq.slots[12], Slot::Text(v.special_id(SpecialToken::SepQuery)));
        assert_eq!(seq.target_count(), 3);
        // visual rows: (2, 2 + r, 2 + c); text resumes at 2 + max(2, 3)
        assert_eq!(seq.positions[7], [2, 3, 4]);
        assert_eq!(seq.positions[8], [5, 5, 5]);
    }

    #[test]
    fn empty_context_prompt() {
        let cfg = ModelConfig::desk();
        let seq = assemble_prompt(&cfg, 1, 1, &[], &[]).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.target_start, 4);
    }

    #[test]
    fn overflow() {
        let cfg = ModelConfig { max_seq_len: 10, ..ModelConfig::desk() };
        let err = assemble_prompt(&cfg, 2, 3, &[0, 1], &[]).unwrap_err();
        assert!(matches!(err, ModelError::SequenceOverflow { len: 12, max: 10 }));
    }

    #[test]
    fn baseline_prompt_and_mask() {
        let cfg = ModelConfig::desk().baseline_of();
        let seq = assemble_prompt(&cfg, 1, 2, &[], &[3]).unwrap();
        assert_eq!(seq.slots, vec![Slot::Visual(0), Slot::Visual(1), Slot::Text(26), Slot::Text(3)]);
        assert_eq!(seq.target_start, 2);
        let mask = emission_mask(&cfg);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 27);
        let mask = emission_mask(&ModelConfig::desk());
        assert_eq!(mask.iter().filter(|&&m| m).count(), 28);
        assert!(mask[26] && mask[30] && !mask[29]);
        assert_eq!(baseline_char_id('c'), Some(2));
        assert_eq!(baseline_id_char(25), Some('z'));
    }
}
