//! Flat parameter storage with a named-segment index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIdx {
    pub g: usize,
    pub b: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIdx {
    pub ln1: NormIdx,
    pub qkv: LinearIdx,
    pub out: LinearIdx,
    pub ln2: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

/// Offsets of every parameter group, derived from the config alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
    pub patch_embed: LinearIdx,
    pub vit_blocks: Vec<BlockIdx>,
    pub vit_norm: NormIdx,
    pub projector: LinearIdx,
    pub embed: usize,
    pub dec_blocks: Vec<BlockIdx>,
    pub dec_norm: NormIdx,
    /// Output head, `dec_dim × vocab`, no bias.
    pub head: usize,
}

struct Builder {
    segments: Vec<Segment>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let seg = Segment { name, offset, shape, init };
        self.total += seg.len();
        self.segments.push(seg);
        offset
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIdx {
        let w = self.push(format!("{name}.weight"), vec![din, dout], Init::Normal);
        let b = self.push(format!("{name}.bias"), vec![dout], Init::Zeros);
        LinearIdx { w, b, din, dout }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormIdx {
        let g = self.push(format!("{name}.gain"), vec![dim], Init::Ones);
        let b = self.push(format!("{name}.bias"), vec![dim], Init::Zeros);
        NormIdx { g, b, dim }
    }

    fn block(&mut self, name: &str, dim: usize, hidden: usize) -> BlockIdx {
        BlockIdx {
            ln1: self.norm(&format!("{name}.ln1"), dim),
            qkv: self.linear(&format!("{name}.attn.qkv"), dim, 3 * dim),
            out: self.linear(&format!("{name}.attn.out"), dim, dim),
            ln2: self.norm(&format!("{name}.ln2"), dim),
            fc1: self.linear(&format!("{name}.mlp.fc1"), dim, hidden),
            fc2: self.linear(&format!("{name}.mlp.fc2"), hidden, dim),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut b = Builder { segments: Vec::new(), total: 0 };
        let patch_embed = b.linear("vit.patch_embed", cfg.patch_in(), cfg.vit_dim);
        let vit_blocks =
            (0..cfg.vit_layers).map(|i| b.block(&format!("vit.{i}"), cfg.vit_dim, cfg.mlp_ratio * cfg.vit_dim)).collect();
        let vit_norm = b.norm("vit.norm", cfg.vit_dim);
        let projector = b.linear("projector", cfg.vit_dim, cfg.dec_dim);
        let embed = b.push("decoder.embed".into(), vec![cfg.vocab_size, cfg.dec_dim], Init::Normal);
        let dec_blocks = (0..cfg.dec_layers)
            .map(|i| b.block(&format!("decoder.{i}"), cfg.dec_dim, cfg.mlp_ratio * cfg.dec_dim))
            .collect();
        let dec_norm = b.norm("decoder.norm", cfg.dec_dim);
        let head = b.push("decoder.head".into(), vec![cfg.dec_dim, cfg.vocab_size], Init::Normal);
        Layout {
            segments: b.segments,
            total: b.total,
            patch_embed,
            vit_blocks,
            vit_norm,
            projector,
            embed,
            dec_blocks,
            dec_norm,
            head,
        }
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Initial values: N(0, std) truncated at 2 std for weights, zeros for
    /// biases, ones for norm gains.
    pub fn init<T: Scalar>(&self, std: f64, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut data = vec![T::zero(); self.total];
        for seg in &self.segments {
            let slot = &mut data[seg.range()];
            match seg.init {
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|x| *x = T::one()),
                Init::Normal => {
                    for x in slot.iter_mut() {
                        let z: f64 = loop {
                            let z: f64 = normal.sample(&mut rng);
                            if z.abs() <= 2.0 {
                                break z;
                            }
                        };
                        *x = T::of(z * std);
                    }
                }
            }
        }
        data
    }
}
