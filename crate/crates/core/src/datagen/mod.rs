//! Synthetic context/query sample generation.
//!
//! A sample pairs a random query string with a context string whose overlap
//! with the query is controlled by the coverage rate `alpha` and the number of
//! added irrelevant symbols `s_add`. Both strings are rendered with the same
//! font, and the query's target tokens are derived through the context's
//! token map.

mod dataset;
mod render;

use std::collections::HashSet;
use std::path::PathBuf;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{self, TokenMap, TokenSeq, TokenizerError, DEFAULT_LABEL_COUNT};

pub use dataset::{generate_dataset, load_dataset, read_png, write_atomic, DatasetManifest, ManifestRecord, FORMAT_VERSION};
pub use render::{list_font_files, render_text, LoadedFont, DEFAULT_PAD};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("font {font_id} has no glyph for {symbol:?}")]
    MissingGlyph { symbol: char, font_id: usize },
    #[error("{0}: not a usable font file")]
    InvalidFont(PathBuf),
    #[error("no font covers the alphabet")]
    NoUsableFont,
    #[error("alphabet is empty")]
    EmptyAlphabet,
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

/// Generation controls. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub alphabet: Vec<char>,
    pub fonts: Vec<PathBuf>,
    pub query_len_range: (usize, usize),
    pub alpha_range: (f64, f64),
    pub s_add_range: (usize, usize),
    pub font_size_range: (u32, u32),
    pub seed: u64,
    #[serde(default = "default_label_count")]
    pub label_count: usize,
    /// Repeat each context symbol once or twice instead of exactly once.
    #[serde(default)]
    pub context_repeats: bool,
    /// Evaluation only: draw queries from this word list instead of random strings.
    #[serde(default)]
    pub word_list: Option<PathBuf>,
    #[serde(default = "default_pad")]
    pub pad: u32,
}

fn default_label_count() -> usize {
    DEFAULT_LABEL_COUNT
}

fn default_pad() -> u32 {
    DEFAULT_PAD
}

pub fn latin_lowercase() -> Vec<char> {
    ('a'..='z').collect()
}

impl GenParams {
    pub fn new(alphabet: Vec<char>, fonts: Vec<PathBuf>, seed: u64) -> Self {
        GenParams {
            alphabet,
            fonts,
            query_len_range: (1, 15),
            alpha_range: (0.0, 1.0),
            s_add_range: (0, 20),
            font_size_range: (20, 30),
            seed,
            label_count: DEFAULT_LABEL_COUNT,
            context_repeats: false,
            word_list: None,
            pad: DEFAULT_PAD,
        }
    }

    /// Evaluation presets for the three test-set archetypes.
    pub fn for_archetype(archetype: Archetype, fonts: Vec<PathBuf>, word_list: Option<PathBuf>, seed: u64) -> Self {
        let mut p = GenParams::new(latin_lowercase(), fonts, seed);
        p.word_list = word_list;
        if archetype == Archetype::NewAlphabet {
            // alphabet is replaced by the word list's symbols in Generator::new
            p.alphabet.clear();
        }
        p
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidParams(m.to_string()));
        let (lo, hi) = self.query_len_range;
        if lo < 1 || lo > hi {
            return bad("query_len_range must satisfy 1 <= lo <= hi");
        }
        let (a0, a1) = self.alpha_range;
        if !(0.0..=1.0).contains(&a0) || !(0.0..=1.0).contains(&a1) || a0 > a1 {
            return bad("alpha_range must lie in [0, 1] with lo <= hi");
        }
        if self.s_add_range.0 > self.s_add_range.1 {
            return bad("s_add_range lo > hi");
        }
        let (f0, f1) = self.font_size_range;
        if f0 == 0 || f0 > f1 {
            return bad("font_size_range must satisfy 1 <= lo <= hi");
        }
        if self.label_count == 0 {
            return bad("label_count must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Archetype {
    /// Latin words in unseen fonts.
    UnseenText,
    /// Latin words in fonts that draw letters as abstract symbols.
    UnseenSymbols,
    /// Words in other scripts; the alphabet comes from the word list.
    NewAlphabet,
}

/// Independent per-sample seed so samples can be generated in any order.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(index))
}

pub fn sample_query_text<R: Rng>(params: &GenParams, rng: &mut R) -> String {
    assert!(!params.alphabet.is_empty(), "alphabet must be nonempty");
    let (lo, hi) = params.query_len_range;
    let len = rng.gen_range(lo..=hi);
    (0..len)
        .map(|_| params.alphabet[rng.gen_range(0..params.alphabet.len())])
        .collect()
}

/// Distinct symbols in order of first appearance.
pub fn unique_symbols(text: &str) -> Vec<char> {
    let mut seen = HashSet::new();
    text.chars().filter(|c| seen.insert(*c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextText {
    pub text: String,
    pub alpha_actual: f64,
    pub beta_actual: f64,
}

/// Fraction of the query's distinct symbols present in the context.
pub fn coverage_rate(query: &str, context: &str) -> f64 {
    let u = unique_symbols(query);
    if u.is_empty() {
        return 0.0;
    }
    let ctx: HashSet<char> = context.chars().collect();
    u.iter().filter(|c| ctx.contains(c)).count() as f64 / u.len() as f64
}

/// Fraction of the context's distinct symbols absent from the query; 0 for
/// an empty context.
pub fn irrelevant_rate(query: &str, context: &str) -> f64 {
    let uc = unique_symbols(context);
    if uc.is_empty() {
        return 0.0;
    }
    let q: HashSet<char> = query.chars().collect();
    uc.iter().filter(|c| !q.contains(c)).count() as f64 / uc.len() as f64
}

/// Number of covered symbols for a requested coverage rate: `ceil(alpha * n)`.
pub fn covered_count(alpha: f64, unique: usize) -> usize {
    // tolerate representation error such as 0.3 * 10 = 3.0000000000000004
    let x = alpha * unique as f64;
    let c = (x - 1e-9).ceil().max(0.0) as usize;
    c.min(unique)
}

pub fn build_context_text<R: Rng>(query: &str, params: &GenParams, alpha: f64, s_add: usize, rng: &mut R) -> ContextText {
    let unique = unique_symbols(query);
    let n_cov = covered_count(alpha, unique.len());
    let mut covered: Vec<char> = unique.choose_multiple(rng, n_cov).copied().collect();

    let in_query: HashSet<char> = unique.iter().copied().collect();
    let others: Vec<char> = params.alphabet.iter().copied().filter(|c| !in_query.contains(c)).collect();
    let budget = params.label_count.saturating_sub(n_cov);
    let s_add = s_add.min(others.len()).min(budget);
    covered.extend(others.choose_multiple(rng, s_add).copied());

    let mut symbols = covered;
    if params.context_repeats {
        let extra: Vec<char> = symbols.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        symbols.extend(extra);
    }
    symbols.shuffle(rng);
    let text: String = symbols.into_iter().collect();
    ContextText {
        alpha_actual: coverage_rate(query, &text),
        beta_actual: irrelevant_rate(query, &text),
        text,
    }
}

/// Context symbols separated by one space for rendering.
pub fn spaced(text: &str) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    for (i, c) in text.chars().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub query_image: GrayImage,
    pub context_image: GrayImage,
    pub query_text: String,
    pub context_text: String,
    pub context_tokens: TokenSeq,
    pub target_tokens: TokenSeq,
    pub token_map: TokenMap,
    pub alpha_actual: f64,
    pub beta_actual: f64,
    pub font_id: usize,
    pub font_size: u32,
}

/// Fonts plus (optional) word list, ready to produce samples.
#[derive(Debug)]
pub struct Generator {
    params: GenParams,
    fonts: Vec<Option<LoadedFont>>,
    usable: Vec<usize>,
    words: Option<Vec<String>>,
    excluded: Vec<(usize, Vec<char>)>,
}

impl Generator {
    pub fn new(mut params: GenParams) -> Result<Self, GenError> {
        params.validate()?;
        let words = match &params.word_list {
            Some(path) => Some(load_word_list(path)?),
            None => None,
        };
        if let Some(words) = &words {
            if params.alphabet.is_empty() {
                let mut all: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();
                all.sort_unstable();
                all.dedup();
                params.alphabet = all;
            }
        }
        if params.alphabet.is_empty() {
            return Err(GenError::EmptyAlphabet);
        }
        let words = words.map(|ws| {
            let alpha: HashSet<char> = params.alphabet.iter().copied().collect();
            let (lo, hi) = params.query_len_range;
            let kept: Vec<String> = ws
                .into_iter()
                .filter(|w| {
                    let n = w.chars().count();
                    n >= lo && n <= hi && w.chars().all(|c| alpha.contains(&c))
                })
                .collect();
            kept
        });
        if words.as_ref().is_some_and(|w| w.is_empty()) {
            return Err(GenError::InvalidParams("word list has no usable entries".into()));
        }

        let mut fonts = Vec::with_capacity(params.fonts.len());
        let mut usable = Vec::new();
        let mut excluded = Vec::new();
        for (id, path) in params.fonts.iter().enumerate() {
            let font = LoadedFont::load(path)?;
            let missing = font.missing_glyphs(&params.alphabet);
            if missing.is_empty() {
                usable.push(id);
                fonts.push(Some(font));
            } else {
                log::warn!("excluding {} (missing {} glyphs)", path.display(), missing.len());
                excluded.push((id, missing));
                fonts.push(None);
            }
        }
        if usable.is_empty() {
            return Err(GenError::NoUsableFont);
        }
        Ok(Generator { params, fonts, usable, words, excluded })
    }

    pub fn params(&self) -> &GenParams {
        &self.params
    }

    /// Font ids that passed the coverage scan.
    pub fn usable_fonts(&self) -> &[usize] {
        &self.usable
    }

    pub fn excluded_fonts(&self) -> &[(usize, Vec<char>)] {
        &self.excluded
    }

    pub fn font(&self, font_id: usize) -> Option<&LoadedFont> {
        self.fonts.get(font_id).and_then(|f| f.as_ref())
    }

    /// Sample `index` of the stream seeded by `params.seed`.
    pub fn sample(&self, index: u64) -> Result<RenderedSample, GenError> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.params.seed, index));
        self.make_sample(&mut rng)
    }

    pub fn make_sample<R: Rng>(&self, rng: &mut R) -> Result<RenderedSample, GenError> {
        let p = &self.params;
        let query = match &self.words {
            Some(words) => words[rng.gen_range(0..words.len())].clone(),
            None => sample_query_text(p, rng),
        };
        let alpha = rng.gen_range(p.alpha_range.0..=p.alpha_range.1);
        let s_add = rng.gen_range(p.s_add_range.0..=p.s_add_range.1);
        let ctx = build_context_text(&query, p, alpha, s_add, rng);
        let font_id = self.usable[rng.gen_range(0..self.usable.len())];
        let size = rng.gen_range(p.font_size_range.0..=p.font_size_range.1);
        self.assemble(query, ctx, font_id, size)
    }

    /// Renders and tokenizes a fixed (query, context) pair.
    pub fn assemble(&self, query: String, ctx: ContextText, font_id: usize, size: u32) -> Result<RenderedSample, GenError> {
        let font = self.font(font_id).ok_or_else(|| GenError::InvalidParams(format!("font {font_id} is not usable")))?;
        let query_image = render_text(font, font_id, &query, size, self.params.pad)?;
        let context_image = render_text(font, font_id, &spaced(&ctx.text), size, self.params.pad)?;
        let (context_tokens, token_map) = tokenizer::encode_context(&ctx.text, self.params.label_count)?;
        let target_tokens = tokenizer::encode_with(&query, &token_map);
        Ok(RenderedSample {
            query_image,
            context_image,
            query_text: query,
            context_text: ctx.text,
            context_tokens,
            target_tokens,
            token_map,
            alpha_actual: ctx.alpha_actual,
            beta_actual: ctx.beta_actual,
            font_id,
            font_size: size,
        })
    }
}

pub fn load_word_list(path: &std::path::Path) -> Result<Vec<String>, GenError> {
    let text = std::fs::read_to_string(path).map_err(|source| GenError::Io { path: path.to_path_buf(), source })?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).filter(|l| !l.is_empty()).collect())
}
