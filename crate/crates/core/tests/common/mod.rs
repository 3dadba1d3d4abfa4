//! Helpers shared by the integration tests: fixture paths, independent
//! reference implementations and model probes.
#![allow(dead_code)]

use std::path::PathBuf;

use rosetta_core::datagen::list_font_files;
use rosetta_core::model::{prepare_example, Example, Fusion, Model, ModelConfig};
use rosetta_core::tokenizer::Token;

pub fn fixture_dir(sub: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(sub)
}

pub fn train_fonts() -> Vec<PathBuf> {
    list_font_files(&fixture_dir("fonts/train")).unwrap()
}

pub fn heldout_fonts() -> Vec<PathBuf> {
    list_font_files(&fixture_dir("fonts/heldout")).unwrap()
}

/// Levenshtein distance from the complete `(n+1) × (m+1)` table.
pub fn full_table_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j - 1] + cost).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Alignment step kinds, ordered by tie-break preference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Step {
    Pair,
    Delete,
    Insert,
}

/// Every alignment of `pred` against `gt` as a list of steps.
pub fn all_alignments(n: usize, m: usize) -> Vec<Vec<Step>> {
    fn go(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<Step>, out: &mut Vec<Vec<Step>>) {
        if i == n && j == m {
            out.push(cur.clone());
            return;
        }
        if i < n && j < m {
            cur.push(Step::Pair);
            go(i + 1, j + 1, n, m, cur, out);
            cur.pop();
        }
        if j < m {
            cur.push(Step::Delete);
            go(i, j + 1, n, m, cur, out);
            cur.pop();
        }
        if i < n {
            cur.push(Step::Insert);
            go(i + 1, j, n, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, 0, n, m, &mut Vec::new(), &mut out);
    out
}

fn cost<T: PartialEq>(steps: &[Step], pred: &[T], gt: &[T]) -> usize {
    let (mut i, mut j, mut c) = (0, 0, 0);
    for s in steps {
        match s {
            Step::Pair => {
                c += usize::from(pred[i] != gt[j]);
                i += 1;
                j += 1;
            }
            Step::Delete => {
                c += 1;
                j += 1;
            }
            Step::Insert => {
                c += 1;
                i += 1;
            }
        }
    }
    c
}

/// Among all minimum-cost alignments, the one whose step sequence read from
/// the end is lexicographically smallest (pairs before deletions before
/// insertions).
pub fn preferred_alignment<T: PartialEq>(pred: &[T], gt: &[T]) -> Vec<Step> {
    let owned;
    let all: &[Vec<Step>] = if pred.len() <= CACHED && gt.len() <= CACHED {
        &alignment_cache()[pred.len()][gt.len()]
    } else {
        owned = all_alignments(pred.len(), gt.len());
        &owned
    };
    let best = all.iter().map(|s| cost(s, pred, gt)).min().unwrap();
    all.iter()
        .filter(|s| cost(s, pred, gt) == best)
        .min_by(|a, b| a.iter().rev().cmp(b.iter().rev()))
        .unwrap()
        .clone()
}

const CACHED: usize = 5;

fn alignment_cache() -> &'static Vec<Vec<Vec<Vec<Step>>>> {
    static CACHE: std::sync::OnceLock<Vec<Vec<Vec<Vec<Step>>>>> = std::sync::OnceLock::new();
    CACHE.get_or_init(|| (0..=CACHED).map(|n| (0..=CACHED).map(|m| all_alignments(n, m)).collect()).collect())
}

/// `(tp, fp, fn)` for ⟨ooc⟩ read off the preferred alignment.
pub fn oracle_ooc_counts(pred: &[Token], gt: &[Token]) -> (usize, usize, usize) {
    ooc_counts_along(&preferred_alignment(pred, gt), pred, gt)
}

/// `(tp, fp, fn)` for ⟨ooc⟩ read off a given alignment.
pub fn ooc_counts_along(steps: &[Step], pred: &[Token], gt: &[Token]) -> (usize, usize, usize) {
    let (mut i, mut j) = (0, 0);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in steps {
        match s {
            Step::Pair => {
                match (pred[i].is_ooc(), gt[j].is_ooc()) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
                i += 1;
                j += 1;
            }
            Step::Delete => {
                fn_ += usize::from(gt[j].is_ooc());
                j += 1;
            }
            Step::Insert => {
                fp += usize::from(pred[i].is_ooc());
                i += 1;
            }
        }
    }
    (tp, fp, fn_)
}

/// TER after dropping ground-truth ⟨ooc⟩ positions and the predictions the
/// preferred alignment pairs with them.
pub fn oracle_ter_no_ooc(pred: &[Token], gt: &[Token]) -> Option<f64> {
    ter_no_ooc_along(&preferred_alignment(pred, gt), pred, gt)
}

/// TER excluding ⟨ooc⟩ read off a given alignment.
pub fn ter_no_ooc_along(steps: &[Step], pred: &[Token], gt: &[Token]) -> Option<f64> {
    let (mut i, mut j) = (0, 0);
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for s in steps {
        match s {
            Step::Pair => {
                if !gt[j].is_ooc() {
                    p.push(pred[i]);
                    g.push(gt[j]);
                }
                i += 1;
                j += 1;
            }
            Step::Delete => {
                if !gt[j].is_ooc() {
                    g.push(gt[j]);
                }
                j += 1;
            }
            Step::Insert => {
                p.push(pred[i]);
                i += 1;
            }
        }
    }
    (!g.is_empty()).then(|| full_table_distance(&p, &g) as f64 / g.len() as f64)
}

/// Every sequence of length `0..=max_len` over `alphabet`.
pub fn all_sequences(alphabet: &[Token], max_len: usize) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &t in alphabet {
                let mut s2: Vec<Token> = s.clone();
                s2.push(t);
                next.push(s2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Code points from several scripts, including whitespace.
pub fn symbol_pool() -> Vec<char> {
    let mut pool: Vec<char> = ('a'..='z').chain('A'..='Z').collect();
    pool.extend('α'..='ω');
    pool.extend('а'..='я');
    pool.extend('一'..='丿');
    pool.extend(['!', '?', '*', '·', ' ', '∑', '→']);
    pool
}

/// Random string of length `0..=max_len` over a random subset of the pool.
pub fn random_symbols<R: rand::Rng>(rng: &mut R, pool: &[char], subset: usize, max_len: usize) -> String {
    use rand::seq::SliceRandom;
    let chosen: Vec<char> = pool.choose_multiple(rng, subset.max(1)).copied().collect();
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| *chosen.choose(rng).unwrap()).collect()
}

/// `s` with every symbol that does not occur in `context` replaced by '*'.
pub fn masked(s: &str, context: &str) -> String {
    s.chars().map(|c| if context.contains(c) { c } else { '*' }).collect()
}

/// Distinct symbols of `context`, first occurrence first.
pub fn distinct(context: &str) -> Vec<char> {
    let mut out: Vec<char> = Vec::new();
    for c in context.chars() {
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Rewrites `context` so that its distinct symbols first occur in the order
/// `perm` (the symbol at original rank `perm[k]` gets rank `k`).
pub fn permuted_context(context: &str, perm: &[usize]) -> String {
    let d = distinct(context);
    let prefix: String = perm.iter().map(|&j| d[j]).collect();
    prefix + context
}

/// Maps label `j` to `inverse(perm)[j]`; every other token is unchanged.
pub fn relabel(tokens: &[Token], perm: &[usize]) -> Vec<Token> {
    let mut inv = vec![0; perm.len()];
    for (k, &j) in perm.iter().enumerate() {
        inv[j] = k;
    }
    tokens
        .iter()
        .map(|t| match t {
            Token::Label(l) => Token::label(inv[l.index()]),
            other => *other,
        })
        .collect()
}

/// 64-bit FNV-1a, for golden-output regressions.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn noise_image(w: u32, h: u32, seed: u64) -> image::GrayImage {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    image::GrayImage::from_fn(w, h, |_, _| image::Luma([rng.gen()]))
}

pub fn tiny_example(cfg: &ModelConfig) -> Example<f64> {
    let ctx = noise_image(30, 20, 1);
    let query = noise_image(25, 16, 2);
    let (context_ids, answer): (Vec<u32>, Vec<u32>) = match cfg.fusion {
        Fusion::Paired => (vec![0, 1, 2, 1], vec![2, 0, 26, 1]),
        Fusion::Single => (vec![], vec![3, 7, 0]),
    };
    prepare_example(cfg, &ctx, &query, &context_ids, &answer).unwrap()
}

/// Parameters with larger spread than the training init so that every
/// segment, including norm gains and biases, carries a non-trivial gradient.
pub fn spread_params(model: &Model, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut p: Vec<f64> = model.layout.init(0.3, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    p.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    p
}

/// Worst coordinate found by [`gradient_check`].
#[derive(Debug)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub coordinate: usize,
    pub segment: String,
    pub analytic: f64,
    pub checked: usize,
}

/// Central finite differences on sampled coordinates: at least one per
/// segment, then uniform draws until `count` coordinates are checked.
/// Relative error is taken against `max(|analytic|, |numeric|, 1e-3)`:
/// with a step of 1e-6 the difference quotient carries roughly 1e-9 of
/// absolute rounding noise, which swamps the relative error of gradients
/// much smaller than the floor.
pub fn gradient_check(cfg: ModelConfig, count: usize) -> GradientReport {
    use rand::{Rng, SeedableRng};
    let model = Model::new(cfg).unwrap();
    let ex = tiny_example(&model.config);
    let p = spread_params(&model, 5);
    let mut grad = vec![0.0; model.param_count()];
    let stats = model.backward(&p, &ex, &mut grad);
    assert!((stats.loss - model.loss(&p, &ex)).abs() < 1e-12);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut coords: Vec<usize> = model.layout.segments.iter().map(|s| s.offset + rng.gen_range(0..s.len())).collect();
    while coords.len() < count {
        coords.push(rng.gen_range(0..model.param_count()));
    }
    let mut worst = (0.0f64, 0usize);
    for &i in &coords {
        let h = 1e-6 * p[i].abs().max(1.0);
        let mut q = p.clone();
        q[i] = p[i] + h;
        let lp = model.loss(&q, &ex);
        q[i] = p[i] - h;
        let lm = model.loss(&q, &ex);
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad[i];
        let scale = analytic.abs().max(numeric.abs()).max(1e-3);
        let rel = (analytic - numeric).abs() / scale;
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    let seg = model.layout.segments.iter().find(|s| s.range().contains(&worst.1)).unwrap();
    GradientReport {
        max_rel_error: worst.0,
        coordinate: worst.1,
        segment: seg.name.clone(),
        analytic: grad[worst.1],
        checked: coords.len(),
    }
}

/// Perturbs each target-position embedding in turn and returns the first
/// earlier-position value (layer output or logit) that changed bitwise, or
/// a perturbation that failed to reach its own row.
pub fn causality_violation(cfg: ModelConfig) -> Option<String> {
    let model = Model::new(cfg).unwrap();
    let p: Vec<f64> = spread_params(&model, 3);
    let ex = tiny_example(&model.config);
    let visual = model.visual_tokens(&p, &ex.patches);
    let x = model.embed_sequence(&p, &ex.seq, &visual);
    let base = model.decode_embeddings(&p, &ex.seq, x.clone());
    let d = model.config.dec_dim;
    let v = model.config.vocab_size;
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    for j in ex.seq.target_start..ex.seq.len() {
        let mut moved = x.clone();
        moved[j * d..(j + 1) * d].iter_mut().enumerate().for_each(|(i, e)| *e += 0.5 + i as f64 * 0.01);
        let trace = model.decode_embeddings(&p, &ex.seq, moved);
        for (layer, (a, b)) in base.layer_outputs.iter().zip(&trace.layer_outputs).enumerate() {
            if !same(&a[..j * d], &b[..j * d]) {
                return Some(format!("layer {layer} changed before perturbed row {j}"));
            }
            if a[j * d..(j + 1) * d] == b[j * d..(j + 1) * d] {
                return Some(format!("layer {layer} ignored perturbed row {j}"));
            }
        }
        if !same(&base.logits[..j * v], &trace.logits[..j * v]) {
            return Some(format!("logits changed before perturbed row {j}"));
        }
    }
    None
}
