mod common;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fixture_dir, fnv1a, masked, relabel, train_fonts};
use rosetta_core::datagen::{
    build_context_text, coverage_rate, covered_count, generate_dataset, irrelevant_rate, latin_lowercase, render_text,
    sample_query_text, unique_symbols, ContextText, GenParams, Generator, LoadedFont, DEFAULT_PAD,
};
use rosetta_core::tokenizer::decode_with;

#[test]
fn query_symbols_are_uniform_per_position() {
    let mut p = GenParams::new(vec!['a', 'b'], vec![], 0);
    p.query_len_range = (8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 100_000;
    let mut counts = [0usize; 8];
    for _ in 0..draws {
        for (i, c) in sample_query_text(&p, &mut rng).chars().enumerate() {
            counts[i] += usize::from(c == 'a');
        }
    }
    for (i, &n) in counts.iter().enumerate() {
        let f = n as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.01, "position {i}: {f}");
    }
}

#[test]
fn query_lengths_cover_the_range_uniformly() {
    let p = GenParams::new(latin_lowercase(), vec![], 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut hist = [0usize; 16];
    let draws = 30_000;
    for _ in 0..draws {
        hist[sample_query_text(&p, &mut rng).chars().count()] += 1;
    }
    assert_eq!(hist[0], 0);
    let expected = draws as f64 / 15.0;
    let chi2: f64 = hist[1..].iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
    // 14 degrees of freedom, 0.999 quantile
    assert!(chi2 < 36.12, "chi-square {chi2}");
}

/// Every ordered sequence of distinct symbols from `alphabet` up to `max_len`.
fn distinct_sequences(alphabet: &[char], max_len: usize) -> Vec<String> {
    fn go(alphabet: &[char], max_len: usize, cur: &mut Vec<char>, out: &mut Vec<String>) {
        out.push(cur.iter().collect());
        if cur.len() == max_len {
            return;
        }
        for &c in alphabet {
            if !cur.contains(&c) {
                cur.push(c);
                go(alphabet, max_len, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(alphabet, max_len, &mut Vec::new(), &mut out);
    out
}

#[test]
fn rates_match_brute_force_on_all_small_pairs() {
    let alphabet = ['a', 'b', 'c', 'd', 'e'];
    let contexts = distinct_sequences(&alphabet, 4);
    let mut queries = Vec::new();
    let mut level = vec![String::new()];
    for _ in 0..3 {
        level = level.iter().flat_map(|s| alphabet.iter().map(move |c| format!("{s}{c}"))).collect();
        queries.extend(level.iter().cloned());
    }
    for q in &queries {
        for c in &contexts {
            let irrelevant = c.chars().filter(|x| !q.contains(*x)).count();
            let beta = if c.is_empty() { 0.0 } else { irrelevant as f64 / c.chars().count() as f64 };
            assert_eq!(irrelevant_rate(q, c), beta, "{q} / {c}");
            let u: HashSet<char> = q.chars().collect();
            let alpha = u.iter().filter(|x| c.contains(**x)).count() as f64 / u.len() as f64;
            assert_eq!(coverage_rate(q, c), alpha, "{q} / {c}");
        }
    }
}

#[test]
fn context_composition_follows_the_controls() {
    let p = GenParams::new(latin_lowercase(), vec![], 0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5_000 {
        let query = sample_query_text(&p, &mut rng);
        let alpha: f64 = rng.gen();
        let s_add = rng.gen_range(0..=20);
        let ctx = build_context_text(&query, &p, alpha, s_add, &mut rng);
        let u = unique_symbols(&query);
        let chars: Vec<char> = ctx.text.chars().collect();
        let distinct: HashSet<char> = chars.iter().copied().collect();
        assert_eq!(distinct.len(), chars.len(), "each symbol once: {}", ctx.text);
        let covered = chars.iter().filter(|c| u.contains(c)).count();
        assert_eq!(covered, covered_count(alpha, u.len()));
        let added = chars.len() - covered;
        let expected_added = s_add.min(26 - u.len()).min(26 - covered);
        assert_eq!(added, expected_added);
        assert_eq!(ctx.alpha_actual, coverage_rate(&query, &ctx.text));
        assert_eq!(ctx.beta_actual, irrelevant_rate(&query, &ctx.text));
    }
}

#[test]
fn two_added_symbols_over_full_coverage_give_half_irrelevant() {
    let p = GenParams::new(latin_lowercase(), vec![], 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let ctx = build_context_text("ab", &p, 1.0, 2, &mut rng);
        assert_eq!(ctx.text.chars().collect::<HashSet<_>>().len(), 4);
        assert!(ctx.text.contains('a') && ctx.text.contains('b'));
        assert_eq!(ctx.beta_actual, 0.5);
        assert_eq!(ctx.alpha_actual, 1.0);
    }
}

/// Expected mean coverage over queries with at least 4 distinct symbols,
/// estimated by simulating the sampling and ceiling rules directly.
fn oracle_mean_alpha(draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut sum, mut n) = (0.0, 0usize);
    for _ in 0..draws {
        let len = rng.gen_range(1..=15);
        let u: HashSet<u8> = (0..len).map(|_| rng.gen_range(0..26u8)).collect();
        if u.len() < 4 {
            continue;
        }
        let alpha: f64 = rng.gen();
        sum += (alpha * u.len() as f64).ceil() / u.len() as f64;
        n += 1;
    }
    sum / n as f64
}

#[test]
fn mean_coverage_of_a_generated_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let p = GenParams::new(latin_lowercase(), train_fonts(), 2024);
    let manifest = generate_dataset(&p, 100, tmp.path()).unwrap();
    let alphas: Vec<f64> =
        manifest.records.iter().filter(|r| unique_symbols(&r.query_text).len() >= 4).map(|r| r.alpha).collect();
    let mean = alphas.iter().sum::<f64>() / alphas.len() as f64;
    assert!((0.40..=0.60).contains(&mean), "mean alpha {mean} over {} samples", alphas.len());
    let oracle = oracle_mean_alpha(200_000);
    // the per-sample spread of ceil(alpha u)/u is below 0.3
    let tolerance = 3.0 * 0.3 / (alphas.len() as f64).sqrt();
    assert!((mean - oracle).abs() < tolerance, "mean {mean}, oracle {oracle}");
}

#[test]
fn samples_keep_ground_truth_consistent_with_the_context() {
    let g = Generator::new(GenParams::new(latin_lowercase(), train_fonts(), 5)).unwrap();
    for i in 0..300 {
        let s = g.sample(i).unwrap();
        assert_eq!(decode_with(&s.target_tokens, &s.token_map).text, masked(&s.query_text, &s.context_text));
        assert_eq!(s.alpha_actual, coverage_rate(&s.query_text, &s.context_text));
        assert_eq!(s.beta_actual, irrelevant_rate(&s.query_text, &s.context_text));
        assert!(g.usable_fonts().contains(&s.font_id));
    }
}

#[test]
fn shuffled_context_relabels_the_targets() {
    let g = Generator::new(GenParams::new(latin_lowercase(), train_fonts(), 6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for i in 0..100 {
        let s = g.sample(i).unwrap();
        let original: Vec<char> = s.context_text.chars().collect();
        let mut perm: Vec<usize> = (0..original.len()).collect();
        perm.shuffle(&mut rng);
        let text: String = perm.iter().map(|&j| original[j]).collect();
        let ctx = ContextText { alpha_actual: s.alpha_actual, beta_actual: s.beta_actual, text };
        let t = g.assemble(s.query_text.clone(), ctx, s.font_id, s.font_size).unwrap();
        assert_eq!(t.target_tokens, relabel(&s.target_tokens, &perm));
        assert_eq!(t.query_image, s.query_image);
    }
}

#[test]
fn golden_render_of_abc() {
    let font = LoadedFont::load(fixture_dir("fonts/train").join("KaTeX_Main-Regular.ttf")).unwrap();
    let img = render_text(&font, 0, "abc", 24, DEFAULT_PAD).unwrap();
    assert_eq!((img.width(), img.height()), GOLDEN_ABC_SIZE);
    assert_eq!(fnv1a(img.as_raw()), GOLDEN_ABC_HASH);
}

const GOLDEN_ABC_SIZE: (u32, u32) = (39, 32);
const GOLDEN_ABC_HASH: u64 = 13864311978401405164;

#[test]
fn same_seed_gives_identical_datasets() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut p = GenParams::new(latin_lowercase(), train_fonts(), 77);
    p.query_len_range = (1, 6);
    generate_dataset(&p, 20, a.path()).unwrap();
    generate_dataset(&p, 20, b.path()).unwrap();
    for f in ["manifest.jsonl", "params.json", "images/000013_c.png", "images/000019_q.png"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
