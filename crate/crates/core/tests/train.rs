use std::path::PathBuf;

use rosetta_core::datagen::{list_font_files, GenParams};
use rosetta_core::model::{load_checkpoint, Checkpoint, Model, ModelConfig};
use rosetta_core::train::*;

fn fonts(n: usize) -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fonts/train");
    list_font_files(&dir).unwrap().into_iter().take(n).collect()
}

fn small_config(steps: u64) -> TrainConfig {
    let mut gen = GenParams::new("abcdef".chars().collect(), fonts(2), 7);
    gen.query_len_range = (1, 4);
    gen.s_add_range = (0, 2);
    gen.font_size_range = (20, 22);
    let mut cfg = TrainConfig::new(ModelConfig::tiny(), gen, steps, 11);
    cfg.batch_size = 3;
    cfg.learning_rate = 1e-3;
    cfg
}

#[test]
fn adamw_matches_hand_computed_trajectory() {
    // f(p) = (p - 3)^2 / 2, p0 = 1, lr 0.1, wd 0.01, default betas/eps
    let expected = [1.0989999995, 1.1977365527636898, 1.296087947722773];
    let mut opt = AdamW::<f64>::new(1, AdamParams::default());
    let mut p = [1.0];
    for want in expected {
        let g = [p[0] - 3.0];
        opt.update(&mut p, &g, 0.1, 0.01);
        assert!((p[0] - want).abs() < 1e-14, "{} vs {want}", p[0]);
    }
    assert_eq!(opt.t, 3);
}

#[test]
fn zero_gradient_only_decays() {
    let mut opt = AdamW::<f64>::new(3, AdamParams::default());
    let mut p = vec![2.0, -1.0, 0.25];
    let init = p.clone();
    let (lr, wd) = (0.05, 0.01);
    for k in 1..=4 {
        opt.update(&mut p, &[0.0; 3], lr, wd);
        for (a, b) in p.iter().zip(&init) {
            assert!((a - b * (1.0 - lr * wd).powi(k)).abs() < 1e-15);
        }
    }
}

#[test]
fn fixed_batches_cover_each_epoch() {
    let mut seen: Vec<usize> = (0..4).flat_map(|s| fixed_batch_indices(8, 4, 3, s)).collect();
    assert_eq!(seen.len(), 16);
    let (first, second) = seen.split_at_mut(8);
    first.sort_unstable();
    second.sort_unstable();
    assert_eq!(first, (0..8).collect::<Vec<_>>().as_slice());
    assert_eq!(second, first);
    assert_eq!(fixed_batch_indices(8, 4, 3, 1), fixed_batch_indices(8, 4, 3, 1));
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(0);
    let out = fit(&cfg, dir.path(), None).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(std::fs::read_to_string(&out.log).unwrap(), format!("{LOSS_HEADER}\n"));
    let ckpt: Checkpoint<f64> = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.params, Model::new(cfg.model.clone()).unwrap().init_params::<f64>(cfg.seed));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = TrainConfig { checkpoint_every: 2, ..small_config(5) };
    let full = tempfile::tempdir().unwrap();
    let a = fit(&cfg, full.path(), None).unwrap();
    assert_eq!(a.records.len(), 5);

    let part = tempfile::tempdir().unwrap();
    let cut = TrainConfig { checkpoint_every: 2, ..small_config(5) };
    fit(&cut, part.path(), None).unwrap();
    // restart from the step-2 checkpoint with a truncated history
    let resumed = fit(&cut, part.path(), Some(&part.path().join("checkpoints/step_000002.ckpt"))).unwrap();
    assert_eq!(resumed.records.len(), 3);
    assert_eq!(std::fs::read(&a.log).unwrap(), std::fs::read(&resumed.log).unwrap());
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&resumed.checkpoint).unwrap());
}

#[test]
fn fixed_dataset_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { fixed_dataset: Some(3), learning_rate: 3e-3, ..small_config(30) };
    let out = fit(&cfg, dir.path(), None).unwrap();
    let first = out.records[0].loss;
    let last = out.records.last().unwrap().loss;
    assert!(last < first * 0.7, "{first} -> {last}");
    assert_eq!(read_loss_log(&out.log).unwrap(), out.records);
}

#[test]
fn training_is_deterministic_in_64_bit() {
    let cfg = small_config(3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = fit(&cfg, a.path(), None).unwrap();
    let rb = fit(&cfg, b.path(), None).unwrap();
    assert_eq!(std::fs::read(&ra.log).unwrap(), std::fs::read(&rb.log).unwrap());
    assert_eq!(std::fs::read(&ra.checkpoint).unwrap(), std::fs::read(&rb.checkpoint).unwrap());
}

#[test]
fn schedule_reaches_zero_at_total_steps() {
    assert_eq!(cosine_multiplier(0, 7), 1.0);
    assert!(cosine_multiplier(7, 7) < 1e-15);
    let out = {
        let dir = tempfile::tempdir().unwrap();
        fit(&small_config(4), dir.path(), None).unwrap()
    };
    assert_eq!(out.records[0].lr, 1e-3);
    assert!(out.records.windows(2).all(|w| w[1].lr < w[0].lr));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, ..small_config(1) };
    assert!(matches!(fit(&cfg, dir.path(), None), Err(TrainError::InvalidConfig(_))));
    let cfg = TrainConfig { batch_size: 0, ..small_config(1) };
    assert!(matches!(fit(&cfg, dir.path(), None), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn resume_rejects_other_model_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&small_config(0), dir.path(), None).unwrap();
    let other = TrainConfig { model: ModelConfig { dec_layers: 2, ..ModelConfig::tiny() }, ..small_config(1) };
    let err = fit(&other, dir.path(), Some(&out.checkpoint)).unwrap_err();
    assert!(matches!(err, TrainError::Model(rosetta_core::model::ModelError::ConfigMismatch(_))), "{err}");
}
