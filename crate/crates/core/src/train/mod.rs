//! Teacher-forced training with AdamW, a cosine schedule, checkpoints and a
//! CSV loss log.
//!
//! Each step draws `batch_size` samples. In streaming mode sample `i` of step
//! `s` is generator sample `s * batch_size + i`, rendered ahead of time by a
//! producer thread feeding a bounded queue. In fixed-dataset mode the first
//! `n` generator samples are rendered once and visited in a fresh seeded
//! permutation per epoch. Per-sample gradients are computed in parallel and
//! summed in sample order, so results do not depend on the thread count.

mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{sub_seed, GenError, GenParams, Generator, RenderedSample};
use crate::model::{
    baseline_targets, load_checkpoint, prepare_example, save_checkpoint, Checkpoint, Example, Fusion, Model, ModelConfig,
    ModelError, Precision, Scalar,
};
use crate::tokenizer::Vocab;

pub use optim::{cosine_multiplier, AdamParams, AdamW};

pub const LOSS_LOG: &str = "loss.csv";
pub const LOSS_HEADER: &str = "step,lr,loss,token_acc";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step} on sample {sample}")]
    NonFiniteLoss { step: u64, sample: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("optimizer state: {0}")]
    OptimizerState(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    3e-4
}
fn default_wd() -> f64 {
    0.01
}
fn default_prefetch() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub total_steps: u64,
    /// Write `checkpoints/step_NNNNNN.ckpt` every this many steps (0: never).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Seeds parameter initialisation and fixed-dataset shuffling.
    pub seed: u64,
    pub gen_params: GenParams,
    pub model: ModelConfig,
    #[serde(default)]
    pub adam: AdamParams,
    /// Global gradient-norm clip; off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Train on the first `n` generator samples only.
    #[serde(default)]
    pub fixed_dataset: Option<usize>,
    /// Batches rendered ahead of the optimizer in streaming mode.
    #[serde(default = "default_prefetch")]
    pub prefetch: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, gen_params: GenParams, total_steps: u64, seed: u64) -> Self {
        TrainConfig {
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            total_steps,
            checkpoint_every: 0,
            seed,
            gen_params,
            model,
            adam: AdamParams::default(),
            grad_clip: None,
            fixed_dataset: None,
            prefetch: default_prefetch(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&(self.learning_rate * self.weight_decay)) {
            return bad("learning_rate * weight_decay must lie in [0, 1)");
        }
        if self.fixed_dataset == Some(0) {
            return bad("fixed_dataset must hold at least one sample");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.model.fusion == Fusion::Paired && self.model.label_count != self.gen_params.label_count {
            return bad("model and generator label counts differ");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Converts a rendered sample into a supervised example for `cfg`.
pub fn sample_example<T: Scalar>(cfg: &ModelConfig, s: &RenderedSample) -> Result<Example<T>, ModelError> {
    match cfg.fusion {
        Fusion::Paired => {
            let v = Vocab::new(cfg.label_count);
            prepare_example(cfg, &s.context_image, &s.query_image, &v.ids(&s.context_tokens), &v.ids(&s.target_tokens))
        }
        Fusion::Single => prepare_example(cfg, &s.context_image, &s.query_image, &[], &baseline_targets(&s.query_text)?),
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub token_acc: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.lr, self.loss, self.token_acc)
    }
}

/// Model, parameters and optimizer state of a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model,
    pub params: Vec<T>,
    pub opt: AdamW<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let model = Model::new(cfg.model.clone())?;
        let params = model.init_params(cfg.seed);
        let opt = AdamW::new(params.len(), cfg.adam);
        Ok(TrainState { model, params, opt })
    }

    pub fn step(&self) -> u64 {
        self.opt.t
    }

    /// One optimizer update on `batch` (`(sample id, example)` pairs) at
    /// schedule position `step`.
    pub fn train_step(&mut self, cfg: &TrainConfig, batch: &[(String, Example<T>)], step: u64) -> Result<StepRecord, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::InvalidConfig("empty batch".into()));
        }
        let model = &self.model;
        let params = &self.params;
        let per_sample: Vec<_> = batch
            .par_iter()
            .map(|(_, ex)| {
                let mut g = vec![T::zero(); params.len()];
                let stats = model.backward(params, ex, &mut g);
                (g, stats)
            })
            .collect();

        let mut grad = vec![T::zero(); params.len()];
        let (mut loss, mut correct, mut count) = (0.0, 0, 0);
        for ((id, _), (g, stats)) in batch.iter().zip(&per_sample) {
            let l = stats.loss.f64();
            if !l.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, sample: id.clone() });
            }
            loss += l;
            correct += stats.correct;
            count += stats.count;
            grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        let inv_b = T::of(1.0 / batch.len() as f64);
        grad.iter_mut().for_each(|g| *g *= inv_b);
        if let Some(clip) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
            if norm > clip {
                let s = T::of(clip / norm);
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.learning_rate * cosine_multiplier(step, cfg.total_steps);
        self.opt.update(&mut self.params, &grad, lr, cfg.weight_decay);
        Ok(StepRecord { step, lr, loss: loss / batch.len() as f64, token_acc: correct as f64 / count.max(1) as f64 })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { config: self.model.config.clone(), step: self.opt.t, params: self.params.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(path, &self.checkpoint())?;
        self.opt.save(&optimizer_path(path))
    }

    /// Restores a run from a checkpoint and its optimizer state file.
    pub fn load(cfg: &TrainConfig, path: &Path) -> Result<Self, TrainError> {
        let ckpt: Checkpoint<T> = load_checkpoint(path)?;
        if ckpt.config != cfg.model {
            return Err(ModelError::ConfigMismatch(format!("{} was trained with a different model config", path.display())).into());
        }
        let opt = AdamW::<T>::load(&optimizer_path(path))?;
        if opt.t != ckpt.step || opt.m.len() != ckpt.params.len() {
            return Err(TrainError::OptimizerState("optimizer state does not belong to this checkpoint".into()));
        }
        Ok(TrainState { model: Model::new(ckpt.config)?, params: ckpt.params, opt })
    }
}

/// Optimizer state stored next to a checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("opt")
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<StepRecord>,
}

/// Source of training batches.
enum Batches<T> {
    Fixed { examples: Vec<(String, Example<T>)>, seed: u64 },
    Stream { rx: mpsc::Receiver<Result<Vec<(String, Example<T>)>, TrainError>> },
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, epoch)));
    order
}

/// Indices of fixed-dataset samples used by `step`.
pub fn fixed_batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = step * batch as u64;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for pos in start..start + batch as u64 {
        let epoch = pos / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_order(n, seed, epoch)));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}

fn render_examples<T: Scalar>(
    gen: &Generator,
    cfg: &ModelConfig,
    indices: impl IntoParallelIterator<Item = u64>,
) -> Result<Vec<(String, Example<T>)>, TrainError> {
    indices
        .into_par_iter()
        .map(|i| {
            let s = gen.sample(i)?;
            Ok((format!("{i}"), sample_example(cfg, &s)?))
        })
        .collect()
}

fn read_log_prefix(path: &Path, before: u64) -> Result<Vec<String>, TrainError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(TrainError::Io { path: path.to_path_buf(), source }),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < before))
        .map(str::to_string)
        .collect())
}

/// Trains per `cfg`, writing `loss.csv`, periodic checkpoints and the final
/// `model.ckpt` under `out`. With `resume`, training continues from that
/// checkpoint and the log keeps its earlier rows.
pub fn fit(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    match cfg.model.precision {
        Precision::F32 => fit_typed::<f32>(cfg, out, resume),
        Precision::F64 => fit_typed::<f64>(cfg, out, resume),
    }
}

fn fit_typed<T: Scalar>(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<FitOutcome, TrainError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(out).map_err(io(out))?;
    let config_path = out.join("train_config.json");
    fs::write(&config_path, cfg.to_json()).map_err(io(&config_path))?;

    let mut state = match resume {
        Some(path) => TrainState::<T>::load(cfg, path)?,
        None => TrainState::<T>::init(cfg)?,
    };
    let start = state.step();
    let log_path = out.join(LOSS_LOG);
    let mut log_lines = read_log_prefix(&log_path, start)?;
    if resume.is_none() {
        log_lines.clear();
    }
    let mut log = fs::File::create(&log_path).map_err(io(&log_path))?;
    writeln!(log, "{LOSS_HEADER}").map_err(io(&log_path))?;
    for l in &log_lines {
        writeln!(log, "{l}").map_err(io(&log_path))?;
    }

    let ckpt_dir = out.join("checkpoints");
    let final_path = out.join(FINAL_CHECKPOINT);
    let mut records = Vec::new();
    if start < cfg.total_steps {
        let gen = Generator::new(cfg.gen_params.clone())?;
        std::thread::scope(|scope| -> Result<(), TrainError> {
            let mut batches = match cfg.fixed_dataset {
                Some(n) => Batches::Fixed { examples: render_examples(&gen, &cfg.model, 0..n as u64)?, seed: cfg.seed },
                None => {
                    let (tx, rx) = mpsc::sync_channel(cfg.prefetch.max(1));
                    let gen = &gen;
                    scope.spawn(move || {
                        for step in start..cfg.total_steps {
                            let b = cfg.batch_size as u64;
                            let batch = render_examples(gen, &cfg.model, step * b..(step + 1) * b);
                            let failed = batch.is_err();
                            if tx.send(batch).is_err() || failed {
                                break;
                            }
                        }
                    });
                    Batches::Stream { rx }
                }
            };
            for step in start..cfg.total_steps {
                let streamed;
                let selected: Vec<(String, Example<T>)>;
                let batch: &[(String, Example<T>)] = match &mut batches {
                    Batches::Fixed { examples, seed } => {
                        let idx = fixed_batch_indices(examples.len(), cfg.batch_size, *seed, step);
                        selected = idx.iter().map(|&i| examples[i].clone()).collect();
                        &selected
                    }
                    Batches::Stream { rx } => {
                        streamed = rx.recv().expect("producer sends one batch per step")?;
                        &streamed
                    }
                };
                let rec = state.train_step(cfg, batch, step)?;
                writeln!(log, "{}", rec.csv_line()).map_err(io(&log_path))?;
                if step % 10 == 0 || step + 1 == cfg.total_steps {
                    log::info!("step {} lr {:.3e} loss {:.4} acc {:.3}", rec.step, rec.lr, rec.loss, rec.token_acc);
                }
                records.push(rec);
                if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                    fs::create_dir_all(&ckpt_dir).map_err(io(&ckpt_dir))?;
                    state.save(&ckpt_dir.join(format!("step_{:06}.ckpt", step + 1)))?;
                }
            }
            Ok(())
        })?;
    }
    log.flush().map_err(io(&log_path))?;
    state.save(&final_path)?;
    Ok(FitOutcome { checkpoint: final_path, log: log_path, records })
}

/// Parses a loss log written by [`fit`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    let parse_err = |line: &str| TrainError::Parse { path: path.to_path_buf(), message: format!("bad row {line:?}") };
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(TrainError::Parse { path: path.to_path_buf(), message: "unexpected header".into() });
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(parse_err(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(line));
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| parse_err(line))?,
                lr: num(f[1])?,
                loss: num(f[2])?,
                token_acc: num(f[3])?,
            })
        })
        .collect()
}
