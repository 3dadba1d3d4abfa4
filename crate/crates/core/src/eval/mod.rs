//! Metrics, α/β sweeps, baseline comparison and reports.
//!
//! Per-sample CER/TER are averaged within a bin (macro); ⟨ooc⟩ F1 is
//! computed from counts summed over the bin (micro).

mod metrics;
mod report;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rayon::prelude::*;

use crate::datagen::{write_atomic, DatasetManifest, GenError, ManifestRecord};
use crate::model::{
    baseline_id_char, load_checkpoint, patchify_for, Checkpoint, Fusion, Model, ModelConfig, ModelError, Precision, Scalar,
};
use crate::tokenizer::{decode_with, encode_with, TokenSeq, TokenizerError, Vocab};

pub use metrics::{align, cer, edit_distance, f1_ooc, percentile, ter, ter_excluding_ooc, AlignOp, OocCounts};
pub use report::{render_report, svg_line_chart, Chart};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("checkpoint does not fit the dataset: {0}")]
    ConfigMismatch(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
}

pub const METRICS_HEADER: &str = "sample_id,alpha,beta,cer,ter,ter_no_ooc,ooc_tp,ooc_fp,ooc_fn";
pub const BINS_HEADER: &str = "axis,bin,lo,hi,count,mean_cer,mean_ter,mean_ter_no_ooc,ooc_tp,ooc_fp,ooc_fn,f1_ooc";
pub const COMPARISON_HEADER: &str = "model,mean_cer,p50,p60,p70,p80,p90,p100";
pub const PERCENTILES: [f64; 6] = [50.0, 60.0, 70.0, 80.0, 90.0, 100.0];

/// Bins `[0,.25) [.25,.5) [.5,.75) [.75,1)` and exactly `1.0`.
pub const BIN_COUNT: usize = 5;
pub const BIN_LABELS: [&str; BIN_COUNT] = ["[0,.25)", "[.25,.5)", "[.5,.75)", "[.75,1)", "1.0"];
const BIN_BOUNDS: [(f64, f64); BIN_COUNT] = [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0), (1.0, 1.0)];

pub fn bin_of(x: f64) -> usize {
    if x >= 1.0 {
        4
    } else {
        ((x.max(0.0) * 4.0).floor() as usize).min(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub sample_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub cer: f64,
    pub ter: f64,
    pub ter_no_ooc: Option<f64>,
    pub ooc: OocCounts,
}

impl MetricsRecord {
    pub fn alpha_bin(&self) -> usize {
        bin_of(self.alpha)
    }

    pub fn beta_bin(&self) -> usize {
        bin_of(self.beta)
    }

    pub fn csv_line(&self) -> String {
        let tno = self.ter_no_ooc.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.sample_id, self.alpha, self.beta, self.cer, self.ter, tno, self.ooc.tp, self.ooc.fp, self.ooc.fn_
        )
    }
}

/// Scores one prediction. `pred_text` is the decoded prediction with ⟨ooc⟩
/// shown as `*`.
pub fn score(
    sample_id: &str,
    alpha: f64,
    beta: f64,
    pred_tokens: &[crate::tokenizer::Token],
    pred_text: &str,
    gt_tokens: &[crate::tokenizer::Token],
    gt_text: &str,
) -> Result<MetricsRecord, EvalError> {
    Ok(MetricsRecord {
        sample_id: sample_id.to_string(),
        alpha,
        beta,
        cer: cer(pred_text, gt_text)?,
        ter: ter(pred_tokens, gt_tokens)?,
        ter_no_ooc: ter_excluding_ooc(pred_tokens, gt_tokens),
        ooc: f1_ooc(pred_tokens, gt_tokens),
    })
}

/// Model and parameters in the checkpoint's own precision.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    F32(Model, Vec<f32>),
    F64(Model, Vec<f64>),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let ckpt: Checkpoint<f64> = load_checkpoint(path)?;
        Self::from_checkpoint(ckpt)
    }

    pub fn from_checkpoint(ckpt: Checkpoint<f64>) -> Result<Self, EvalError> {
        let model = Model::new(ckpt.config)?;
        Ok(match model.config.precision {
            Precision::F32 => LoadedModel::F32(model, ckpt.params.iter().map(|&v| v as f32).collect()),
            Precision::F64 => LoadedModel::F64(model, ckpt.params),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedModel::F32(m, _) => &m.config,
            LoadedModel::F64(m, _) => &m.config,
        }
    }

    /// Greedy decode for one image pair; returns emitted ids.
    pub fn generate(&self, context: &GrayImage, query: &GrayImage, context_ids: &[u32]) -> Result<Vec<u32>, ModelError> {
        fn run<T: Scalar>(m: &Model, p: &[T], c: &GrayImage, q: &GrayImage, ids: &[u32]) -> Result<Vec<u32>, ModelError> {
            let patches = patchify_for::<T>(&m.config, Some(c), q);
            let ids = if m.config.fusion == Fusion::Paired { ids } else { &[] };
            m.generate(p, &patches, ids)
        }
        match self {
            LoadedModel::F32(m, p) => run(m, p, context, query, context_ids),
            LoadedModel::F64(m, p) => run(m, p, context, query, context_ids),
        }
    }

    /// Checks that the model can read samples of `manifest`.
    pub fn check_compatible(&self, manifest: &DatasetManifest) -> Result<(), EvalError> {
        let cfg = self.config();
        let label_count = manifest.generator_params.label_count;
        if cfg.fusion == Fusion::Paired && cfg.label_count != label_count {
            return Err(EvalError::ConfigMismatch(format!(
                "model has {} label tokens, dataset uses {label_count}",
                cfg.label_count
            )));
        }
        Ok(())
    }
}

/// A model's output on one dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub sample_id: String,
    pub tokens: TokenSeq,
    pub text: String,
    /// Emitted label ids with no symbol in the context.
    pub out_of_range: usize,
}

/// Runs the model on one record. Baseline characters are re-expressed in
/// the record's context tokens so that TER and ⟨ooc⟩ counts are comparable.
pub fn predict_record(model: &LoadedModel, manifest: &DatasetManifest, record: &ManifestRecord) -> Result<SamplePrediction, EvalError> {
    let label_count = manifest.generator_params.label_count;
    let map = record.token_map(label_count)?;
    let (context, query) = manifest.load_images(record)?;
    let ids = model.generate(&context, &query, &record.context_tokens)?;
    let (tokens, text, out_of_range) = match model.config().fusion {
        Fusion::Paired => {
            let tokens = Vocab::new(label_count).tokens(&ids)?;
            let d = decode_with(&tokens, &map);
            (tokens, d.text, d.out_of_range_count)
        }
        Fusion::Single => {
            let text: String = ids.iter().map(|&i| baseline_id_char(i).unwrap_or('*')).collect();
            (encode_with(&text, &map), text, 0)
        }
    };
    Ok(SamplePrediction { sample_id: record.id.clone(), tokens, text, out_of_range })
}

pub fn score_record(record: &ManifestRecord, label_count: usize, pred: &SamplePrediction) -> Result<MetricsRecord, EvalError> {
    let gt = record.target_tokens(&Vocab::new(label_count))?;
    score(&record.id, record.alpha, record.beta, &pred.tokens, &pred.text, &gt, &record.query_text)
}

/// Predictions and metrics for every record, in manifest order.
pub fn evaluate(model: &LoadedModel, manifest: &DatasetManifest) -> Result<Vec<(SamplePrediction, MetricsRecord)>, EvalError> {
    model.check_compatible(manifest)?;
    let label_count = manifest.generator_params.label_count;
    manifest
        .records
        .par_iter()
        .map(|r| {
            let pred = predict_record(model, manifest, r)?;
            let m = score_record(r, label_count, &pred)?;
            Ok((pred, m))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    Beta,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Beta => "beta",
        }
    }

    pub fn bin(self, r: &MetricsRecord) -> usize {
        match self {
            Axis::Alpha => r.alpha_bin(),
            Axis::Beta => r.beta_bin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinSummary {
    pub axis: Axis,
    pub bin: usize,
    pub count: usize,
    pub mean_cer: Option<f64>,
    pub mean_ter: Option<f64>,
    pub mean_ter_no_ooc: Option<f64>,
    pub ooc: OocCounts,
}

impl BinSummary {
    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let (lo, hi) = BIN_BOUNDS[self.bin];
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.axis.name(),
            self.bin,
            lo,
            hi,
            self.count,
            f(self.mean_cer),
            f(self.mean_ter),
            f(self.mean_ter_no_ooc),
            self.ooc.tp,
            self.ooc.fp,
            self.ooc.fn_,
            f(self.ooc.f1())
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-bin aggregates along one axis; always returns all five bins.
pub fn summarize(records: &[MetricsRecord], axis: Axis) -> Vec<BinSummary> {
    (0..BIN_COUNT)
        .map(|bin| {
            let members: Vec<&MetricsRecord> = records.iter().filter(|r| axis.bin(r) == bin).collect();
            let mut ooc = OocCounts::default();
            members.iter().for_each(|r| ooc.add(r.ooc));
            BinSummary {
                axis,
                bin,
                count: members.len(),
                mean_cer: mean(members.iter().map(|r| r.cer)),
                mean_ter: mean(members.iter().map(|r| r.ter)),
                mean_ter_no_ooc: mean(members.iter().filter_map(|r| r.ter_no_ooc)),
                ooc,
            }
        })
        .collect()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    records.iter().for_each(|r| {
        let _ = writeln!(s, "{}", r.csv_line());
    });
    s
}

pub fn bins_csv(bins: &[BinSummary]) -> String {
    let mut s = format!("{BINS_HEADER}\n");
    bins.iter().for_each(|b| {
        let _ = writeln!(s, "{}", b.csv_line());
    });
    s
}

/// Parses a metrics CSV written by [`metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    parse_metrics_csv(&text).map_err(|message| EvalError::Schema { path: path.to_path_buf(), message })
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        Some(h) => return Err(format!("expected header {METRICS_HEADER:?}, found {h:?}")),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| format!("row {}: {what}", i + 2);
            let f: Vec<&str> = line.trim_end().split(',').collect();
            if f.len() != 9 {
                return Err(bad("expected 9 fields"));
            }
            let num = |s: &str, name: &str| s.parse::<f64>().map_err(|_| bad(name));
            let count = |s: &str, name: &str| s.parse::<usize>().map_err(|_| bad(name));
            Ok(MetricsRecord {
                sample_id: f[0].to_string(),
                alpha: num(f[1], "alpha")?,
                beta: num(f[2], "beta")?,
                cer: num(f[3], "cer")?,
                ter: num(f[4], "ter")?,
                ter_no_ooc: if f[5].is_empty() { None } else { Some(num(f[5], "ter_no_ooc")?) },
                ooc: OocCounts { tp: count(f[6], "ooc_tp")?, fp: count(f[7], "ooc_fp")?, fn_: count(f[8], "ooc_fn")? },
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<MetricsRecord>,
    pub predictions: Vec<SamplePrediction>,
    pub alpha_bins: Vec<BinSummary>,
    pub beta_bins: Vec<BinSummary>,
}

/// Writes `metrics.csv`, `alpha_bins.csv`, `beta_bins.csv` and
/// `predictions.tsv` under `out`.
pub fn sweep(model: &LoadedModel, manifest: &DatasetManifest, out: &Path) -> Result<SweepOutcome, EvalError> {
    let scored = evaluate(model, manifest)?;
    let (predictions, records): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let alpha_bins = summarize(&records, Axis::Alpha);
    let beta_bins = summarize(&records, Axis::Beta);
    fs::create_dir_all(out).map_err(|source| EvalError::Io { path: out.to_path_buf(), source })?;
    write_atomic(&out.join("metrics.csv"), metrics_csv(&records).as_bytes())?;
    write_atomic(&out.join("alpha_bins.csv"), bins_csv(&alpha_bins).as_bytes())?;
    write_atomic(&out.join("beta_bins.csv"), bins_csv(&beta_bins).as_bytes())?;
    let mut tsv = String::from("sample_id\tprediction\tout_of_range\n");
    for p in &predictions {
        let _ = writeln!(tsv, "{}\t{}\t{}", p.sample_id, p.text, p.out_of_range);
    }
    write_atomic(&out.join("predictions.tsv"), tsv.as_bytes())?;
    Ok(SweepOutcome { records, predictions, alpha_bins, beta_bins })
}

/// One row of the baseline comparison; CER values are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub mean_cer: f64,
    pub percentiles: [f64; 6],
}

impl ComparisonRow {
    /// Builds a row from per-sample CER fractions.
    pub fn from_cers(model: &str, cers: &[f64]) -> Self {
        let mut sorted: Vec<f64> = cers.iter().map(|c| c * 100.0).collect();
        sorted.sort_by(f64::total_cmp);
        let mean_cer = mean(sorted.iter().copied()).unwrap_or(f64::NAN);
        let percentiles = PERCENTILES.map(|q| percentile(&sorted, q).unwrap_or(f64::NAN));
        ComparisonRow { model: model.to_string(), mean_cer, percentiles }
    }

    pub fn csv_line(&self) -> String {
        let p: Vec<String> = self.percentiles.iter().map(|v| format!("{v:.2}")).collect();
        format!("{},{:.2},{}", self.model, self.mean_cer, p.join(","))
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    rows.iter().for_each(|r| {
        let _ = writeln!(s, "{}", r.csv_line());
    });
    s
}

/// Fixed-width text rendering of the comparison table.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{:<12}{:>10}", "model", "mean CER");
    for q in PERCENTILES {
        let _ = write!(s, "{:>9}", format!("p{q}"));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<12}{:>10.2}", r.model, r.mean_cer);
        for v in r.percentiles {
            let _ = write!(s, "{v:>9.2}");
        }
        s.push('\n');
    }
    s
}

/// Compares the contextual model with the OCR baseline on a fully covered
/// dataset; writes `comparison.csv` and `comparison.txt` under `out`.
pub fn compare_baseline(
    contextual: &LoadedModel,
    baseline: &LoadedModel,
    manifest: &DatasetManifest,
    out: &Path,
) -> Result<Vec<ComparisonRow>, EvalError> {
    if let Some(r) = manifest.records.iter().find(|r| r.alpha < 1.0) {
        return Err(EvalError::InvalidDataset(format!("sample {} has alpha {} (full coverage required)", r.id, r.alpha)));
    }
    if contextual.config().fusion != Fusion::Paired || baseline.config().fusion != Fusion::Single {
        return Err(EvalError::ConfigMismatch("expected a contextual checkpoint and a baseline checkpoint".into()));
    }
    let cers = |m: &LoadedModel| -> Result<Vec<f64>, EvalError> { Ok(evaluate(m, manifest)?.into_iter().map(|(_, r)| r.cer).collect()) };
    let rows = vec![
        ComparisonRow::from_cers("baseline", &cers(baseline)?),
        ComparisonRow::from_cers("contextual", &cers(contextual)?),
    ];
    fs::create_dir_all(out).map_err(|source| EvalError::Io { path: out.to_path_buf(), source })?;
    write_atomic(&out.join("comparison.csv"), comparison_csv(&rows).as_bytes())?;
    write_atomic(&out.join("comparison.txt"), comparison_table(&rows).as_bytes())?;
    Ok(rows)
}
