//! `rosetta`: dataset generation, training, evaluation and reporting.

mod config;
mod error;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use rosetta_core::datagen::{self, write_atomic, Archetype, GenParams, LoadedFont};
use rosetta_core::eval::{self, LoadedModel};
use rosetta_core::model::{ModelConfig, Precision};
use rosetta_core::train::{self, TrainConfig};

use config::{layered, read_alphabet};
use error::{CliError, EXIT_OK, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "rosetta", version, about = "Context-aware OCR with in-context token maps")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all outputs of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "ROSETTA_THREADS")]
    threads: Option<usize>,
    /// JSON config file layered between built-in defaults and flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a font directory and report fonts lacking alphabet glyphs.
    FontsScan(FontsScanArgs),
    /// Generate a dataset of rendered context/query pairs.
    Gen(GenArgs),
    /// Train a model on streamed or fixed generated samples.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Score a checkpoint and aggregate metrics into alpha and beta bins.
    Sweep(EvalArgs),
    /// Compare a contextual checkpoint with the OCR baseline.
    Compare(CompareArgs),
    /// Render SVG charts and a summary table from a metrics CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct FontsScanArgs {
    #[arg(long)]
    fonts: PathBuf,
    /// Alphabet file; every non-whitespace character is a symbol.
    #[arg(long)]
    alphabet: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchetypeArg {
    UnseenText,
    UnseenSymbols,
    NewAlphabet,
}

impl From<ArchetypeArg> for Archetype {
    fn from(a: ArchetypeArg) -> Self {
        match a {
            ArchetypeArg::UnseenText => Archetype::UnseenText,
            ArchetypeArg::UnseenSymbols => Archetype::UnseenSymbols,
            ArchetypeArg::NewAlphabet => Archetype::NewAlphabet,
        }
    }
}

/// Generator flags shared by `gen` and `train`.
#[derive(Debug, Args)]
struct GenFlags {
    /// Directory of TrueType/OpenType fonts.
    #[arg(long)]
    fonts: Option<PathBuf>,
    /// Alphabet file (default: a-z).
    #[arg(long)]
    alphabet: Option<PathBuf>,
    #[arg(long)]
    query_len_min: Option<usize>,
    #[arg(long)]
    query_len_max: Option<usize>,
    #[arg(long)]
    alpha_min: Option<f64>,
    #[arg(long)]
    alpha_max: Option<f64>,
    #[arg(long)]
    s_add_min: Option<usize>,
    #[arg(long)]
    s_add_max: Option<usize>,
    /// Let context symbols repeat.
    #[arg(long)]
    context_repeats: bool,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    count: usize,
    /// Evaluation preset.
    #[arg(long, value_enum)]
    archetype: Option<ArchetypeArg>,
    /// Word list replacing random query strings.
    #[arg(long)]
    word_list: Option<PathBuf>,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Tiny,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Write an intermediate checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Train on the first N generated samples only.
    #[arg(long)]
    fixed_dataset: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, value_enum, default_value = "desk")]
    model: PresetArg,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Train the context-free OCR baseline instead.
    #[arg(long)]
    baseline: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Contextual model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Baseline model checkpoint.
    #[arg(long)]
    baseline: PathBuf,
    /// Dataset directory with full coverage (alpha = 1).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metrics CSV written by `eval` or `sweep`.
    #[arg(long)]
    metrics: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {}", e.diagnostic());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let out = cli.out.clone().ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    let seed = cli.seed;
    let file = cli.config.as_deref();
    match cli.command {
        Command::FontsScan(a) => fonts_scan(&a, &out),
        Command::Gen(a) => gen(&a, seed, file, &out),
        Command::Train(a) => train(&a, seed, file, &out),
        Command::Eval(a) => evaluate(&a, &out, false),
        Command::Sweep(a) => evaluate(&a, &out, true),
        Command::Compare(a) => compare(&a, &out),
        Command::Report(a) => report(&a, &out),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn font_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let files = datagen::list_font_files(dir)?;
    if files.is_empty() {
        return Err(CliError::NoFonts(dir.to_path_buf()));
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn fonts_scan(a: &FontsScanArgs, out: &Path) -> Result<(), CliError> {
    let files = font_files(&a.fonts)?;
    let alphabet = match &a.alphabet {
        Some(path) => read_alphabet(path)?,
        None => datagen::latin_lowercase(),
    };
    let mut index = String::from("font_id\tfilename\n");
    let mut coverage = String::from("font_id\tfilename\tmissing\n");
    let mut failing = 0;
    for (id, path) in files.iter().enumerate() {
        let name = file_name(path);
        let _ = writeln!(index, "{id}\t{name}");
        let missing = LoadedFont::load(path)?.missing_glyphs(&alphabet);
        if !missing.is_empty() {
            failing += 1;
            let _ = writeln!(coverage, "{id}\t{name}\t{}", missing.iter().collect::<String>());
        }
    }
    create_dir(out)?;
    write_atomic(&out.join("font_index.tsv"), index.as_bytes())?;
    write_atomic(&out.join("coverage_report.tsv"), coverage.as_bytes())?;
    println!("{} fonts scanned, {} cover the alphabet, {failing} lack glyphs", files.len(), files.len() - failing);
    Ok(())
}

fn gen_overrides(g: &GenFlags, seed: Option<u64>) -> Result<Map<String, Value>, CliError> {
    let mut m = Map::new();
    if let Some(dir) = &g.fonts {
        m.insert("fonts".into(), json!(font_files(dir)?));
    }
    if let Some(path) = &g.alphabet {
        m.insert("alphabet".into(), json!(read_alphabet(path)?));
    }
    let pair = |lo: Option<Value>, hi: Option<Value>, m: &mut Map<String, Value>, key: &str| {
        if lo.is_some() || hi.is_some() {
            m.insert(key.into(), json!({"lo": lo, "hi": hi}));
        }
    };
    pair(g.query_len_min.map(Value::from), g.query_len_max.map(Value::from), &mut m, "query_len_range");
    pair(g.alpha_min.map(Value::from), g.alpha_max.map(Value::from), &mut m, "alpha_range");
    pair(g.s_add_min.map(Value::from), g.s_add_max.map(Value::from), &mut m, "s_add_range");
    if g.context_repeats {
        m.insert("context_repeats".into(), json!(true));
    }
    if let Some(s) = seed {
        m.insert("seed".into(), json!(s));
    }
    Ok(m)
}

/// Range flags arrive as `{lo, hi}` objects; folds them into the `[lo, hi]`
/// arrays the parameter structs serialize to, keeping unset ends.
fn apply_ranges(value: &Value, overrides: &mut Map<String, Value>) {
    for key in ["query_len_range", "alpha_range", "s_add_range"] {
        let Some(Value::Object(r)) = overrides.remove(key) else { continue };
        let current = value.get(key).cloned().unwrap_or(Value::Null);
        let pick = |name: &str, idx: usize| match r.get(name) {
            Some(v) if !v.is_null() => v.clone(),
            _ => current.get(idx).cloned().unwrap_or(Value::Null),
        };
        overrides.insert(key.into(), json!([pick("lo", 0), pick("hi", 1)]));
    }
}

fn gen_params(defaults: GenParams, g: &GenFlags, seed: Option<u64>, file: Option<&Path>, section: Option<&str>) -> Result<GenParams, CliError> {
    let mut value = serde_json::to_value(&defaults).expect("params serialize");
    if let Some(path) = file {
        let mut cfg = config::read_config_file(path)?;
        if let Some(key) = section {
            cfg = cfg.get(key).cloned().unwrap_or_else(|| json!({}));
        }
        config::merge(&mut value, cfg);
    }
    let mut overrides = gen_overrides(g, seed)?;
    apply_ranges(&value, &mut overrides);
    config::merge(&mut value, Value::Object(overrides));
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid generator parameters: {e}")))
}

fn print_config(name: &str, value: &impl serde::Serialize) {
    eprintln!("{name} configuration:\n{}", serde_json::to_string_pretty(value).expect("config serializes"));
}

fn gen(a: &GenArgs, seed: Option<u64>, file: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let defaults = match a.archetype {
        Some(arch) => GenParams::for_archetype(arch.into(), vec![], a.word_list.clone(), 0),
        None => {
            let mut p = GenParams::new(datagen::latin_lowercase(), vec![], 0);
            p.word_list = a.word_list.clone();
            p
        }
    };
    let params = gen_params(defaults, &a.gen, seed, file, None)?;
    print_config("generator", &params);
    let manifest = datagen::generate_dataset(&params, a.count, out)?;
    println!("wrote {} samples to {}", manifest.records.len(), out.display());
    Ok(())
}

fn train(a: &TrainArgs, seed: Option<u64>, file: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut model = match a.model {
        PresetArg::Desk => ModelConfig::desk(),
        PresetArg::Tiny => ModelConfig::tiny(),
    };
    if a.baseline {
        model = model.baseline_of();
    }
    let gen_defaults = GenParams::new(datagen::latin_lowercase(), vec![], 0);
    let params = gen_params(gen_defaults, &a.gen, seed, file, Some("gen_params"))?;
    let defaults = TrainConfig::new(model, params.clone(), 0, 0);

    let mut flags = Map::new();
    flags.insert("gen_params".into(), serde_json::to_value(&params).expect("params serialize"));
    let mut set = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            flags.insert(k.into(), v);
        }
    };
    set("total_steps", a.steps.map(Value::from));
    set("batch_size", a.batch_size.map(Value::from));
    set("learning_rate", a.lr.map(Value::from));
    set("weight_decay", a.weight_decay.map(Value::from));
    set("checkpoint_every", a.checkpoint_every.map(Value::from));
    set("fixed_dataset", a.fixed_dataset.map(Value::from));
    set("grad_clip", a.grad_clip.map(Value::from));
    set("seed", seed.map(Value::from));
    if let Some(p) = a.precision {
        let p = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
        flags.insert("model".into(), json!({"precision": p}));
    }
    let cfg: TrainConfig = layered(&defaults, file, flags)?;
    print_config("training", &cfg);
    let outcome = train::fit(&cfg, out, a.resume.as_deref())?;
    match outcome.records.last() {
        Some(r) => println!("step {} loss {:.4} token_acc {:.4}; checkpoint {}", r.step, r.loss, r.token_acc, outcome.checkpoint.display()),
        None => println!("no steps run; checkpoint {}", outcome.checkpoint.display()),
    }
    Ok(())
}

fn evaluate(a: &EvalArgs, out: &Path, binned: bool) -> Result<(), CliError> {
    let model = LoadedModel::load(&a.checkpoint)?;
    let manifest = datagen::load_dataset(&a.data)?;
    let records = if binned {
        let s = eval::sweep(&model, &manifest, out)?;
        print!("{}", eval::bins_csv(&s.alpha_bins));
        s.records
    } else {
        let scored = eval::evaluate(&model, &manifest)?;
        let (predictions, records): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
        create_dir(out)?;
        write_atomic(&out.join("metrics.csv"), eval::metrics_csv(&records).as_bytes())?;
        let mut tsv = String::from("sample_id\tprediction\tout_of_range\n");
        for p in &predictions {
            let _ = writeln!(tsv, "{}\t{}\t{}", p.sample_id, p.text, p.out_of_range);
        }
        write_atomic(&out.join("predictions.tsv"), tsv.as_bytes())?;
        records
    };
    let n = records.len().max(1) as f64;
    let mean = |f: fn(&eval::MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    println!("samples {} mean_cer {:.4} mean_ter {:.4}", records.len(), mean(|r| r.cer), mean(|r| r.ter));
    Ok(())
}

fn compare(a: &CompareArgs, out: &Path) -> Result<(), CliError> {
    let contextual = LoadedModel::load(&a.checkpoint)?;
    let baseline = LoadedModel::load(&a.baseline)?;
    let manifest = datagen::load_dataset(&a.data)?;
    let rows = eval::compare_baseline(&contextual, &baseline, &manifest, out)?;
    print!("{}", eval::comparison_table(&rows));
    Ok(())
}

fn report(a: &ReportArgs, out: &Path) -> Result<(), CliError> {
    let records = eval::read_metrics_csv(&a.metrics)?;
    let written = eval::render_report(&records, out)?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}
