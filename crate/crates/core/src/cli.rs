//! The `qe` command line.
//!
//! Every command writes `run.json` (its fully resolved configuration) into
//! `--out-dir` before doing any work. Artifacts are byte-deterministic for a
//! given set of flags; wall-clock measurements go to `timing.json` only.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
use crate::data::{
    export_tsv, generate_synthetic_corpus, load_tsv, shuffled, ColumnMap, Dataset, LabelKind, LoadMode, NoisePool, Record,
    SyntheticSpec, SyntheticTask,
};
use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult, Evaluation, ResultsTable};
use crate::model::{Architecture, ModelConfig, QEModel};
use crate::trainer::{train, train_multipair, train_transfer, Grouping, Preset, TrainingConfig, TrainingReport};
use crate::vocab::{self, Vocabulary};

#[derive(Debug, Parser)]
#[command(name = "qe", version, about = "Sentence-level translation quality estimation")]
pub struct Cli {
    /// Seed for initialization, shuffling and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hyper-parameter preset: `desk` (trainable from scratch) or `paper`.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: Preset,
    /// Directory receiving run.json and all artifacts.
    #[arg(long, global = true, default_value = "qe-out")]
    pub out_dir: PathBuf,
    /// Flat `key = value` file of training and model settings; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a vocabulary from the text columns of TSV files.
    BuildVocab(BuildVocabArgs),
    /// Generate synthetic QE corpora.
    Synth(SynthArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score every row of a TSV file.
    Predict(PredictArgs),
    /// Score a model on a test set, or a file of predictions.
    Evaluate(EvaluateArgs),
    /// Train on several language pairs at once.
    Multipair(MultipairArgs),
    /// Fine-tune a trained model on another language pair.
    Transfer(TransferArgs),
    /// Transfer vs. from-scratch Pearson over training-set sizes.
    LearningCurve(LearningCurveArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildVocab(_) => "build-vocab",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Multipair(_) => "multipair",
            Command::Transfer(_) => "transfer",
            Command::LearningCurve(_) => "learning-curve",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Columns {
    #[arg(long, default_value = "src")]
    pub src_col: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_col: String,
    #[arg(long, default_value = "score")]
    pub label_col: String,
    #[arg(long, default_value = "lang_pair")]
    pub pair_col: String,
    /// Tag for rows without a language-pair column; defaults to the file
    /// name up to its first dot.
    #[arg(long)]
    pub lang_pair: Option<String>,
    #[arg(long, default_value = "hter")]
    pub label_kind: LabelKind,
    /// Skip rows with bad labels instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct ModelOpts {
    #[arg(long)]
    pub arch: Option<Architecture>,
    #[arg(long)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub eval_every_n_steps: Option<usize>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    pub eval_holdout_fraction: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, default_value = "src")]
    pub src_col: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_col: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// `key = value` corpus spec; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long = "lang-pair", default_value = "ro-en")]
    pub lang_pairs: Vec<String>,
    #[arg(long)]
    pub n_records: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Noise-rate range `lo,hi`, or a single fixed rate.
    #[arg(long)]
    pub noise: Option<String>,
    /// `hter` or `da`.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub zscore: bool,
    /// `unmapped` or `lexicon`.
    #[arg(long)]
    pub noise_pool: Option<String>,
    /// Write the last N records of each pair to `<pair>.test.tsv` and the
    /// rest to `<pair>.train.tsv`.
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Vocabulary file; built from the training text when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[command(flatten)]
    pub columns: Columns,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub training: TrainOpts,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to `<out-dir>/predictions.tsv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "src")]
    pub src_col: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_col: String,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long, requires = "test", conflicts_with = "predictions")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// TSV holding gold labels and a prediction column.
    #[arg(long, required_unless_present = "model")]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "prediction")]
    pub prediction_col: String,
    #[command(flatten)]
    pub columns: Columns,
}

#[derive(Debug, Args, Serialize)]
pub struct MultipairArgs {
    /// Training files; tags come from their language-pair column or names.
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long = "test")]
    pub tests: Vec<PathBuf>,
    #[arg(long, default_value = "all")]
    pub grouping: Grouping,
    /// Also train one model per pair and add it to the results table.
    #[arg(long)]
    pub compare_single: bool,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[command(flatten)]
    pub columns: Columns,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub training: TrainOpts,
}

#[derive(Debug, Args, Serialize)]
pub struct TransferArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Use only the first N training rows (0 = zero-shot).
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub columns: Columns,
    #[command(flatten)]
    pub training: TrainOpts,
}

#[derive(Debug, Args, Serialize)]
pub struct LearningCurveArgs {
    /// Trained model to transfer from; without it only scratch rows are produced.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Ascending training-set sizes, e.g. `0,100,200`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[command(flatten)]
    pub columns: Columns,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub training: TrainOpts,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite { .. } | Error::UndefinedCorrelation(_) | Error::Degenerate(_) => 3,
        Error::Record { source, .. } => exit_code(source),
        _ => 2,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let mut settings = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    let seed = cli.seed.unwrap_or(0);
    let training = TrainingConfig::preset(cli.preset).with_seed(seed);
    let resolved = match &cli.command {
        Command::Train(a) => Some((settings.training(training, &a.training)?, Some(settings.model(&a.model)?))),
        Command::Multipair(a) => Some((settings.training(training, &a.training)?, Some(settings.model(&a.model)?))),
        Command::LearningCurve(a) => Some((settings.training(training, &a.training)?, Some(settings.model(&a.model)?))),
        Command::Transfer(a) => {
            // The model comes from the base checkpoint; model keys in a
            // shared config file are accepted and ignored.
            settings.model(&ModelOpts::default())?;
            Some((settings.training(training, &a.training)?, None))
        }
        _ => None,
    };
    settings.finish()?;

    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    let out = Out { dir: cli.out_dir.clone() };
    let run_record = json!({
        "tool": "qe",
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": FORMAT_VERSION,
        "vocabulary_format": vocab::FORMAT_VERSION,
        "command": cli.command.name(),
        "seed": cli.seed,
        "preset": cli.preset,
        "out_dir": cli.out_dir,
        "config_file": cli.config,
        "args": &cli.command,
        "training": resolved.as_ref().map(|r| r.0),
        "model": resolved.as_ref().and_then(|r| r.1.as_ref()),
    });
    out.write("run.json", &pretty(&run_record)?)?;

    let (cfg, model) = resolved.unwrap_or((training, None));
    let model = model.unwrap_or_default();
    let steps = match &cli.command {
        Command::BuildVocab(a) => build_vocab(a, &out).map(|()| 0),
        Command::Synth(a) => synth(a, cli.seed, &out).map(|()| 0),
        Command::Train(a) => train_cmd(a, &cfg, &model, cli.preset, &out),
        Command::Predict(a) => predict(a, &out).map(|()| 0),
        Command::Evaluate(a) => evaluate_cmd(a, &out).map(|()| 0),
        Command::Multipair(a) => multipair(a, &cfg, &model, cli.preset, &out),
        Command::Transfer(a) => transfer(a, &cfg, cli.preset, &out),
        Command::LearningCurve(a) => learning_curve(a, &cfg, &model, &out),
    }?;
    let secs = started.elapsed().as_secs_f64();
    let timing = json!({
        "command": cli.command.name(),
        "wall_time_secs": secs,
        "optimizer_steps": steps,
        "seconds_per_step": if steps > 0 { Some(secs / steps as f64) } else { None },
    });
    out.write("timing.json", &pretty(&timing)?)
}

fn pretty(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

struct Out {
    dir: PathBuf,
}

impl Out {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }
}

/// Model choices resolved from defaults, config file and flags. The
/// vocabulary size is filled in once the vocabulary is known.
#[derive(Clone, Debug, Serialize)]
struct ResolvedModel {
    architecture: Architecture,
    pooling: Pooling,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    d_ff: usize,
    max_seq_len: usize,
}

impl Default for ResolvedModel {
    fn default() -> Self {
        let desk = EncoderConfig::desk(0);
        ResolvedModel {
            architecture: Architecture::Mono,
            pooling: Architecture::Mono.default_pooling(),
            d_model: desk.d_model,
            n_heads: desk.n_heads,
            n_layers: desk.n_layers,
            d_ff: desk.d_ff,
            max_seq_len: desk.max_seq_len,
        }
    }
}

impl ResolvedModel {
    fn config(&self, vocab_size: usize) -> ModelConfig {
        let encoder = EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        };
        ModelConfig::new(self.architecture, encoder).with_pooling(self.pooling)
    }
}

/// `key = value` settings from `--config`; consumed keys are removed so that
/// leftovers can be reported as unknown.
#[derive(Default)]
struct Settings {
    path: PathBuf,
    values: BTreeMap<String, (usize, String)>,
}

impl Settings {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}: line {}: expected key = value", path.display(), i + 1)))?;
            values.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        Ok(Settings { path: path.to_path_buf(), values })
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let from_file = match self.values.remove(key) {
            Some((line, v)) => Some(v.parse().map_err(|_| {
                Error::Config(format!("{}: line {line}: invalid value `{v}` for `{key}`", self.path.display()))
            })?),
            None => None,
        };
        Ok(flag.or(from_file))
    }

    fn training(&mut self, mut cfg: TrainingConfig, o: &TrainOpts) -> Result<TrainingConfig> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.take(stringify!($field), o.$field)? {
                    cfg.$field = v;
                }
            };
        }
        set!(epochs);
        set!(learning_rate);
        set!(batch_size);
        set!(warmup_fraction);
        set!(eval_every_n_steps);
        set!(early_stop_patience);
        set!(eval_holdout_fraction);
        cfg.validate()?;
        Ok(cfg)
    }

    fn model(&mut self, o: &ModelOpts) -> Result<ResolvedModel> {
        let mut m = ResolvedModel::default();
        if let Some(a) = self.take("arch", o.arch)? {
            m.architecture = a;
        }
        m.pooling = self.take("pooling", o.pooling)?.unwrap_or(m.architecture.default_pooling());
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.take(stringify!($field), o.$field)? {
                    m.$field = v;
                }
            };
        }
        set!(d_model);
        set!(n_heads);
        set!(n_layers);
        set!(d_ff);
        set!(max_seq_len);
        m.config(1).encoder.validate()?;
        Ok(m)
    }

    fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            Some((k, (line, _))) => {
                Err(Error::Config(format!("{}: line {line}: unknown or unused key `{k}`", self.path.display())))
            }
            None => Ok(()),
        }
    }
}

/// A raw TSV table: header plus rows, every row as wide as the header.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut rows = Vec::new();
        for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            let line = std::str::from_utf8(raw).map_err(|_| Error::Utf8 { path: path.to_path_buf(), line: i + 1 })?;
            let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
            match &header {
                None if line.trim().is_empty() => {
                    return Err(Error::Empty(format!("{}: file has no header row", path.display())))
                }
                None => header = Some(fields),
                Some(_) if line.is_empty() => {}
                Some(h) if fields.len() != h.len() => {
                    let message = format!("expected {} fields, found {}", h.len(), fields.len());
                    return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, message });
                }
                Some(_) => rows.push(fields),
            }
        }
        let header = header.ok_or_else(|| Error::Empty(format!("{}: empty file", path.display())))?;
        Ok(Table { header, rows })
    }

    fn column(&self, path: &Path, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn { path: path.to_path_buf(), column: name.to_string() })
    }
}

fn default_tag(path: &Path, columns: &Columns) -> String {
    columns.lang_pair.clone().unwrap_or_else(|| {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        name.split('.').next().unwrap_or_default().to_string()
    })
}

fn load(path: &Path, columns: &Columns) -> Result<Dataset> {
    let map = ColumnMap {
        source: columns.src_col.clone(),
        target: columns.tgt_col.clone(),
        label: columns.label_col.clone(),
        lang_pair: Some(columns.pair_col.clone()),
    };
    let mode = if columns.lenient { LoadMode::Lenient } else { LoadMode::Strict };
    let loaded = load_tsv(path, &map, &default_tag(path, columns), columns.label_kind, mode)?;
    if !loaded.skipped.is_empty() {
        eprintln!("{}: skipped {} rows with bad labels", path.display(), loaded.skipped.len());
    }
    if !loaded.empty_text.is_empty() {
        eprintln!("{}: {} rows have an empty source or target", path.display(), loaded.empty_text.len());
    }
    Ok(loaded.dataset)
}

fn text_of<'a>(records: impl IntoIterator<Item = &'a Record>) -> impl Iterator<Item = &'a str> {
    records.into_iter().flat_map(|r| [r.source.as_str(), r.target.as_str()])
}

fn build_vocab(a: &BuildVocabArgs, out: &Out) -> Result<()> {
    let mut text = Vec::new();
    for path in &a.inputs {
        let table = Table::read(path)?;
        let (s, t) = (table.column(path, &a.src_col)?, table.column(path, &a.tgt_col)?);
        for row in table.rows {
            text.push(row[s].clone());
            text.push(row[t].clone());
        }
    }
    let vocab = Vocabulary::build(text.iter().map(String::as_str), a.min_freq)?;
    vocab.save(&out.path("vocab.json"))?;
    println!("vocabulary of {} tokens -> {}", vocab.len(), out.path("vocab.json").display());
    Ok(())
}

fn synth(a: &SynthArgs, seed: Option<u64>, out: &Out) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_records {
        spec.n_records = n;
    }
    if let Some(v) = a.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(noise) = &a.noise {
        let bad = || Error::Config(format!("--noise expects `lo,hi` or a single rate, got `{noise}`"));
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        spec.noise_rate_range = match noise.split_once(',') {
            Some((lo, hi)) => (parse(lo)?, parse(hi)?),
            None => (parse(noise)?, parse(noise)?),
        };
    }
    if let Some(task) = &a.task {
        spec.task = match task.to_ascii_lowercase().as_str() {
            "hter" => SyntheticTask::Hter,
            "da" => SyntheticTask::Da,
            _ => return Err(Error::Config(format!("unknown task `{task}` (expected hter or da)"))),
        };
    }
    spec.zscore |= a.zscore;
    if let Some(pool) = &a.noise_pool {
        spec.noise_pool = match pool.to_ascii_lowercase().as_str() {
            "unmapped" => NoisePool::Unmapped,
            "lexicon" => NoisePool::Lexicon,
            _ => return Err(Error::Config(format!("unknown noise pool `{pool}` (expected unmapped or lexicon)"))),
        };
    }
    spec.validate()?;
    if a.test_size.is_some_and(|t| t >= spec.n_records) {
        return Err(Error::Config("--test-size must be smaller than the record count".into()));
    }
    out.write("spec.txt", &spec.to_text())?;
    for tag in &a.lang_pairs {
        let data = generate_synthetic_corpus(&spec, tag)?;
        match a.test_size {
            Some(t) => {
                let (train, test) = data.split_at(spec.n_records - t);
                export_tsv(&train, &out.path(&format!("{tag}.train.tsv")))?;
                export_tsv(&test, &out.path(&format!("{tag}.test.tsv")))?;
            }
            None => export_tsv(&data, &out.path(&format!("{tag}.tsv")))?,
        }
        println!("{tag}: {} records", data.len());
    }
    Ok(())
}

fn write_training(out: &Out, prefix: &str, report: &TrainingReport, preset: Preset) -> Result<()> {
    let report = TrainingReport { preset: Some(preset), ..report.clone() };
    out.write(&format!("{prefix}report.json"), &report.summary_json()?)?;
    out.write(&format!("{prefix}history.jsonl"), &report.to_jsonl()?)
}

fn write_results(out: &Out, table: &ResultsTable) -> Result<()> {
    out.write("results.tsv", &table.to_tsv())?;
    print!("{}", table.to_text());
    Ok(())
}

fn vocab_for(path: Option<&Path>, min_freq: usize, records: &[&Record], out: &Out) -> Result<Vocabulary> {
    match path {
        Some(p) => Vocabulary::load(p),
        None => {
            let vocab = Vocabulary::build(text_of(records.iter().copied()), min_freq)?;
            vocab.save(&out.path("vocab.json"))?;
            Ok(vocab)
        }
    }
}

fn train_cmd(a: &TrainArgs, cfg: &TrainingConfig, m: &ResolvedModel, preset: Preset, out: &Out) -> Result<usize> {
    let data = load(&a.train, &a.columns)?;
    let test = a.test.as_ref().map(|p| load(p, &a.columns)).transpose()?;
    let vocab = vocab_for(a.vocab.as_deref(), a.min_freq, &data.records.iter().collect::<Vec<_>>(), out)?;
    let model = QEModel::new(m.config(vocab.len()), vocab, cfg.seed)?;
    let (trained, report) = train(&model, &data.records, cfg)?;
    save_checkpoint(&trained, &out.path("model.qef"))?;
    write_training(out, "", &report, preset)?;
    println!(
        "{}: {} steps ({:?}), best eval loss {:.6} at step {}",
        m.architecture, report.steps_completed, report.stop_reason, report.best_eval_loss, report.best_step
    );
    if let Some(test) = test {
        let eval = evaluate(&trained, &test)?;
        write_results(out, &ResultsTable::new().with_method(m.architecture.to_string(), eval.rows()))?;
    }
    Ok(report.steps_completed)
}

fn predict(a: &PredictArgs, out: &Out) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let table = Table::read(&a.input)?;
    let (s, t) = (table.column(&a.input, &a.src_col)?, table.column(&a.input, &a.tgt_col)?);
    let pairs: Vec<(&str, &str)> = table.rows.iter().map(|r| (r[s].as_str(), r[t].as_str())).collect();
    let predictions = if pairs.is_empty() { Vec::new() } else { model.predict_batch(&pairs)? };
    let mut text = table.header.join("\t") + "\tprediction\n";
    for (row, p) in table.rows.iter().zip(&predictions) {
        text.push_str(&row.join("\t"));
        text.push_str(&format!("\t{p}\n"));
    }
    let path = a.output.clone().unwrap_or_else(|| out.path("predictions.tsv"));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("{} predictions -> {}", predictions.len(), path.display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, out: &Out) -> Result<()> {
    let eval = match (&a.model, &a.test, &a.predictions) {
        (Some(model), Some(test), _) => {
            let model = load_checkpoint(model)?;
            evaluate(&model, &load(test, &a.columns)?)?
        }
        (None, _, Some(path)) => {
            let data = load(path, &a.columns)?;
            let table = Table::read(path)?;
            let p = table.column(path, &a.prediction_col)?;
            let predictions = table
                .rows
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row[p].trim().parse::<f64>().map_err(|_| Error::Parse {
                        path: path.clone(),
                        line: i + 2,
                        message: format!("unparseable prediction `{}`", row[p]),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if predictions.len() != data.len() {
                return Err(Error::Contract("prediction and label counts differ (lenient mode skipped rows?)".into()));
            }
            crate::metrics::evaluate_predictions(&predictions, &data)?
        }
        _ => return Err(Error::Config("evaluate needs --model with --test, or --predictions".into())),
    };
    write_results(out, &ResultsTable::new().with_method("model", eval.rows()))
}

fn load_pairs(paths: &[PathBuf], columns: &Columns) -> Result<BTreeMap<String, Vec<Record>>> {
    let mut by_pair: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for path in paths {
        for r in load(path, columns)?.records {
            by_pair.entry(r.lang_pair.clone()).or_default().push(r);
        }
    }
    Ok(by_pair)
}

fn multipair(a: &MultipairArgs, cfg: &TrainingConfig, m: &ResolvedModel, preset: Preset, out: &Out) -> Result<usize> {
    let data = load_pairs(&a.data, &a.columns)?;
    let tests = load_pairs(&a.tests, &a.columns)?;
    let all: Vec<&Record> = data.values().flatten().collect();
    let vocab = vocab_for(a.vocab.as_deref(), a.min_freq, &all, out)?;
    let init = QEModel::new(m.config(vocab.len()), vocab, cfg.seed)?;
    let groups = train_multipair(&init, &data, a.grouping, cfg)?;
    let mut steps = 0;
    let mut joint = Vec::new();
    for g in &groups {
        save_checkpoint(&g.model, &out.path(&format!("{}.qef", g.name)))?;
        write_training(out, &format!("{}.", g.name), &g.report, preset)?;
        steps += g.report.steps_completed;
        println!("{}: {} ({} steps)", g.name, g.lang_pairs.join(", "), g.report.steps_completed);
        for tag in &g.lang_pairs {
            if let Some(test) = tests.get(tag) {
                joint.push(evaluate_pair(&g.model, tag, test)?);
            }
        }
    }
    if tests.is_empty() {
        return Ok(steps);
    }
    let mut table = ResultsTable::new().with_method(format!("multi-{}", grouping_name(a.grouping)), joint);
    if a.compare_single {
        let mut single = Vec::new();
        for (tag, records) in &data {
            let (model, report) = train(&init, records, cfg)?;
            steps += report.steps_completed;
            if let Some(test) = tests.get(tag) {
                single.push(evaluate_pair(&model, tag, test)?);
            }
        }
        table = table.with_method("single", single);
    }
    write_results(out, &table)?;
    Ok(steps)
}

fn grouping_name(g: Grouping) -> &'static str {
    match g {
        Grouping::All => "all",
        Grouping::Directional => "directional",
    }
}

fn evaluate_pair(model: &QEModel, tag: &str, records: &[Record]) -> Result<EvalResult> {
    let eval: Evaluation = evaluate(model, &Dataset::new(records.to_vec(), LabelKind::Hter, tag))?;
    Ok(EvalResult { lang_pair: tag.to_string(), ..eval.overall })
}

fn transfer(a: &TransferArgs, cfg: &TrainingConfig, preset: Preset, out: &Out) -> Result<usize> {
    let base = load_checkpoint(&a.base)?;
    let data = load(&a.train, &a.columns)?;
    let n = a.size.unwrap_or(data.len());
    if n > data.len() {
        return Err(Error::Config(format!("--size {n} exceeds the {} training rows", data.len())));
    }
    let (model, report) = train_transfer(&base, &data.records[..n], cfg)?;
    save_checkpoint(&model, &out.path("model.qef"))?;
    write_training(out, "", &report, preset)?;
    println!("transfer on {n} rows: {} steps", report.steps_completed);
    if let Some(test) = &a.test {
        let eval = evaluate(&model, &load(test, &a.columns)?)?;
        write_results(out, &ResultsTable::new().with_method("transfer", eval.rows()))?;
    }
    Ok(report.steps_completed)
}

fn learning_curve(a: &LearningCurveArgs, cfg: &TrainingConfig, m: &ResolvedModel, out: &Out) -> Result<usize> {
    if a.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("--sizes must be strictly ascending".into()));
    }
    let pool = load(&a.train, &a.columns)?;
    let test = load(&a.test, &a.columns)?;
    if let Some(&n) = a.sizes.last().filter(|&&n| n > pool.len()) {
        return Err(Error::Config(format!("size {n} exceeds the {} training rows", pool.len())));
    }
    let base = a.base.as_ref().map(|p| load_checkpoint(p)).transpose()?;
    if base.is_none() && a.sizes.contains(&0) {
        return Err(Error::Config("size 0 (zero-shot) needs --base".into()));
    }
    let scratch_init = match &base {
        Some(b) => QEModel::new(b.config, b.vocab.clone(), cfg.seed)?,
        None => {
            let vocab = Vocabulary::build(text_of(&pool.records), a.min_freq)?;
            QEModel::new(m.config(vocab.len()), vocab, cfg.seed)?
        }
    };
    // Nested subsets: every size takes a prefix of one seeded shuffle.
    let order = shuffled(&pool.records, cfg.seed);
    let mut text = String::from("size\tmode\tpearson\n");
    let mut steps = 0;
    for &n in &a.sizes {
        let subset = &order[..n];
        let mut runs = Vec::new();
        if let Some(b) = &base {
            runs.push(("transfer", train_transfer(b, subset, cfg)?));
        }
        if n > 0 {
            runs.push(("scratch", train_transfer(&scratch_init, subset, cfg)?));
        }
        for (mode, (model, report)) in runs {
            steps += report.steps_completed;
            let r = evaluate(&model, &test)?.overall.pearson_r;
            println!("{n:>6}  {mode:<8}  {r:.4}");
            text.push_str(&format!("{n}\t{mode}\t{r:.6}\n"));
        }
    }
    out.write("curve.tsv", &text)?;
    Ok(steps)
}
