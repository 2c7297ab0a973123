//! Command-line surface. Every subcommand resolves a versioned JSON config
//! (defaults, then `--config`, then flags), writes into a fresh output
//! directory and records a run manifest there.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataload::{
    compute_delta, load_reference, reference_json, DomainCorpus, LoaderMode, LoaderState, ReferenceMode,
    REDPAJAMA_DOMAINS, REDPAJAMA_WEIGHTS,
};
use crate::metrics::{read_metrics, StepMetrics};
use crate::model::{checkpoint, ModelConfig, TransformerWeights};
use crate::pruning::{run_pruning, PruneConfig, LOADER_FILE};
use crate::scaling::{fit_domains, scaling_reference, FitMode, LossObservation};
use crate::sweep::{budget_sweep, ct_initial_weights, SweepResult, SWEEP_FILE};
use crate::synth::{parse_domains, write_corpus};
use crate::trainer::{continue_pretrain, evaluate, train, EvalSet, RunPaths, TrainConfig, METRICS_FILE};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REFERENCE_FILE: &str = "reference.json";
pub const FITS_FILE: &str = "fits.json";
pub const EVAL_FILE: &str = "eval.json";

const CONFIG_HELP: &str = "Config keys are those printed by --print-config. \
Any key can be overridden with --set section.key=value (value parsed as JSON, else as a string).";

#[derive(Debug, Parser)]
#[command(name = "shear", version, about = "Structured pruning and dynamic batch loading for small byte-level transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain corpus of order-2 Markov byte streams.
    GenData(GenDataArgs),
    /// Train a source model from scratch.
    #[command(after_help = CONFIG_HELP)]
    TrainSource(TrainSourceArgs),
    /// Fit per-domain scaling laws over source checkpoints and emit reference losses.
    #[command(after_help = CONFIG_HELP)]
    FitScaling(FitScalingArgs),
    /// Targeted structured pruning of a source checkpoint.
    #[command(after_help = CONFIG_HELP)]
    Prune(PruneArgs),
    /// Continued pretraining of a pruned checkpoint.
    #[command(after_help = CONFIG_HELP)]
    ContinuePretrain(CtArgs),
    /// Per-domain validation loss of a checkpoint.
    #[command(after_help = CONFIG_HELP)]
    Eval(EvalArgs),
    /// Pruning-versus-continued-pretraining budget sweep at a fixed total budget.
    #[command(after_help = CONFIG_HELP)]
    Sweep(SweepArgs),
    /// Summarize run directories as CSV or JSON.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file; missing keys keep the command defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Preset (`default`, `four`, `moderate`, `redpajama`) or `name:alphabet:temperature,...`.
    #[arg(long, default_value = "default")]
    pub domains: String,
    #[arg(long, default_value_t = 200_000)]
    pub tokens_per_domain: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainSourceArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct FitScalingArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets `checkpoints` (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<PathBuf>>,
    /// Sets `mode`.
    #[arg(long, value_enum)]
    pub mode: Option<FitModeArg>,
    /// Sets `target_checkpoint`: the model whose size the reference is predicted at.
    #[arg(long)]
    pub target_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FitModeArg {
    FixedD,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LoaderArg {
    Static,
    Dynamic,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets `loader.mode`.
    #[arg(long, value_enum)]
    pub loader: Option<LoaderArg>,
    /// Sets `loader.reference_file`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Sets `prune.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets `prune.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CtArgs {
    /// Pruning run directory: its checkpoint, final loader weights and reference are used.
    #[arg(long, required_unless_present = "checkpoint")]
    pub prune_run: Option<PathBuf>,
    /// Checkpoint to train instead of a pruning run's.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Source checkpoint for source-model reference losses.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets `loader.mode`.
    #[arg(long, value_enum)]
    pub loader: Option<LoaderArg>,
    /// Sets `loader.reference_file`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Sets `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference losses; adds per-domain gaps to the output.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets `sweep.fractions` (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Sets `loader.reference_file`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run or sweep directories.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ReportFormat,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config documents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainWeights {
    /// `uniform`, or `redpajama` for a corpus with the seven RedPajama domain names.
    Named(String),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Held-out tokens per domain when a domain has no validation file.
    pub val_tokens: usize,
    /// Original domain proportions (w0 of the first stage, fixed weights of static loading).
    pub initial_weights: DomainWeights,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            val_tokens: 16_384,
            initial_weights: DomainWeights::Named("uniform".into()),
        }
    }
}

impl DataConfig {
    pub fn resolve_weights(&self, names: &[String]) -> Result<Vec<f64>> {
        match &self.initial_weights {
            DomainWeights::Named(n) if n == "uniform" => Ok(LoaderState::uniform(names.len())),
            DomainWeights::Named(n) if n == "redpajama" => names
                .iter()
                .map(|d| {
                    REDPAJAMA_DOMAINS
                        .iter()
                        .position(|r| r == d)
                        .map(|i| REDPAJAMA_WEIGHTS[i])
                        .ok_or_else(|| Error::Config(format!("data.initial_weights: domain {d} is not a RedPajama domain")))
                })
                .collect(),
            DomainWeights::Named(n) => Err(Error::Config(format!("data.initial_weights: unknown preset {n:?}"))),
            DomainWeights::Explicit(w) if w.len() == names.len() => Ok(w.clone()),
            DomainWeights::Explicit(w) => Err(Error::Config(format!(
                "data.initial_weights: {} weights for {} domains",
                w.len(),
                names.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoaderConfig {
    pub mode: LoaderMode,
    pub reference_mode: ReferenceMode,
    /// JSON mapping domain name to reference loss.
    pub reference_file: Option<PathBuf>,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        LoaderConfig {
            mode: LoaderMode::Dynamic,
            reference_mode: ReferenceMode::Source,
            reference_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDoc {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for SourceDoc {
    fn default() -> Self {
        SourceDoc {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig {
                steps: 2500,
                batch_size: 8,
                seq_len: 64,
                lr: 3e-3,
                eval_interval: 100,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDoc {
    pub version: u32,
    pub mode: FitMode,
    pub checkpoints: Vec<PathBuf>,
    /// Training tokens per checkpoint; required in full mode.
    pub data_sizes: Option<Vec<f64>>,
    /// Non-embedding parameters the reference is predicted at.
    pub target_params: Option<f64>,
    /// Alternative to `target_params`: read the size from this checkpoint.
    pub target_checkpoint: Option<PathBuf>,
    /// Token budget the reference is predicted at (ignored in fixed_d mode).
    pub target_tokens: f64,
    pub seq_len: usize,
    pub eval_batch: usize,
    pub data: DataConfig,
}

impl Default for FitDoc {
    fn default() -> Self {
        FitDoc {
            version: CONFIG_VERSION,
            mode: FitMode::FixedD,
            checkpoints: Vec::new(),
            data_sizes: None,
            target_params: None,
            target_checkpoint: None,
            target_tokens: 1.0,
            seq_len: 64,
            eval_batch: 32,
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneDoc {
    pub version: u32,
    pub prune: PruneConfig,
    pub data: DataConfig,
    pub loader: LoaderConfig,
}

impl Default for PruneDoc {
    fn default() -> Self {
        PruneDoc {
            version: CONFIG_VERSION,
            prune: PruneConfig::default(),
            data: DataConfig::default(),
            loader: LoaderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtDoc {
    pub version: u32,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loader: LoaderConfig,
}

impl Default for CtDoc {
    fn default() -> Self {
        CtDoc {
            version: CONFIG_VERSION,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            loader: LoaderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDoc {
    pub version: u32,
    pub seq_len: usize,
    pub eval_batch: usize,
    pub data: DataConfig,
}

impl Default for EvalDoc {
    fn default() -> Self {
        EvalDoc {
            version: CONFIG_VERSION,
            seq_len: 64,
            eval_batch: 32,
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Multiples of `prune.steps`, strictly increasing.
    pub fractions: Vec<f64>,
    /// Also spend the remaining budget on continued pretraining.
    pub run_ct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDoc {
    pub version: u32,
    pub prune: PruneConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loader: LoaderConfig,
    pub sweep: SweepSection,
}

impl Default for SweepDoc {
    fn default() -> Self {
        SweepDoc {
            version: CONFIG_VERSION,
            prune: PruneConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            loader: LoaderConfig::default(),
            sweep: SweepSection {
                fractions: vec![0.5, 1.0, 2.0],
                run_ct: true,
            },
        }
    }
}

/// Defaults, then the optional config file merged key by key, then the
/// overrides in order. Errors name the offending field path.
pub fn resolve_config<T>(defaults: &T, file: Option<&Path>, overrides: &[(String, Value)]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut doc = serde_json::to_value(defaults)?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
        let user: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        if !user.is_object() {
            return Err(Error::Config(format!("{}: config must be a JSON object", p.display())));
        }
        merge(&mut doc, user);
    }
    for (key, value) in overrides {
        set_path(&mut doc, key, value.clone())?;
    }
    let cfg: T = serde_path_to_error::deserialize(doc)
        .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
    let version = serde_json::to_value(&cfg)?.get("version").and_then(Value::as_u64);
    if version != Some(CONFIG_VERSION as u64) {
        return Err(Error::Config(format!(
            "at `version`: unsupported config version {version:?} (expected {CONFIG_VERSION})"
        )));
    }
    Ok(cfg)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad config key {key:?}")));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("at `{}`: not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

/// `key=value` with the value read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn overrides(flags: Vec<(&str, Option<Value>)>, set: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out: Vec<(String, Value)> = flags
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect();
    for s in set {
        out.push(parse_override(s)?);
    }
    Ok(out)
}

fn loader_value(l: Option<LoaderArg>) -> Option<Value> {
    l.map(|l| match l {
        LoaderArg::Static => json!("static"),
        LoaderArg::Dynamic => json!("dynamic"),
    })
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| json!(p))
}

// ---------------------------------------------------------------------------
// Run manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
    /// Unix seconds.
    pub started_at: f64,
    pub finished_at: Option<f64>,
    /// `running`, `ok` or `failed`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Relative path to SHA-256 of every file written into the run directory.
    pub artifacts: BTreeMap<String, String>,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn ensure_fresh(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(Error::io(dir))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty; runs write to fresh directories",
                dir.display()
            )));
        }
    }
    Ok(())
}

impl Run {
    /// Writes the manifest with status `running`. The run id depends only on
    /// the command, resolved config, seed and inputs.
    fn start(dir: &Path, command: &str, config: Value, seed: u64, inputs: BTreeMap<String, PathBuf>) -> Result<Run> {
        ensure_fresh(dir)?;
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let key = serde_json::to_string(&json!({
            "command": command, "config": config, "seed": seed, "inputs": inputs,
        }))?;
        let digest = Sha256::digest(key.as_bytes());
        let run_id = format!("{command}-{}", hex(&digest[..8]));
        let run = Run {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                run_id,
                command: command.to_string(),
                config,
                seed,
                inputs,
                output_dir: dir.to_path_buf(),
                started_at: now(),
                finished_at: None,
                status: "running".into(),
                error: None,
                artifacts: BTreeMap::new(),
            },
        };
        run.write()?;
        Ok(run)
    }

    fn write(&self) -> Result<()> {
        write_json(&self.dir.join(RUN_MANIFEST), &self.manifest)
    }

    fn finish<T>(mut self, result: &Result<T>) -> Result<()> {
        self.manifest.finished_at = Some(now());
        match result {
            Ok(_) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(e.to_string());
            }
        }
        self.manifest.artifacts = hash_tree(&self.dir)?;
        self.write()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(Error::io(&dir))? {
            let path = entry.map_err(Error::io(&dir))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(&path);
            if rel == Path::new(RUN_MANIFEST) {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
            out.insert(rel.to_string_lossy().into_owned(), hex(&Sha256::digest(&bytes)));
        }
    }
    Ok(out)
}

fn with_run<T>(run: Run, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let result = body(&run.dir);
    run.finish(&result)?;
    result
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").map_err(Error::io(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Per-run result record read back by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub domains: Vec<String>,
    #[serde(default)]
    pub initial_losses: Option<Vec<f64>>,
    pub final_losses: Vec<f64>,
    #[serde(default)]
    pub reference: Option<Vec<f64>>,
    #[serde(default)]
    pub loader_mode: Option<LoaderMode>,
    #[serde(default)]
    pub final_domain_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub domain_sequences: Option<Vec<usize>>,
    #[serde(default)]
    pub extra: Value,
}

// ---------------------------------------------------------------------------
// Entry points

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSource(a) => train_source(a),
        Command::FitScaling(a) => fit_scaling(a),
        Command::Prune(a) => prune(a),
        Command::ContinuePretrain(a) => continue_pretraining(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn print_or_continue<T: Serialize>(cfg: &T, print: bool) -> Result<bool> {
    if print {
        println!("{}", serde_json::to_string_pretty(cfg)?);
    }
    Ok(print)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let specs = parse_domains(&a.domains)?;
    let config = json!({
        "domains": specs, "tokens_per_domain": a.tokens_per_domain, "seed": a.seed,
    });
    if a.force && a.out.exists() {
        std::fs::remove_dir_all(&a.out).map_err(Error::io(&a.out))?;
    }
    let run = Run::start(&a.out, "gen-data", config, a.seed, BTreeMap::new())?;
    with_run(run, |dir| {
        let m = write_corpus(dir, &specs, a.tokens_per_domain, a.seed)?;
        for d in &m.domains {
            println!(
                "{}: {} train + {} validation bytes, conditional entropy {:.3} bits",
                d.spec.name, d.train_bytes, d.validation_bytes, d.entropy
            );
        }
        Ok(())
    })
}

fn train_source(a: TrainSourceArgs) -> Result<()> {
    let ov = overrides(
        vec![("train.seed", a.seed.map(|s| json!(s))), ("train.steps", a.steps.map(|s| json!(s)))],
        &a.config.set,
    )?;
    let doc: SourceDoc = resolve_config(&SourceDoc::default(), a.config.config.as_deref(), &ov)?;
    if print_or_continue(&doc, a.config.print_config)? {
        return Ok(());
    }
    doc.model.validate()?;
    doc.train.validate()?;
    if doc.train.seq_len > doc.model.max_seq_len {
        return Err(Error::Config(format!(
            "at `train.seq_len`: {} exceeds model.max_seq_len {}",
            doc.train.seq_len, doc.model.max_seq_len
        )));
    }
    let corpus = DomainCorpus::load(&a.corpus, doc.data.val_tokens)?;
    let w0 = doc.data.resolve_weights(&corpus.names())?;
    let inputs = BTreeMap::from([("corpus".to_string(), a.corpus.clone())]);
    let run = Run::start(&a.out, "train-source", serde_json::to_value(&doc)?, doc.train.seed, inputs)?;
    with_run(run, |dir| {
        let mut rng = ChaCha8Rng::seed_from_u64(doc.train.seed);
        rng.set_stream(1);
        let weights = TransformerWeights::init(&doc.model, &mut rng)?;
        let zeros = vec![0.0; corpus.len()];
        let mut loader = LoaderState::new(w0, zeros, doc.train.eval_interval, LoaderMode::Static, ReferenceMode::Source)?;
        let out = train(weights, &corpus, &mut loader, &doc.train, "pretrain", Some(&RunPaths::new(dir)))?;
        let tokens = doc.train.steps * doc.train.batch_size * doc.train.seq_len;
        print_losses(&corpus.names(), &out.final_losses);
        write_json(
            &dir.join(SUMMARY_FILE),
            &RunSummary {
                command: "train-source".into(),
                domains: corpus.names(),
                initial_losses: Some(out.initial_losses),
                final_losses: out.final_losses,
                reference: None,
                loader_mode: Some(LoaderMode::Static),
                final_domain_weights: Some(out.final_domain_weights),
                domain_sequences: Some(out.domain_sequences),
                extra: json!({
                    "non_embedding_params": doc.model.non_embedding_params(),
                    "train_tokens": tokens,
                }),
            },
        )
    })
}

fn print_losses(names: &[String], losses: &[f64]) {
    for (n, l) in names.iter().zip(losses) {
        println!("{n}: {l:.4}");
    }
}

fn fit_scaling(a: FitScalingArgs) -> Result<()> {
    let mode = a.mode.map(|m| match m {
        FitModeArg::FixedD => json!("fixed_d"),
        FitModeArg::Full => json!("full"),
    });
    let ov = overrides(
        vec![
            ("checkpoints", a.checkpoints.as_ref().map(|c| json!(c))),
            ("mode", mode),
            ("target_checkpoint", path_value(&a.target_checkpoint)),
        ],
        &a.config.set,
    )?;
    let doc: FitDoc = resolve_config(&FitDoc::default(), a.config.config.as_deref(), &ov)?;
    if print_or_continue(&doc, a.config.print_config)? {
        return Ok(());
    }
    if doc.checkpoints.is_empty() {
        return Err(Error::Config("at `checkpoints`: at least one checkpoint is required".into()));
    }
    let data_sizes = match (&doc.data_sizes, doc.mode) {
        (Some(d), _) if d.len() == doc.checkpoints.len() => d.clone(),
        (Some(d), _) => {
            return Err(Error::Config(format!(
                "at `data_sizes`: {} sizes for {} checkpoints",
                d.len(),
                doc.checkpoints.len()
            )))
        }
        (None, FitMode::FixedD) => vec![doc.target_tokens; doc.checkpoints.len()],
        (None, FitMode::Full) => return Err(Error::Config("at `data_sizes`: required in full mode".into())),
    };
    let target_n = match (doc.target_params, &doc.target_checkpoint) {
        (Some(n), _) => n,
        (None, Some(p)) => checkpoint::load(p)?.1.model.non_embedding_params() as f64,
        (None, None) => {
            return Err(Error::Config("at `target_params`: set target_params or target_checkpoint".into()))
        }
    };
    let corpus = DomainCorpus::load(&a.corpus, doc.data.val_tokens)?;
    let names = corpus.names();
    let mut inputs = BTreeMap::from([("corpus".to_string(), a.corpus.clone())]);
    for (i, c) in doc.checkpoints.iter().enumerate() {
        inputs.insert(format!("checkpoint_{i}"), c.clone());
    }
    let run = Run::start(&a.out, "fit-scaling", serde_json::to_value(&doc)?, 0, inputs)?;
    with_run(run, |dir| {
        let eval = EvalSet::new(&corpus, doc.seq_len, doc.eval_batch)?;
        let mut obs = Vec::new();
        for (path, &d) in doc.checkpoints.iter().zip(&data_sizes) {
            let (w, cfg) = checkpoint::load(path)?;
            let losses = evaluate(&w, None, &eval)?;
            let n = cfg.model.non_embedding_params() as f64;
            println!("{}: N={n} losses {losses:.4?}", path.display());
            for (name, loss) in names.iter().zip(losses) {
                obs.push(LossObservation {
                    domain: name.clone(),
                    model_size: n,
                    data_size: d,
                    loss,
                });
            }
        }
        let fits = fit_domains(&obs, doc.mode)?;
        let reference = scaling_reference(&fits, &names, target_n, doc.target_tokens)?;
        print_losses(&names, &reference);
        std::fs::write(dir.join(REFERENCE_FILE), reference_json(&names, &reference) + "\n")
            .map_err(Error::io(&dir.join(REFERENCE_FILE)))?;
        write_json(
            &dir.join(FITS_FILE),
            &json!({ "target_params": target_n, "target_tokens": doc.target_tokens, "observations": obs, "fits": fits }),
        )
    })
}

/// Reference losses: an explicit file wins; otherwise source mode evaluates
/// `source`, and scaling mode needs a file.
fn resolve_reference(
    loader: &LoaderConfig,
    corpus: &DomainCorpus,
    source: Option<&TransformerWeights>,
    seq_len: usize,
    eval_batch: usize,
) -> Result<Vec<f64>> {
    if let Some(p) = &loader.reference_file {
        return Ok(load_reference(p, &corpus.names())?);
    }
    match (loader.reference_mode, source) {
        (ReferenceMode::Source, Some(w)) => {
            crate::scaling::source_reference(w, &EvalSet::new(corpus, seq_len, eval_batch)?)
        }
        (ReferenceMode::Source, None) => Err(Error::Config(
            "at `loader.reference_file`: source reference needs a reference file or a source checkpoint".into(),
        )),
        (ReferenceMode::Scaling, _) => Err(Error::Config(
            "at `loader.reference_file`: scaling reference needs the file written by fit-scaling".into(),
        )),
    }
}

fn prune(a: PruneArgs) -> Result<()> {
    let ov = overrides(
        vec![
            ("loader.mode", loader_value(a.loader)),
            ("loader.reference_file", path_value(&a.reference)),
            ("prune.seed", a.seed.map(|s| json!(s))),
            ("prune.steps", a.steps.map(|s| json!(s))),
        ],
        &a.config.set,
    )?;
    let doc: PruneDoc = resolve_config(&PruneDoc::default(), a.config.config.as_deref(), &ov)?;
    if print_or_continue(&doc, a.config.print_config)? {
        return Ok(());
    }
    let (source, _) = checkpoint::load(&a.source)?;
    doc.prune.validate(&source.config)?;
    let corpus = DomainCorpus::load(&a.corpus, doc.data.val_tokens)?;
    let names = corpus.names();
    let w0 = doc.data.resolve_weights(&names)?;
    let inputs = BTreeMap::from([("corpus".to_string(), a.corpus.clone()), ("source".to_string(), a.source.clone())]);
    let run = Run::start(&a.out, "prune", serde_json::to_value(&doc)?, doc.prune.seed, inputs)?;
    with_run(run, |dir| {
        let reference = resolve_reference(&doc.loader, &corpus, Some(&source), doc.prune.seq_len, doc.prune.eval_batch)?;
        let mut loader = LoaderState::new(
            w0,
            reference.clone(),
            doc.prune.eval_interval,
            doc.loader.mode,
            doc.loader.reference_mode,
        )?;
        let out = run_pruning(source, &doc.prune, &corpus, &mut loader, Some(&RunPaths::new(dir)))?;
        let tail = out.tail_mean_sums(100);
        print_losses(&names, &out.final_losses);
        println!("extracted {:?}", out.extracted.config.target_shape());
        write_json(
            &dir.join(SUMMARY_FILE),
            &RunSummary {
                command: "prune".into(),
                domains: names.clone(),
                initial_losses: None,
                final_losses: out.final_losses,
                reference: Some(reference),
                loader_mode: Some(doc.loader.mode),
                final_domain_weights: Some(out.final_domain_weights),
                domain_sequences: Some(out.domain_sequences),
                extra: json!({
                    "target": doc.prune.target,
                    "extracted": out.extracted.config,
                    "tail_mean_mask_sums": tail,
                    "targets": out.reports.last().map(|r| r.targets),
                }),
            },
        )
    })
}

fn continue_pretraining(a: CtArgs) -> Result<()> {
    let ov = overrides(
        vec![
            ("loader.mode", loader_value(a.loader)),
            ("loader.reference_file", path_value(&a.reference)),
            ("train.seed", a.seed.map(|s| json!(s))),
            ("train.steps", a.steps.map(|s| json!(s))),
        ],
        &a.config.set,
    )?;
    let doc: CtDoc = resolve_config(&CtDoc::default(), a.config.config.as_deref(), &ov)?;
    if print_or_continue(&doc, a.config.print_config)? {
        return Ok(());
    }
    doc.train.validate()?;
    let ckpt = match (&a.checkpoint, &a.prune_run) {
        (Some(c), _) => c.clone(),
        (None, Some(r)) => RunPaths::new(r).checkpoint(),
        (None, None) => return Err(Error::Config("--prune-run or --checkpoint is required".into())),
    };
    let (weights, _) = checkpoint::load(&ckpt)?;
    if doc.train.seq_len > weights.config.max_seq_len {
        return Err(Error::Config(format!(
            "at `train.seq_len`: {} exceeds the checkpoint's max_seq_len {}",
            doc.train.seq_len, weights.config.max_seq_len
        )));
    }
    let corpus = DomainCorpus::load(&a.corpus, doc.data.val_tokens)?;
    let names = corpus.names();
    let original = doc.data.resolve_weights(&names)?;
    let pruned_loader: Option<LoaderState> = match &a.prune_run {
        Some(r) => Some(read_json(&r.join(LOADER_FILE))?),
        None => None,
    };
    let mut inputs = BTreeMap::from([("corpus".to_string(), a.corpus.clone()), ("checkpoint".to_string(), ckpt)]);
    if let Some(r) = &a.prune_run {
        inputs.insert("prune_run".into(), r.clone());
    }
    if let Some(s) = &a.source {
        inputs.insert("source".into(), s.clone());
    }
    let run = Run::start(&a.out, "continue-pretrain", serde_json::to_value(&doc)?, doc.train.seed, inputs)?;
    with_run(run, |dir| {
        let reference = match (&doc.loader.reference_file, &pruned_loader, &a.source) {
            (None, Some(l), _) if l.reference_mode == doc.loader.reference_mode => l.reference.clone(),
            (None, _, Some(s)) => {
                let (src, _) = checkpoint::load(s)?;
                resolve_reference(&doc.loader, &corpus, Some(&src), doc.train.seq_len, doc.train.eval_batch)?
            }
            _ => resolve_reference(&doc.loader, &corpus, None, doc.train.seq_len, doc.train.eval_batch)?,
        };
        let pruned_final = pruned_loader.as_ref().map_or(&original, |l| &l.weights);
        let w0 = ct_initial_weights(doc.loader.mode, &original, pruned_final);
        let mut loader = LoaderState::new(
            w0,
            reference.clone(),
            doc.train.eval_interval,
            doc.loader.mode,
            doc.loader.reference_mode,
        )?;
        let out = continue_pretrain(weights, &corpus, &mut loader, &doc.train, Some(&RunPaths::new(dir)))?;
        let delta = compute_delta(&out.final_losses, &reference)?;
        print_losses(&names, &out.final_losses);
        println!("gap spread {:.4}", spread(&delta));
        write_json(&dir.join(LOADER_FILE), &loader)?;
        write_json(
            &dir.join(SUMMARY_FILE),
            &RunSummary {
                command: "continue-pretrain".into(),
                domains: names.clone(),
                initial_losses: Some(out.initial_losses),
                final_losses: out.final_losses,
                reference: Some(reference),
                loader_mode: Some(doc.loader.mode),
                final_domain_weights: Some(out.final_domain_weights),
                domain_sequences: Some(out.domain_sequences),
                extra: Value::Null,
            },
        )
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let doc: EvalDoc = resolve_config(&EvalDoc::default(), a.config.config.as_deref(), &overrides(vec![], &a.config.set)?)?;
    if print_or_continue(&doc, a.config.print_config)? {
        return Ok(());
    }
    let (weights, _) = checkpoint::load(&a.checkpoint)?;
    if doc.seq_len > weights.config.max_seq_len {
        return Err(Error::Config(format!(
            "at `seq_len`: {} exceeds the checkpoint's max_seq_len {}",
            doc.seq_len, weights.config.max_seq_len
        )));
    }
    let corpus = DomainCorpus::load(&a.corpus, doc.data.val_tokens)?;
    let names = corpus.names();
    let reference = match &a.reference {
        Some(p) => Some(load_reference(p, &names)?),
        None => None,
    };
    let mut inputs = BTreeMap::from([("corpus".to_string(), a.corpus.clone()), ("checkpoint".to_string(), a.checkpoint.clone())]);
    if let Some(r) = &a.reference {
        inputs.insert("reference".into(), r.clone());
    }
    let run = Run::start(&a.out, "eval", serde_json::to_value(&doc)?, 0, inputs)?;
    with_run(run, |dir| {
        let losses = evaluate(&weights, None, &EvalSet::new(&corpus, doc.seq_len, doc.eval_batch)?)?;
        print_losses(&names, &losses);
        let delta = reference.as_ref().map(|r| compute_delta(&losses, r)).transpose()?;
        write_json(
            &dir.join(EVAL_FILE),
            &json!({ "domains": names, "losses": losses, "reference": reference, "delta": delta }),
        )?;
        write_json(
            &dir.join(SUMMARY_FILE),
            &RunSummary {
                command: "eval".into(),
                domains: names.clone(),
                initial_losses: None,
                final_losses: losses,
                reference,
                loader_mode: None,
                final_domain_weights: None,
                domain_sequences: None,
                extra: Value::Null,
            },
        )
    })
}

fn sweep(a: SweepArgs) -> Result<()> {
    let ov = overrides(
        vec![
            ("sweep.fractions", a.fractions.as_ref().map(|f| json!(f))),
            ("loader.reference_file", path_value(&a.reference)),
        ],
        &a.config.set,
    )?;
    let doc: SweepDoc = resolve_config(&SweepDoc::default(), a.config.config.as_deref(), &ov)?;
    if print_or_continue(&doc, a.config.print_config)? {
        return Ok(());
    }
    let (source, _) = checkpoint::load(&a.source)?;
    doc.prune.validate(&source.config)?;
    if doc.sweep.run_ct {
        doc.train.validate()?;
    }
    let corpus = DomainCorpus::load(&a.corpus, doc.data.val_tokens)?;
    let w0 = doc.data.resolve_weights(&corpus.names())?;
    let inputs = BTreeMap::from([("corpus".to_string(), a.corpus.clone()), ("source".to_string(), a.source.clone())]);
    let run = Run::start(&a.out, "sweep", serde_json::to_value(&doc)?, doc.prune.seed, inputs)?;
    with_run(run, |dir| {
        let reference = resolve_reference(&doc.loader, &corpus, Some(&source), doc.prune.seq_len, doc.prune.eval_batch)?;
        let loader = LoaderState::new(w0, reference, doc.prune.eval_interval, doc.loader.mode, doc.loader.reference_mode)?;
        let result = budget_sweep(
            &source,
            &corpus,
            &doc.prune,
            &doc.train,
            &doc.sweep.fractions,
            doc.sweep.run_ct,
            &loader,
            Some(dir),
        )?;
        for r in &result.rows {
            println!(
                "fraction {}: prune {} steps, ct {} steps, post-prune mean {:.4}",
                r.fraction, r.prune_steps, r.ct_steps, r.post_prune_mean
            );
        }
        println!("monotone: {}", if result.monotone { "PASS" } else { "FAIL" });
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub command: String,
    pub stage: String,
    pub steps: usize,
    pub tokens: usize,
    pub domains: Vec<String>,
    pub final_losses: Vec<f64>,
    pub mean_final_loss: f64,
    pub final_delta: Option<Vec<f64>>,
    /// max - min of the final clipped loss gaps.
    pub gap_spread: Option<f64>,
    /// Training tokens drawn from each domain.
    pub domain_tokens: Vec<usize>,
    pub final_domain_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub run: String,
    #[serde(flatten)]
    pub result: SweepResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunReport>,
    pub sweeps: Vec<SweepReport>,
}

fn spread(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Cumulative per-domain tokens from the per-step sequence tallies.
pub fn domain_tokens(metrics: &[StepMetrics]) -> Vec<usize> {
    let k = metrics.first().map_or(0, |m| m.domain_sequences.len());
    let mut out = vec![0usize; k];
    for m in metrics {
        let seqs: usize = m.domain_sequences.iter().sum();
        if seqs == 0 {
            continue;
        }
        let per_seq = m.tokens / seqs;
        for (o, s) in out.iter_mut().zip(&m.domain_sequences) {
            *o += s * per_seq;
        }
    }
    out
}

pub fn summarize_run(dir: &Path) -> Result<RunReport> {
    let metrics_path = dir.join(METRICS_FILE);
    if !metrics_path.is_file() {
        return Err(Error::Config(format!("{}: missing metrics", metrics_path.display())));
    }
    let metrics = read_metrics(&metrics_path)?;
    let last = metrics
        .last()
        .ok_or_else(|| Error::Config(format!("{}: no metrics records", metrics_path.display())))?;
    let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
    let final_delta = summary
        .reference
        .as_ref()
        .map(|r| compute_delta(&summary.final_losses, r))
        .transpose()?;
    let final_weights = summary
        .final_domain_weights
        .clone()
        .unwrap_or_else(|| last.domain_weights.clone());
    Ok(RunReport {
        run: dir.display().to_string(),
        command: summary.command,
        stage: last.stage.clone(),
        steps: last.step,
        tokens: metrics.iter().map(|m| m.tokens).sum(),
        mean_final_loss: summary.final_losses.iter().sum::<f64>() / summary.final_losses.len().max(1) as f64,
        gap_spread: final_delta.as_deref().map(spread),
        final_delta,
        domains: summary.domains,
        final_losses: summary.final_losses,
        domain_tokens: domain_tokens(&metrics),
        final_domain_weights: final_weights,
    })
}

pub fn build_report(dirs: &[PathBuf]) -> Result<Report> {
    let mut report = Report {
        runs: Vec::new(),
        sweeps: Vec::new(),
    };
    for d in dirs {
        let sweep_path = d.join(SWEEP_FILE);
        if sweep_path.is_file() {
            report.sweeps.push(SweepReport {
                run: d.display().to_string(),
                result: read_json(&sweep_path)?,
            });
        } else {
            report.runs.push(summarize_run(d)?);
        }
    }
    Ok(report)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn opt<T: std::fmt::Display>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Runs table, then (if any) the budget-sweep table. Per-domain columns are
/// `;`-joined in domain order.
pub fn report_csv(report: &Report) -> String {
    let mut s = String::from(
        "run,command,stage,steps,tokens,domains,final_losses,mean_final_loss,final_delta,gap_spread,domain_tokens,final_domain_weights\n",
    );
    for r in &report.runs {
        s += &format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run,
            r.command,
            r.stage,
            r.steps,
            r.tokens,
            join(&r.domains),
            join(&r.final_losses),
            r.mean_final_loss,
            r.final_delta.as_deref().map(join).unwrap_or_default(),
            opt(r.gap_spread),
            join(&r.domain_tokens),
            join(&r.final_domain_weights),
        );
    }
    if !report.sweeps.is_empty() {
        s += "\nsweep,fraction,prune_steps,ct_steps,prune_tokens,ct_tokens,post_prune_losses,post_prune_mean,post_ct_mean,monotone\n";
        for sw in &report.sweeps {
            for r in &sw.result.rows {
                s += &format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    sw.run,
                    r.fraction,
                    r.prune_steps,
                    r.ct_steps,
                    r.prune_tokens,
                    r.ct_tokens,
                    join(&r.post_prune_losses),
                    r.post_prune_mean,
                    opt(r.post_ct_mean),
                    if sw.result.monotone { "PASS" } else { "FAIL" },
                );
            }
        }
    }
    s
}

fn report(a: ReportArgs) -> Result<()> {
    let report = build_report(&a.runs)?;
    let text = match a.format {
        ReportFormat::Csv => report_csv(&report),
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
    };
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(Error::io(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
