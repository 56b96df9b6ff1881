//! Command-line front end. Every command resolves its flags (and optional
//! config file) into library calls; nothing here is needed to reproduce a
//! run from code.
//!
//! Exit codes: 0 success, 1 verification failure, 2 validation, 3 numerical,
//! 4 I/O.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::adapter::{
    merge_adapters, resolve_target_layers, BaseWeights, LoraAdapter, DEFAULT_TARGET_PATTERNS,
};
use crate::concept::{fetch_concept_bundle, load_concept_spec, BenignProbeSet, EmbeddingClient, DEFAULT_K};
use crate::diagnostics::{assess, Assessment, Timings};
use crate::edit::{edit_adapter, ComputeDtype, EditConfig, EditOutcome};
use crate::error::{Error, ErrorClass, Result};
use crate::service::ServiceConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Environment variable holding the `env_logger` filter.
pub const LOG_ENV: &str = "LORASHIELD_LOG";

#[derive(Debug, Parser)]
#[command(name = "lora-eraser", version, about = "Data-free concept erasure for LoRA adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Erase a concept from an adapter.
    Edit(EditArgs),
    /// List the layers of an adapter.
    Inspect(InspectArgs),
    /// Recompute diagnostics for an edited adapter and check thresholds.
    Verify(VerifyArgs),
    /// Weighted sum of adapters.
    Merge(MergeArgs),
    /// Build a concept bundle from an embedding service.
    Fetch(FetchArgs),
    /// Run the HTTP edit service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Base weights container.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Concept bundle container.
    #[arg(long)]
    pub concept: Option<PathBuf>,
    /// Benign probe bundle for the drift metric.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report path; defaults to the output path with a `.report.json` extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Merge scale applied to the adapter delta.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Re-factorization rank (defaults to each layer's rank).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Comma-separated glob patterns selecting target layers.
    #[arg(long, value_delimiter = ',')]
    pub patterns: Option<Vec<String>>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub compute_dtype: Option<ComputeDtypeArg>,
    /// Flat TOML file whose keys mirror the flag names; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `text` prints a summary line, `json` prints the full report.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Record wall-clock timings in the report (makes it non-reproducible).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputeDtypeArg {
    F32,
    F64,
}

impl From<ComputeDtypeArg> for ComputeDtype {
    fn from(v: ComputeDtypeArg) -> Self {
        match v {
            ComputeDtypeArg::F32 => ComputeDtype::F32,
            ComputeDtypeArg::F64 => ComputeDtype::F64,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct FileConfig {
    adapter: Option<PathBuf>,
    base: Option<PathBuf>,
    concept: Option<PathBuf>,
    probes: Option<PathBuf>,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
    steps: Option<usize>,
    tau: Option<f64>,
    eta: Option<f64>,
    lr: Option<f64>,
    alpha: Option<f64>,
    rank: Option<usize>,
    patterns: Option<Vec<String>>,
    workers: Option<usize>,
    seed: Option<u64>,
    compute_dtype: Option<ComputeDtypeArg>,
    format: Option<Format>,
    timings: Option<bool>,
}

/// Fully resolved `edit` invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub adapter: PathBuf,
    pub base: PathBuf,
    pub concept: PathBuf,
    pub probes: Option<PathBuf>,
    pub out: PathBuf,
    pub report: PathBuf,
    pub patterns: Vec<String>,
    pub edit: EditConfig,
    pub format: Format,
    pub timings: bool,
}

fn required(flag: &str, value: Option<PathBuf>) -> Result<PathBuf> {
    value.ok_or_else(|| Error::invalid_config(format!("--{flag}"), "missing required option"))
}

fn existing(flag: &str, path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::invalid_config(format!("--{flag}"), format!("no such file: {}", path.display())))
    }
}

fn writable(flag: &str, path: PathBuf) -> Result<PathBuf> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(path)
    } else {
        Err(Error::invalid_config(
            format!("--{flag}"),
            format!("directory does not exist: {}", parent.display()),
        ))
    }
}

/// `a_edited.st` → `a_edited.report.json`
pub fn default_report_path(out: &Path) -> PathBuf {
    out.with_extension("report.json")
}

impl CliConfig {
    pub fn resolve(args: &EditArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str::<FileConfig>(&text)
                    .map_err(|e| Error::invalid_config("--config", e.message().to_string()))?
            }
            None => FileConfig::default(),
        };
        let args = args.clone();

        let mut edit = EditConfig::default();
        macro_rules! merge {
            ($field:ident, $target:expr) => {
                if let Some(v) = args.$field.or(file.$field) {
                    $target = v.into();
                }
            };
        }
        merge!(steps, edit.steps);
        merge!(tau, edit.tau);
        merge!(eta, edit.eta);
        merge!(lr, edit.learning_rate);
        merge!(alpha, edit.merge_scale);
        merge!(seed, edit.seed);
        merge!(compute_dtype, edit.compute_dtype);
        edit.workers = args.workers.or(file.workers);
        edit.refactor_rank = args.rank.or(file.rank);
        edit.validate().map_err(flag_names)?;

        let out = writable("out", required("out", args.out.or(file.out))?)?;
        let report = args
            .report
            .or(file.report)
            .unwrap_or_else(|| default_report_path(&out));
        let patterns = args
            .patterns
            .or(file.patterns)
            .unwrap_or_else(|| DEFAULT_TARGET_PATTERNS.iter().map(|s| s.to_string()).collect());
        Ok(Self {
            adapter: existing("adapter", required("adapter", args.adapter.or(file.adapter))?)?,
            base: existing("base", required("base", args.base.or(file.base))?)?,
            concept: existing("concept", required("concept", args.concept.or(file.concept))?)?,
            probes: args.probes.or(file.probes).map(|p| existing("probes", p)).transpose()?,
            report: writable("report", report)?,
            out,
            patterns,
            edit,
            format: args.format.or(file.format).unwrap_or(Format::Text),
            timings: args.timings || file.timings.unwrap_or(false),
        })
    }
}

/// Renames `EditConfig` fields to the flags that set them.
fn flag_names(err: Error) -> Error {
    match err {
        Error::InvalidConfig { field, message } => {
            let flag = match field.as_str() {
                "learning_rate" => "lr",
                "merge_scale" => "alpha",
                "refactor_rank" => "rank",
                other => other,
            };
            Error::InvalidConfig {
                field: format!("--{}", flag.replace('_', "-")),
                message,
            }
        }
        other => other,
    }
}

/// Loads the inputs, edits, and writes the adapter and report.
pub fn run_edit(config: &CliConfig) -> Result<EditOutcome> {
    let start = Instant::now();
    let adapter = LoraAdapter::load(&config.adapter)?;
    for w in &adapter.warnings {
        log::warn!("{w}");
    }
    let base = BaseWeights::load(&config.base)?;
    let spec = load_concept_spec(&config.concept)?;
    let probes = config.probes.as_ref().map(BenignProbeSet::load).transpose()?;

    let mut outcome = edit_adapter(&adapter, &base, &spec, &config.edit, &config.patterns, probes.as_ref())?;
    if config.timings {
        outcome.report.timings = Some(Timings {
            total_seconds: start.elapsed().as_secs_f64(),
        });
    }
    outcome.adapter.save(&config.out)?;
    crate::container::write_bytes_atomic(&config.report, outcome.report.to_json().as_bytes())?;
    Ok(outcome)
}

pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Validation => EXIT_VALIDATION,
        ErrorClass::Numerical => EXIT_NUMERICAL,
        ErrorClass::Io => EXIT_IO,
    }
}

fn fail(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(err)
}

pub fn cmd_edit(args: &EditArgs) -> i32 {
    let start = Instant::now();
    let result = CliConfig::resolve(args).and_then(|config| Ok((run_edit(&config)?, config)));
    match result {
        Ok((outcome, config)) => {
            let report = &outcome.report;
            match config.format {
                Format::Json => print!("{}", report.to_json()),
                Format::Text => println!(
                    "edited {} layers: mean projection_shift {:.4}, max benign_drift {}, {:.2} s",
                    report.layers.len(),
                    report.projection_shift_mean,
                    report
                        .max_benign_drift()
                        .map_or_else(|| "n/a".to_string(), |d| format!("{d:.4}")),
                    start.elapsed().as_secs_f64()
                ),
            }
            EXIT_OK
        }
        Err(e) => fail(&e),
    }
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub adapter: PathBuf,
    /// Emit a JSON listing instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// One row of `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerListing {
    pub name: String,
    /// `[out, in]`
    pub shape: [usize; 2],
    pub rank: usize,
    pub stored_alpha: f64,
    pub dtype: String,
}

pub fn list_layers(adapter: &LoraAdapter) -> Vec<LayerListing> {
    adapter
        .layers
        .values()
        .map(|l| LayerListing {
            name: l.name.clone(),
            shape: [l.out_features(), l.in_features()],
            rank: l.rank(),
            stored_alpha: l.stored_alpha,
            dtype: l.dtypes.down.to_string(),
        })
        .collect()
}

pub fn cmd_inspect(args: &InspectArgs) -> i32 {
    let adapter = match LoraAdapter::load(&args.adapter) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let rows = list_layers(&adapter);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("listing serializes"));
    } else {
        println!("{:<64} {:>12} {:>5} {:>8} {:>5}", "layer", "shape", "rank", "alpha", "dtype");
        for r in &rows {
            println!(
                "{:<64} {:>12} {:>5} {:>8} {:>5}",
                r.name,
                format!("{}x{}", r.shape[0], r.shape[1]),
                r.rank,
                r.stored_alpha,
                r.dtype
            );
        }
    }
    for w in &adapter.warnings {
        eprintln!("warning: {w}");
    }
    EXIT_OK
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Original adapter.
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub edited: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub concept: PathBuf,
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub patterns: Option<Vec<String>>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub max_shift: f64,
    #[arg(long, default_value_t = 0.1)]
    pub max_drift: f64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

/// Outcome of `verify`.
#[derive(Debug, Clone, Serialize)]
pub struct Verification {
    pub projection_shift_mean: f64,
    pub max_benign_drift: f64,
    pub max_shift: f64,
    pub max_drift: f64,
    pub passed: bool,
    pub layers: Vec<VerifiedLayer>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifiedLayer {
    pub name: String,
    pub projection_shift: f64,
    pub benign_drift_max: f64,
    pub param_drift: f64,
}

pub fn run_verify(args: &VerifyArgs) -> Result<Verification> {
    let original = LoraAdapter::load(&args.adapter)?;
    let edited = LoraAdapter::load(&args.edited)?;
    let base = BaseWeights::load(&args.base)?;
    let spec = load_concept_spec(&args.concept)?;
    let probes = BenignProbeSet::load(&args.probes)?;
    let patterns = args
        .patterns
        .clone()
        .unwrap_or_else(|| DEFAULT_TARGET_PATTERNS.iter().map(|s| s.to_string()).collect());
    let layers = resolve_target_layers(&original, &patterns)?;
    let Assessment {
        layers: metrics,
        projection_shift_mean,
        benign_drift,
        ..
    } = assess(&original, &edited, &base, &spec, Some(&probes), args.alpha, &layers)?;
    let max_benign_drift = benign_drift.map_or(0.0, |d| d.max);
    Ok(Verification {
        projection_shift_mean,
        max_benign_drift,
        max_shift: args.max_shift,
        max_drift: args.max_drift,
        passed: projection_shift_mean <= args.max_shift && max_benign_drift <= args.max_drift,
        layers: metrics
            .into_iter()
            .map(|m| VerifiedLayer {
                projection_shift: m.projection_shift.iter().sum::<f64>() / m.projection_shift.len() as f64,
                benign_drift_max: m.benign_drift.iter().copied().fold(0.0, f64::max),
                param_drift: m.param_drift,
                name: m.name,
            })
            .collect(),
    })
}

pub fn cmd_verify(args: &VerifyArgs) -> i32 {
    let v = match run_verify(args) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&v).expect("verification serializes")),
        Format::Text => {
            println!("{:<64} {:>10} {:>10} {:>10}", "layer", "shift", "drift", "param");
            for l in &v.layers {
                println!(
                    "{:<64} {:>10.4} {:>10.4} {:>10.4}",
                    l.name, l.projection_shift, l.benign_drift_max, l.param_drift
                );
            }
            let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
            println!(
                "projection_shift mean {:.6} (max {}) {}",
                v.projection_shift_mean,
                v.max_shift,
                verdict(v.projection_shift_mean <= v.max_shift)
            );
            println!(
                "benign_drift max {:.6} (max {}) {}",
                v.max_benign_drift,
                v.max_drift,
                verdict(v.max_benign_drift <= v.max_drift)
            );
        }
    }
    if v.passed {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    }
}

#[derive(Debug, Clone, Args)]
pub struct MergeArgs {
    /// Input adapter; repeat once per adapter.
    #[arg(long = "adapter", required = true)]
    pub adapters: Vec<PathBuf>,
    /// Weight of the adapter at the same position.
    #[arg(long = "weight", allow_negative_numbers = true)]
    pub weights: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run_merge(args: &MergeArgs) -> Result<LoraAdapter> {
    if args.adapters.len() < 2 {
        return Err(Error::invalid_config("--adapter", "at least two adapters are required"));
    }
    if args.weights.len() != args.adapters.len() {
        return Err(Error::invalid_config(
            "--weight",
            format!("{} weights for {} adapters", args.weights.len(), args.adapters.len()),
        ));
    }
    if let Some(w) = args.weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::invalid_config("--weight", format!("non-finite weight {w}")));
    }
    let adapters = args.adapters.iter().map(LoraAdapter::load).collect::<Result<Vec<_>>>()?;
    let inputs: Vec<_> = adapters.iter().zip(args.weights.iter().copied()).collect();
    let merged = merge_adapters(&inputs)?;
    merged.save(&args.out)?;
    Ok(merged)
}

pub fn cmd_merge(args: &MergeArgs) -> i32 {
    match run_merge(args) {
        Ok(merged) => {
            println!("merged {} adapters into {} layers", args.adapters.len(), merged.layers.len());
            EXIT_OK
        }
        // incompatible layer shapes are a property of the input files
        Err(e @ Error::ShapeMismatch(_)) => {
            eprintln!("error: {e}");
            EXIT_IO
        }
        Err(e) => fail(&e),
    }
}

#[derive(Debug, Clone, Args)]
pub struct FetchArgs {
    /// Base URL of the embedding service.
    #[arg(long)]
    pub url: String,
    /// Concept to erase, e.g. "nudity".
    #[arg(long)]
    pub concept: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub encoder_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_fetch(args: &FetchArgs) -> i32 {
    let mut client = EmbeddingClient::new(&args.url);
    if let Some(id) = &args.encoder_id {
        client = client.with_encoder_id(id);
    }
    match fetch_concept_bundle(&client, &args.concept, args.k, Some(&args.out)) {
        Ok(spec) => {
            let (l, n) = spec.embedding_shape();
            let absent = spec.antonyms.iter().filter(|a| a.is_none()).count();
            println!(
                "wrote {} (K = {}, {l}x{n}, {absent} antonyms absent)",
                args.out.display(),
                spec.k()
            );
            EXIT_OK
        }
        Err(e) => fail(&e),
    }
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Job spool directory (created if missing).
    #[arg(long)]
    pub spool: PathBuf,
    /// Registered base model, `NAME=PATH`; repeatable.
    #[arg(long = "base", value_parser = parse_base)]
    pub bases: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 64)]
    pub queue_depth: usize,
    #[arg(long, default_value_t = 24.0)]
    pub ttl_hours: f64,
    #[arg(long, default_value_t = 512)]
    pub max_upload_mb: usize,
}

fn parse_base(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    if name.is_empty() {
        return Err("empty base name".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

impl ServeArgs {
    pub fn service_config(&self) -> Result<ServiceConfig> {
        if !(self.ttl_hours > 0.0 && self.ttl_hours.is_finite()) {
            return Err(Error::invalid_config("--ttl-hours", "must be positive"));
        }
        let bases: BTreeMap<String, PathBuf> = self.bases.iter().cloned().collect();
        Ok(ServiceConfig {
            bind: self.bind,
            spool_dir: self.spool.clone(),
            bases,
            workers: self.workers,
            queue_depth: self.queue_depth,
            ttl: Duration::from_secs_f64(self.ttl_hours * 3600.0),
            max_upload_bytes: self.max_upload_mb * 1024 * 1024,
            ..ServiceConfig::default()
        })
    }
}

pub fn cmd_serve(args: &ServeArgs) -> i32 {
    match args.service_config().and_then(crate::service::run) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}

pub fn run(cli: Cli) -> i32 {
    match &cli.command {
        Command::Edit(a) => cmd_edit(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Fetch(a) => cmd_fetch(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    run(cli)
}
