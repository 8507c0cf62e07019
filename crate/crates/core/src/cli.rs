//! The `eccm` command line.
//!
//! Every subcommand loads an optional TOML config, applies flag overrides,
//! writes the resolved config into `--out` and then runs one library entry
//! point. Exit codes: 0 success, 1 other failures, 2 configuration or usage
//! errors, 3 missing files, 4 numerical aborts.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint;
use crate::codes;
use crate::config::{ConfigError, RunConfig};
use crate::eval::{self, EvalError};
use crate::gf2::{CodeError, ParityCheckMatrix};
use crate::model::{EccmModel, Layout, MambaMask, ModelError};
use crate::training::{self, TrainError};
use crate::mamba::TailMode;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

fn io_error(e: std::io::Error, path: Option<&Path>) -> CliError {
    match (e.kind(), path) {
        (ErrorKind::NotFound, Some(p)) => CliError::MissingFile(p.to_path_buf()),
        _ => CliError::Failed(e.to_string()),
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { path, source } => io_error(source, Some(&path)),
            ConfigError::Parse { .. } | ConfigError::Invalid(_) => CliError::Usage(e.to_string()),
            ConfigError::Serialize(_) | ConfigError::Io(_) => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::MaskTooWide { .. } => CliError::Usage(e.to_string()),
            ModelError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            ModelError::Code(c) => c.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<CodeError> for CliError {
    fn from(e: CodeError) -> Self {
        match e {
            CodeError::UnknownCode(_) | CodeError::Parse { .. } | CodeError::RankDeficient { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownDecoder(_)
            | EvalError::MissingModel(_)
            | EvalError::Settings(_)
            | EvalError::PositionOutOfRange { .. } => CliError::Usage(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Code(c) => c.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "eccm", version, about = "Neural and classical decoders for binary linear block codes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List or describe the available parity-check matrices.
    Codes {
        #[command(subcommand)]
        action: CodesAction,
    },
    /// Train a model on zero-codeword batches.
    Train(Overrides),
    /// Measure BER at one or more SNR points.
    Eval(Overrides),
    /// Measure decoding latency per codeword.
    Bench(Overrides),
    /// Export summed attention maps for clean and single-error inputs.
    Inspect(Overrides),
    /// Compare every parameter gradient with finite differences.
    Gradcheck(Overrides),
}

#[derive(Debug, Subcommand)]
pub enum CodesAction {
    List,
    Show { name: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TailArg {
    Zero,
    Pass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Hybrid,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    F,
    G,
}

/// Flags shared by the run commands. Each one overrides the matching
/// config key; `--snr` and `--batch-size` apply to the running command's
/// section.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bundled code name or path to an alist file.
    #[arg(long)]
    pub code: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated SNR points in dB.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub snr: Option<Vec<f64>>,
    #[arg(long)]
    pub target_errors: Option<u64>,
    #[arg(long)]
    pub max_frames: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub early_stop: Option<Switch>,
    #[arg(long)]
    pub tail_mode: Option<TailArg>,
    #[arg(long)]
    pub multi_loss: Option<Switch>,
    #[arg(long)]
    pub layout: Option<LayoutArg>,
    #[arg(long)]
    pub mamba_mask: Option<MaskArg>,
    /// eccm, bp or hard.
    #[arg(long)]
    pub decoder: Option<String>,
    #[arg(long)]
    pub bp_iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    /// Comma-separated bit positions for `inspect`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub positions: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Section {
    Train,
    Eval,
    Bench,
    Inspect,
    Gradcheck,
}

impl Overrides {
    /// Loads `--config` (or the defaults) and applies the flags.
    fn resolve(&self, section: Section) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.code {
            c.code = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            c.checkpoint = Some(v.clone());
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = self.target_errors {
            c.eval.target_errors = v;
        }
        if let Some(v) = self.max_frames {
            c.eval.max_frames = v;
        }
        if let Some(v) = self.early_stop {
            c.eval.early_stop = v.into();
            c.train.early_stop = v.into();
        }
        if let Some(v) = self.tail_mode {
            c.model.tail_mode = match v {
                TailArg::Zero => TailMode::Zero,
                TailArg::Pass => TailMode::Pass,
            };
        }
        if let Some(v) = self.multi_loss {
            c.train.multi_loss = v.into();
        }
        if let Some(v) = self.layout {
            c.model.layout = match v {
                LayoutArg::Hybrid => Layout::Hybrid,
                LayoutArg::Transformer => Layout::Transformer,
            };
        }
        if let Some(v) = self.mamba_mask {
            c.model.mamba_mask = match v {
                MaskArg::F => MambaMask::F,
                MaskArg::G => MambaMask::G,
            };
        }
        if let Some(v) = &self.decoder {
            c.eval.decoder = v.clone();
        }
        if let Some(v) = self.bp_iterations {
            c.eval.bp_iterations = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.batches_per_epoch {
            c.train.batches_per_epoch = v;
        }
        if let Some(v) = &self.positions {
            c.inspect.positions = v.clone();
        }
        if let Some(v) = &self.snr {
            match section {
                Section::Train => c.train.snr_range_db = v.clone(),
                Section::Eval => c.eval.snr_db = v.clone(),
                Section::Bench => c.bench.snr_db = v.clone(),
                Section::Inspect => {}
                Section::Gradcheck => c.gradcheck.snr_db = v[0],
            }
        }
        if let Some(v) = self.batch_size {
            match section {
                Section::Train => c.train.batch_size = v,
                Section::Bench => c.bench.batch_size = v,
                _ => c.eval.chunk_frames = v,
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `args` and runs the command, printing to stdout and stderr.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns its report text.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Codes { action } => codes_command(action),
        Command::Train(o) => train_command(&o.resolve(Section::Train)?),
        Command::Eval(o) => eval_command(&o.resolve(Section::Eval)?),
        Command::Bench(o) => bench_command(&o.resolve(Section::Bench)?),
        Command::Inspect(o) => inspect_command(&o.resolve(Section::Inspect)?),
        Command::Gradcheck(o) => gradcheck_command(&o.resolve(Section::Gradcheck)?),
    }
}

fn load_code(name: &str) -> Result<ParityCheckMatrix, CliError> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "alist") && !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(codes::load_code(name)?)
}

fn load_checkpoint(path: &Path) -> Result<EccmModel, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(checkpoint::load(path)?)
}

fn weights(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn codes_command(action: &CodesAction) -> Result<String, CliError> {
    let mut s = String::new();
    match action {
        CodesAction::List => {
            for name in codes::available() {
                let h = load_code(&name)?;
                writeln!(s, "{name}\tn={} k={}", h.n(), h.k()).map_err(failed)?;
            }
        }
        CodesAction::Show { name } => {
            let h = load_code(name)?;
            let m = h.matrix();
            let col_weights: Vec<usize> = (0..m.cols()).map(|c| (0..m.rows()).map(|r| m.get(r, c) as usize).sum()).collect();
            writeln!(s, "name={}", h.name()).map_err(failed)?;
            writeln!(s, "n={} k={} rate={:.6}", h.n(), h.k(), h.rate()).map_err(failed)?;
            writeln!(s, "row_weights=({})", weights(&h.row_weights())).map_err(failed)?;
            writeln!(s, "column_weights=({})", weights(&col_weights)).map_err(failed)?;
            writeln!(s, "H:").map_err(failed)?;
            for r in 0..m.rows() {
                let row: String = m.row(r).iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
                writeln!(s, "  {row}").map_err(failed)?;
            }
        }
    }
    Ok(s)
}

/// Loads the checkpoint named by the config, checks it belongs to the
/// configured code and records its model settings in the config.
fn model_from_config(c: &mut RunConfig, code: &ParityCheckMatrix) -> Result<Option<EccmModel>, CliError> {
    let Some(path) = c.checkpoint.clone() else {
        return Ok(None);
    };
    let model = load_checkpoint(&path)?;
    if model.code().matrix() != code.matrix() {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained on {}, not {}",
            path.display(),
            model.code().name(),
            code.name()
        )));
    }
    c.model = *model.config();
    Ok(Some(model))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(failed)?;
    std::fs::write(path, text + "\n").map_err(|e| io_error(e, None))
}

fn train_command(c: &RunConfig) -> Result<String, CliError> {
    let code = load_code(&c.code)?;
    c.model.validate(&code)?;
    c.write_resolved(&c.out)?;
    let cfg = c.train_config();
    let outcome = training::train(&code, c.model, &cfg, Some(&c.out), |e| {
        let m = &e.metrics;
        eprintln!(
            "epoch {:>3}  step {:>7}  lr {:.3e}  loss {:.5}  val_ber@4dB {:.5}  layers {:.2}",
            m.epoch, m.step, m.lr, m.loss, m.val_ber_4db, m.layers_mean
        );
    })?;
    let files = training::TrainFiles { dir: c.out.clone() };
    let best_ber = outcome
        .epochs
        .iter()
        .find(|e| e.metrics.epoch == outcome.best_epoch)
        .map_or(f64::NAN, |e| e.validation.ber);
    let mut s = String::new();
    writeln!(
        s,
        "trained {} epochs on {}; best epoch {} with validation BER {:.6}{}",
        outcome.epochs.len(),
        code.name(),
        outcome.best_epoch,
        best_ber,
        if outcome.plateaued { " (stopped on plateau)" } else { "" }
    )
    .map_err(failed)?;
    writeln!(s, "best checkpoint: {}", files.best_checkpoint().display()).map_err(failed)?;
    Ok(s)
}

fn eval_command(c: &RunConfig) -> Result<String, CliError> {
    let mut c = c.clone();
    let code = load_code(&c.code)?;
    let model = model_from_config(&mut c, &code)?;
    let decoder = eval::build_decoder(&c.eval.decoder, &code, model, c.eval.early_stop, c.eval.bp_iterations)?;
    c.write_resolved(&c.out)?;
    let mut report = eval::evaluate(decoder.as_ref(), &code, &c.eval.snr_db, &c.ber_settings(), c.seed)?;
    report.config = serde_json::to_value(&c).map_err(failed)?;
    let path = c.out.join("eval.csv");
    eval::export_report(&report, &path)?;
    let mut s = String::new();
    writeln!(s, "{} on {} ({} errors target)", report.decoder, report.code, c.eval.target_errors).map_err(failed)?;
    writeln!(s, "snr_db  ber          -ln(ber)  errors  frames  mean_layers").map_err(failed)?;
    for r in &report.records {
        writeln!(
            s,
            "{:<6}  {:<11.5e}  {:<8.3}  {:<6}  {:<6}  {:.3}{}",
            r.snr_db,
            r.ber,
            r.neg_ln_ber,
            r.errors,
            r.frames,
            r.mean_layers,
            if r.censored { "  (censored)" } else { "" }
        )
        .map_err(failed)?;
        if r.invalid_early_stops > 0 {
            return Err(CliError::Numerical(format!(
                "{} early-stopped frames at {} dB are not codewords",
                r.invalid_early_stops, r.snr_db
            )));
        }
    }
    writeln!(s, "report: {}", path.display()).map_err(failed)?;
    Ok(s)
}

#[derive(Serialize)]
struct BenchRow {
    decoder: String,
    early_stop: bool,
    snr_db: f64,
    batch_size: usize,
    batches: usize,
    us_per_codeword: f64,
    mean_layers: f64,
}

fn bench_command(c: &RunConfig) -> Result<String, CliError> {
    let mut c = c.clone();
    let code = load_code(&c.code)?;
    let model = model_from_config(&mut c, &code)?;
    c.write_resolved(&c.out)?;
    let mut runs: Vec<(bool, f64)> = c.bench.snr_db.iter().map(|&s| (c.eval.early_stop, s)).collect();
    if c.eval.early_stop && c.bench.reference_without_early_stop {
        runs.push((false, c.bench.snr_db[0]));
    }
    let mut rows = Vec::new();
    for (early_stop, snr) in runs {
        let decoder = eval::build_decoder(&c.eval.decoder, &code, model.clone(), early_stop, c.eval.bp_iterations)?;
        let r = eval::latency_bench(
            decoder.as_ref(),
            &code,
            c.bench.batch_size,
            c.bench.batches,
            snr,
            c.eval.snr_convention,
            c.seed,
        )?;
        rows.push(BenchRow {
            decoder: r.decoder,
            early_stop,
            snr_db: r.snr_db,
            batch_size: r.batch_size,
            batches: r.batches,
            us_per_codeword: r.us_per_codeword,
            mean_layers: r.mean_layers,
        });
    }
    let csv_path = c.out.join("bench.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(failed)?;
    for r in &rows {
        w.serialize(r).map_err(failed)?;
    }
    w.flush().map_err(failed)?;
    write_json(
        &c.out.join("bench.json"),
        &serde_json::json!({ "version": eval::version_string(), "code": code.name(), "rows": rows, "config": c }),
    )?;
    let mut s = String::new();
    writeln!(s, "decoder  early_stop  snr_db  us/codeword  mean_layers").map_err(failed)?;
    for r in &rows {
        writeln!(
            s,
            "{:<7}  {:<10}  {:<6}  {:<11.2}  {:.3}",
            r.decoder, r.early_stop, r.snr_db, r.us_per_codeword, r.mean_layers
        )
        .map_err(failed)?;
    }
    Ok(s)
}

#[derive(Serialize)]
struct InspectRow {
    position: usize,
    /// Magnitude column with the largest absolute difference mass.
    peak_column: usize,
    column_mass: Vec<f64>,
    syndrome_mass_clean: f64,
    syndrome_mass_flipped: f64,
}

fn inspect_command(c: &RunConfig) -> Result<String, CliError> {
    let mut c = c.clone();
    let code = load_code(&c.code)?;
    let model = model_from_config(&mut c, &code)?
        .ok_or_else(|| CliError::Usage("inspect needs --checkpoint".into()))?;
    c.write_resolved(&c.out)?;
    let n = code.n();
    let positions: Vec<usize> = if c.inspect.positions.is_empty() {
        (0..n).collect()
    } else {
        c.inspect.positions.clone()
    };
    let pairs = eval::attention_inspect(&model, &positions, c.inspect.flip_magnitude)?;
    let dir = c.out.join("attention");
    std::fs::create_dir_all(&dir).map_err(failed)?;
    let mut rows = Vec::new();
    if let Some(p) = pairs.first() {
        eval::write_matrix_csv(&p.clean, &dir.join("clean.csv"))?;
    }
    for p in &pairs {
        eval::write_matrix_csv(&p.flipped, &dir.join(format!("flip_{}.csv", p.position)))?;
        eval::write_matrix_csv(&p.difference(), &dir.join(format!("diff_{}.csv", p.position)))?;
        let mass = p.magnitude_column_mass(n);
        let peak = (0..n).fold(0, |best, i| if mass[i] > mass[best] { i } else { best });
        rows.push(InspectRow {
            position: p.position,
            peak_column: peak,
            column_mass: mass,
            syndrome_mass_clean: eval::AttentionPair::syndrome_block_mass(&p.clean, n),
            syndrome_mass_flipped: eval::AttentionPair::syndrome_block_mass(&p.flipped, n),
        });
    }
    let hits = rows.iter().filter(|r| r.peak_column == r.position).count();
    write_json(
        &c.out.join("inspect.json"),
        &serde_json::json!({ "version": eval::version_string(), "hits": hits, "positions": rows }),
    )?;
    let mut s = String::new();
    writeln!(s, "position  peak_column  syndrome_mass(clean -> flipped)").map_err(failed)?;
    for r in &rows {
        writeln!(
            s,
            "{:<8}  {:<11}  {:.4} -> {:.4}",
            r.position, r.peak_column, r.syndrome_mass_clean, r.syndrome_mass_flipped
        )
        .map_err(failed)?;
    }
    writeln!(s, "peak at the flipped column for {hits} of {} positions", rows.len()).map_err(failed)?;
    Ok(s)
}

fn gradcheck_command(c: &RunConfig) -> Result<String, CliError> {
    let mut c = c.clone();
    let code = load_code(&c.code)?;
    let model = match model_from_config(&mut c, &code)? {
        Some(m) => m,
        None => EccmModel::new(code.clone(), c.model, c.seed)?,
    };
    c.write_resolved(&c.out)?;
    let g = &c.gradcheck;
    let report = training::gradcheck(&model, g.samples, g.snr_db, c.seed)?;
    let worst = report.worst.clone().map(|(name, i)| format!("{name}[{i}]")).unwrap_or_default();
    write_json(
        &c.out.join("gradcheck.json"),
        &serde_json::json!({
            "checked": report.checked,
            "max_rel_error": report.max_rel_error,
            "worst": worst,
            "tolerance": g.tolerance,
        }),
    )?;
    let line = format!(
        "checked {} parameters, max relative error {:.3e} at {worst}\n",
        report.checked, report.max_rel_error
    );
    if report.max_rel_error < g.tolerance {
        Ok(line)
    } else {
        Err(CliError::Numerical(format!("gradient check failed: {}", line.trim_end())))
    }
}
