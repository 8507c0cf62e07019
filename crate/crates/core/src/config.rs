//! The run configuration: one TOML file holding every setting a command
//! reads. Command-line flags override values loaded from the file, and each
//! run writes the resolved file next to its outputs.

use std::path::{Path, PathBuf};

use serde::{de::Error as _, Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::channel::SnrConvention;
use crate::eval::BerSettings;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Name of the resolved configuration written into the output directory.
pub const RESOLVED_NAME: &str = "config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn over_tiny<'de, D: Deserializer<'de>>(d: D) -> Result<ModelConfig, D::Error> {
    let given = toml::Table::deserialize(d)?;
    let mut merged = toml::Table::try_from(ModelConfig::tiny()).map_err(D::Error::custom)?;
    merged.extend(given);
    toml::Value::Table(merged).try_into().map_err(D::Error::custom)
}

fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundled code name or path to an alist file.
    pub code: String,
    pub seed: u64,
    /// Worker threads for training shards and BER chunks.
    pub workers: usize,
    pub out: PathBuf,
    /// Checkpoint read by `eval`, `bench`, `inspect` and `gradcheck`.
    pub checkpoint: Option<PathBuf>,
    /// Keys missing from `[model]` come from [`ModelConfig::tiny`].
    #[serde(deserialize_with = "over_tiny")]
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub inspect: InspectSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            code: "hamming_7_4".into(),
            seed: 0,
            workers: available_cores(),
            out: PathBuf::from("out"),
            checkpoint: None,
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            inspect: InspectSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

/// Decoder choice and BER stopping rule. `bench` uses the same decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `eccm`, `bp` or `hard`.
    pub decoder: String,
    pub snr_db: Vec<f64>,
    pub early_stop: bool,
    pub bp_iterations: usize,
    pub target_errors: u64,
    pub max_frames: u64,
    pub chunk_frames: usize,
    pub snr_convention: SnrConvention,
}

impl Default for EvalSection {
    fn default() -> Self {
        let ber = BerSettings::default();
        Self {
            decoder: "eccm".into(),
            snr_db: vec![4.0, 5.0, 6.0],
            early_stop: true,
            bp_iterations: crate::bp::DEFAULT_ITERATIONS,
            target_errors: ber.target_errors,
            max_frames: ber.max_frames,
            chunk_frames: ber.chunk_frames,
            snr_convention: ber.snr_convention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub batch_size: usize,
    pub batches: usize,
    pub snr_db: Vec<f64>,
    /// Also time the decoder with early stopping off, as a reference row.
    pub reference_without_early_stop: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batch_size: 512,
            batches: 200,
            snr_db: vec![4.0, 5.0, 6.0],
            reference_without_early_stop: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectSection {
    /// Bit positions to flip; empty means every position.
    pub positions: Vec<usize>,
    /// The flipped bit receives `y = -flip_magnitude`.
    pub flip_magnitude: f64,
}

impl Default for InspectSection {
    fn default() -> Self {
        Self {
            positions: Vec::new(),
            flip_magnitude: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub samples: usize,
    pub snr_db: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            samples: 3,
            snr_db: 1.0,
            tolerance: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the configuration as `config.toml` inside `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    /// Training settings with the run-level seed and worker count applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            workers: self.workers,
            ..self.train.clone()
        }
    }

    pub fn ber_settings(&self) -> BerSettings {
        BerSettings {
            target_errors: self.eval.target_errors,
            max_frames: self.eval.max_frames,
            chunk_frames: self.eval.chunk_frames,
            workers: self.workers,
            snr_convention: self.eval.snr_convention,
        }
    }

    /// Checks that do not need the code or a checkpoint.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if i64::try_from(self.seed).is_err() {
            return bad(format!("seed {} does not fit a TOML integer", self.seed));
        }
        if let Err(e) = self.train_config().validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.ber_settings().validate() {
            return bad(e.to_string());
        }
        if !crate::eval::DECODER_IDS.contains(&self.eval.decoder.as_str()) {
            return bad(format!("unknown decoder '{}' (expected eccm, bp or hard)", self.eval.decoder));
        }
        for (name, snrs) in [("eval.snr_db", &self.eval.snr_db), ("bench.snr_db", &self.bench.snr_db)] {
            if snrs.is_empty() || snrs.iter().any(|s| !s.is_finite()) {
                return bad(format!("{name} must be a non-empty list of finite values"));
            }
        }
        if self.bench.batch_size == 0 || self.bench.batches == 0 {
            return bad("bench.batch_size and bench.batches must be positive".into());
        }
        if !(self.inspect.flip_magnitude.is_finite() && self.inspect.flip_magnitude > 0.0) {
            return bad("inspect.flip_magnitude must be positive".into());
        }
        let gc = &self.gradcheck;
        if gc.samples == 0 || !gc.snr_db.is_finite() || !(gc.tolerance > 0.0) {
            return bad("gradcheck needs samples > 0, a finite snr_db and a positive tolerance".into());
        }
        Ok(())
    }
}
