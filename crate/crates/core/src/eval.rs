//! BER measurement, latency benchmarking and attention inspection.
//!
//! BER runs draw random codewords, stop once `target_errors` bit errors
//! have been seen (or `max_frames` frames simulated) and report `-ln(BER)`
//! with a Wilson 95% interval. Frames are simulated in fixed-size chunks,
//! each from its own seeded stream, and merged in chunk order, so the
//! result does not depend on the number of worker threads.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::bp::{TannerGraph, LLR_CLAMP};
use crate::channel::{hard_decision, snr_to_sigma, transmit, ChannelSample, SnrConvention};
use crate::gf2::{encode, CodeError, ParityCheckMatrix};
use crate::model::{EccmModel, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error("unknown decoder '{0}' (expected eccm, bp or hard)")]
    UnknownDecoder(String),
    #[error("decoder '{0}' needs a trained checkpoint")]
    MissingModel(String),
    #[error("error position {position} outside 0..{n}")]
    PositionOutOfRange { position: usize, n: usize },
    #[error("invalid evaluation settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<crate::channel::ChannelError> for EvalError {
    fn from(e: crate::channel::ChannelError) -> Self {
        EvalError::Model(e.into())
    }
}

/// Output of one decoded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub word: Vec<u8>,
    /// Layers evaluated by the neural decoder, BP iterations used, 0 for
    /// hard decisions.
    pub layers: usize,
    pub stopped_early: bool,
}

pub trait Decoder: Sync {
    fn id(&self) -> &str;
    fn decode_batch(&self, samples: &[ChannelSample]) -> Result<Vec<Decoded>, EvalError>;
}

/// Sign decisions on the channel output.
pub struct HardDecoder;

impl Decoder for HardDecoder {
    fn id(&self) -> &str {
        "hard"
    }

    fn decode_batch(&self, samples: &[ChannelSample]) -> Result<Vec<Decoded>, EvalError> {
        Ok(samples
            .iter()
            .map(|s| Decoded {
                word: hard_decision(&s.y),
                layers: 0,
                stopped_early: false,
            })
            .collect())
    }
}

pub struct BpDecoder {
    graph: TannerGraph,
    pub iterations: usize,
}

impl BpDecoder {
    pub fn new(code: &ParityCheckMatrix, iterations: usize) -> Self {
        Self {
            graph: TannerGraph::new(code),
            iterations,
        }
    }
}

impl Decoder for BpDecoder {
    fn id(&self) -> &str {
        "bp"
    }

    fn decode_batch(&self, samples: &[ChannelSample]) -> Result<Vec<Decoded>, EvalError> {
        samples
            .iter()
            .map(|s| {
                let r = self.graph.decode(&s.llr(LLR_CLAMP), self.iterations)?;
                Ok(Decoded {
                    word: r.word,
                    layers: r.iterations,
                    stopped_early: r.converged && r.iterations < self.iterations,
                })
            })
            .collect()
    }
}

pub struct EccmDecoder {
    pub model: EccmModel,
    pub early_stop: bool,
}

impl Decoder for EccmDecoder {
    fn id(&self) -> &str {
        "eccm"
    }

    fn decode_batch(&self, samples: &[ChannelSample]) -> Result<Vec<Decoded>, EvalError> {
        let inputs = samples
            .iter()
            .map(|s| self.model.input_for(s))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<_> = inputs.iter().collect();
        Ok(self
            .model
            .decode_batch(&refs, self.early_stop, false)?
            .into_iter()
            .map(|r| Decoded {
                layers: r.i_last,
                stopped_early: r.stopped_early,
                word: r.codeword_estimate,
            })
            .collect())
    }
}

/// Builds a decoder from its registry id.
pub fn build_decoder(
    id: &str,
    code: &ParityCheckMatrix,
    model: Option<EccmModel>,
    early_stop: bool,
    bp_iterations: usize,
) -> Result<Box<dyn Decoder>, EvalError> {
    match id {
        "hard" => Ok(Box::new(HardDecoder)),
        "bp" => Ok(Box::new(BpDecoder::new(code, bp_iterations))),
        "eccm" => {
            let model = model.ok_or_else(|| EvalError::MissingModel(id.into()))?;
            if model.code().matrix() != code.matrix() {
                return Err(EvalError::Settings("checkpoint was trained on a different code".into()));
            }
            Ok(Box::new(EccmDecoder { model, early_stop }))
        }
        other => Err(EvalError::UnknownDecoder(other.into())),
    }
}

pub const DECODER_IDS: [&str; 3] = ["eccm", "bp", "hard"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BerSettings {
    pub target_errors: u64,
    pub max_frames: u64,
    /// Frames per seeded chunk.
    pub chunk_frames: usize,
    /// Set from the run-level worker count.
    #[serde(skip)]
    pub workers: usize,
    pub snr_convention: SnrConvention,
}

impl Default for BerSettings {
    fn default() -> Self {
        Self {
            target_errors: 100,
            max_frames: 10_000_000,
            chunk_frames: 256,
            workers: 1,
            snr_convention: SnrConvention::Ebn0,
        }
    }
}

impl BerSettings {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.target_errors == 0 || self.max_frames == 0 || self.chunk_frames == 0 || self.workers == 0 {
            return Err(EvalError::Settings(
                "target_errors, max_frames, chunk_frames and workers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One SNR point of a BER run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerRecord {
    pub snr_db: f64,
    pub bits: u64,
    pub errors: u64,
    /// `errors / bits`.
    pub ber: f64,
    /// `-ln(ber)`; infinite when no error was seen.
    #[serde(with = "finite_or_null")]
    pub neg_ln_ber: f64,
    pub frames: u64,
    pub frame_errors: u64,
    pub mean_layers: f64,
    /// Wilson 95% interval for the BER.
    pub ber_low: f64,
    pub ber_high: f64,
    /// The run hit `max_frames` before `target_errors`.
    pub censored: bool,
    pub early_stopped_frames: u64,
    /// Stopped early but not a codeword; always zero for a correct decoder.
    pub invalid_early_stops: u64,
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Wilson score interval at confidence `1 - alpha`.
pub fn wilson_interval(errors: u64, trials: u64, alpha: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    frames: u64,
    errors: u64,
    frame_errors: u64,
    layers: u64,
    early: u64,
    invalid_early: u64,
}

fn run_chunk(
    decoder: &dyn Decoder,
    code: &ParityCheckMatrix,
    gen: &crate::gf2::BinaryMatrix,
    sigma: f64,
    snr_db: f64,
    frames: usize,
    seed: u64,
    chunk: u64,
) -> Result<Counts, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    let mut samples = Vec::with_capacity(frames);
    for _ in 0..frames {
        let msg: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
        samples.push(transmit(&encode(gen, &msg)?, sigma, snr_db, &mut rng)?);
    }
    let mut c = Counts::default();
    for (d, s) in decoder.decode_batch(&samples)?.iter().zip(&samples) {
        let e = d.word.iter().zip(&s.x).filter(|(a, b)| a != b).count() as u64;
        c.frames += 1;
        c.errors += e;
        c.frame_errors += u64::from(e > 0);
        c.layers += d.layers as u64;
        if d.stopped_early {
            c.early += 1;
            c.invalid_early += u64::from(!code.is_codeword(&d.word)?);
        }
    }
    Ok(c)
}

/// Simulates random codewords at one SNR until the error target or the
/// frame budget is reached.
pub fn ber_run(
    decoder: &dyn Decoder,
    code: &ParityCheckMatrix,
    snr_db: f64,
    settings: &BerSettings,
    seed: u64,
) -> Result<BerRecord, EvalError> {
    settings.validate()?;
    let gen = code.generator_matrix()?;
    let sigma = snr_to_sigma(snr_db, code.rate(), settings.snr_convention)?;
    let chunk = settings.chunk_frames as u64;
    let total_chunks = settings.max_frames.div_ceil(chunk);
    let frames_in = |j: u64| chunk.min(settings.max_frames - j * chunk) as usize;
    let mut total = Counts::default();
    let mut next = 0u64;
    'outer: while next < total_chunks {
        let round: Vec<u64> = (next..total_chunks.min(next + settings.workers as u64)).collect();
        let results: Vec<Mutex<Option<Result<Counts, EvalError>>>> = round.iter().map(|_| Mutex::new(None)).collect();
        let run = |i: usize| {
            let r = run_chunk(decoder, code, &gen, sigma, snr_db, frames_in(round[i]), seed, round[i]);
            *results[i].lock().expect("unpoisoned") = Some(r);
        };
        if round.len() == 1 {
            run(0);
        } else {
            std::thread::scope(|s| {
                for i in 0..round.len() {
                    s.spawn(move || run(i));
                }
            });
        }
        for slot in results {
            let c = slot.into_inner().expect("unpoisoned").expect("chunk ran")?;
            total.frames += c.frames;
            total.errors += c.errors;
            total.frame_errors += c.frame_errors;
            total.layers += c.layers;
            total.early += c.early;
            total.invalid_early += c.invalid_early;
            next += 1;
            // Later chunks of this round are discarded, which keeps the
            // result independent of the worker count.
            if total.errors >= settings.target_errors {
                break 'outer;
            }
        }
    }
    let bits = total.frames * code.n() as u64;
    let ber = total.errors as f64 / bits as f64;
    let (ber_low, ber_high) = wilson_interval(total.errors, bits, 0.05);
    Ok(BerRecord {
        snr_db,
        bits,
        errors: total.errors,
        ber,
        neg_ln_ber: -ber.ln(),
        frames: total.frames,
        frame_errors: total.frame_errors,
        mean_layers: total.layers as f64 / total.frames as f64,
        ber_low,
        ber_high,
        censored: total.errors < settings.target_errors,
        early_stopped_frames: total.early,
        invalid_early_stops: total.invalid_early,
    })
}

/// A BER run over several SNR points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub code: String,
    pub decoder: String,
    pub seed: u64,
    pub version: String,
    pub settings: BerSettings,
    /// Free-form run configuration (the resolved config file, for instance).
    pub config: serde_json::Value,
    pub records: Vec<BerRecord>,
    pub wall_seconds: f64,
}

/// Evaluates every SNR point; point `i` uses seed `seed + i`.
pub fn evaluate(
    decoder: &dyn Decoder,
    code: &ParityCheckMatrix,
    snrs: &[f64],
    settings: &BerSettings,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    let records = snrs
        .iter()
        .enumerate()
        .map(|(i, &snr)| ber_run(decoder, code, snr, settings, seed.wrapping_add(i as u64)))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        code: code.name().to_string(),
        decoder: decoder.id().to_string(),
        seed,
        version: version_string(),
        settings: settings.clone(),
        config: serde_json::Value::Null,
        records,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// The CSV view of a record, in fixed column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub snr_db: f64,
    pub ber: f64,
    pub neg_ln_ber: f64,
    pub bits: u64,
    pub errors: u64,
    pub frames: u64,
    pub mean_layers: f64,
}

impl From<&BerRecord> for CsvRow {
    fn from(r: &BerRecord) -> Self {
        Self {
            snr_db: r.snr_db,
            ber: r.ber,
            neg_ln_ber: r.neg_ln_ber,
            bits: r.bits,
            errors: r.errors,
            frames: r.frames,
            mean_layers: r.mean_layers,
        }
    }
}

/// The JSON sidecar path next to a CSV report.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `path` (CSV) and its JSON sidecar.
pub fn export_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.records {
        w.serialize(CsvRow::from(r))?;
    }
    w.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Reads a report back from its CSV path (via the sidecar), checking that
/// the two files agree.
pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let rows = read_csv(path)?;
    let expected: Vec<CsvRow> = report.records.iter().map(CsvRow::from).collect();
    if rows != expected {
        return Err(EvalError::Settings(format!("{} disagrees with its sidecar", path.display())));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub decoder: String,
    pub snr_db: f64,
    pub batch_size: usize,
    pub batches: usize,
    pub us_per_codeword: f64,
    pub mean_layers: f64,
}

/// Mean decode time per codeword over `num_batches` batches drawn at
/// `snr_db`. Inputs are generated up front and one warm-up batch is
/// discarded, so only decoding is timed.
pub fn latency_bench(
    decoder: &dyn Decoder,
    code: &ParityCheckMatrix,
    batch_size: usize,
    num_batches: usize,
    snr_db: f64,
    convention: SnrConvention,
    seed: u64,
) -> Result<LatencyReport, EvalError> {
    if batch_size == 0 || num_batches == 0 {
        return Err(EvalError::Settings("batch_size and num_batches must be positive".into()));
    }
    let gen = code.generator_matrix()?;
    let sigma = snr_to_sigma(snr_db, code.rate(), convention)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = (0..=num_batches)
        .map(|_| {
            (0..batch_size)
                .map(|_| {
                    let msg: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
                    Ok(transmit(&encode(&gen, &msg)?, sigma, snr_db, &mut rng)?)
                })
                .collect::<Result<Vec<_>, EvalError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    decoder.decode_batch(&batches[0])?;
    let mut layers = 0usize;
    let start = Instant::now();
    for b in &batches[1..] {
        layers += decoder.decode_batch(b)?.iter().map(|d| d.layers).sum::<usize>();
    }
    let elapsed = start.elapsed();
    let codewords = (batch_size * num_batches) as f64;
    Ok(LatencyReport {
        decoder: decoder.id().to_string(),
        snr_db,
        batch_size,
        batches: num_batches,
        us_per_codeword: elapsed.as_secs_f64() * 1e6 / codewords,
        mean_layers: layers as f64 / codewords,
    })
}

/// Summed attention maps (over attention layers and heads) for a noiseless
/// all-zero word and for the same word with one bit flipped.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPair {
    pub position: usize,
    pub clean: Tensor<f64>,
    pub flipped: Tensor<f64>,
}

impl AttentionPair {
    pub fn difference(&self) -> Tensor<f64> {
        let data = self.flipped.data().iter().zip(self.clean.data()).map(|(a, b)| a - b).collect();
        Tensor::new(self.clean.shape().to_vec(), data).expect("same shape")
    }

    /// Absolute column sums of the difference map over the first `n`
    /// (magnitude) columns.
    pub fn magnitude_column_mass(&self, n: usize) -> Vec<f64> {
        let d = self.difference();
        let l = d.shape()[1];
        (0..n).map(|c| (0..l).map(|r| d.data()[r * l + c].abs()).sum()).collect()
    }

    /// Total mass of the syndrome-to-syndrome block of `map`.
    pub fn syndrome_block_mass(map: &Tensor<f64>, n: usize) -> f64 {
        let l = map.shape()[1];
        (n..l).flat_map(|r| (n..l).map(move |c| (r, c))).map(|(r, c)| map.data()[r * l + c]).sum()
    }
}

/// Runs full-depth forward passes with attention capture. The flipped
/// input receives `y[position] = -flip_magnitude`; every other bit is `+1`.
pub fn attention_inspect(
    model: &EccmModel,
    positions: &[usize],
    flip_magnitude: f64,
) -> Result<Vec<AttentionPair>, EvalError> {
    let n = model.code().n();
    let sample = |y: Vec<f64>| ChannelSample {
        x: vec![0; n],
        y,
        sigma: 0.0,
        snr_db: f64::INFINITY,
    };
    let clean_input = model.input_for(&sample(vec![1.0; n]))?;
    let clean = model.decode_batch(&[&clean_input], false, true)?.remove(0).summed_attention()?;
    positions
        .iter()
        .map(|&position| {
            if position >= n {
                return Err(EvalError::PositionOutOfRange { position, n });
            }
            let mut y = vec![1.0; n];
            y[position] = -flip_magnitude;
            let input = model.input_for(&sample(y))?;
            let flipped = model.decode_batch(&[&input], false, true)?.remove(0).summed_attention()?;
            Ok(AttentionPair {
                position,
                clean: clean.clone(),
                flipped,
            })
        })
        .collect()
}

/// Headerless CSV of a square matrix.
pub fn write_matrix_csv(map: &Tensor<f64>, path: &Path) -> Result<(), EvalError> {
    let cols = *map.shape().last().expect("matrix");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in map.data().chunks_exact(cols) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor<f64>, EvalError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        for f in rec?.iter() {
            data.push(f.parse::<f64>().map_err(|e| EvalError::Settings(e.to_string()))?);
        }
        rows += 1;
    }
    if rows == 0 || data.len() % rows != 0 {
        return Err(EvalError::Settings(format!("{} is not a matrix", path.display())));
    }
    let cols = data.len() / rows;
    Tensor::new(vec![rows, cols], data).map_err(|e| EvalError::Model(e.into()))
}
