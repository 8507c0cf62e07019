//! Zero-codeword training: batch generation, the multi-layer objective,
//! Adam with cosine decay and the epoch loop.
//!
//! Every training sample transmits the all-zero codeword at an SNR drawn
//! uniformly from `snr_range_db`. Validation instead uses random codewords
//! at 4 dB, which checks that the model did not learn the transmitted word.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Real, Tensor, TensorError, Var};
use crate::channel::{snr_to_sigma, transmit, DecoderInput, SnrConvention, SyndromeEncoding};
use crate::checkpoint;
use crate::gf2::{encode, ParityCheckMatrix};
use crate::model::{EccmModel, ForwardTrace, ModelConfig, ModelError};
use crate::params::{accumulate, check_param_gradients, Binder, ParamCheckReport, ParamStore, FD_FLOOR, FD_STEP};

/// Probability clamp inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

/// SNR of the validation set.
pub const VALIDATION_SNR_DB: f64 = 4.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}{}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    NonFinite { step: usize, layer: Option<usize> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub snr_range_db: Vec<f64>,
    /// Set from the run-level seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Sum the loss over every evaluated layer; otherwise only over the
    /// layer at which each sample stops.
    pub multi_loss: bool,
    /// Per-sample early exit during training.
    pub early_stop: bool,
    /// Epochs without a validation improvement before training stops.
    pub patience: usize,
    pub validation_frames: usize,
    pub snr_convention: SnrConvention,
    /// Samples per gradient shard. Shards are summed in index order, so the
    /// result does not depend on `workers`.
    pub shard_size: usize,
    /// Set from the run-level worker count.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-4,
            lr_floor: 1e-10,
            batch_size: 128,
            batches_per_epoch: 1000,
            epochs: 20,
            snr_range_db: vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            multi_loss: true,
            early_stop: true,
            patience: 5,
            validation_frames: 2048,
            snr_convention: SnrConvention::Ebn0,
            shard_size: 16,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("batches_per_epoch", self.batches_per_epoch),
            ("epochs", self.epochs),
            ("validation_frames", self.validation_frames),
            ("shard_size", self.shard_size),
            ("workers", self.workers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        if self.snr_range_db.is_empty() || self.snr_range_db.iter().any(|s| !s.is_finite()) {
            return Err(TrainError::Config("snr_range_db must be a non-empty list of finite values".into()));
        }
        if !(self.learning_rate > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.learning_rate) {
            return Err(TrainError::Config("need 0 <= lr_floor <= learning_rate, learning_rate > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(TrainError::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

/// A batch of zero-codeword samples with SNRs drawn from the configured set.
pub fn make_batch<R: Rng + ?Sized>(
    code: &ParityCheckMatrix,
    encoding: SyndromeEncoding,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<DecoderInput>, TrainError> {
    let zero = vec![0u8; code.n()];
    (0..config.batch_size)
        .map(|_| {
            let snr = *config.snr_range_db.choose(rng).expect("non-empty SNR set");
            let sigma = snr_to_sigma(snr, code.rate(), config.snr_convention).map_err(ModelError::from)?;
            let s = transmit(&zero, sigma, snr, rng).map_err(ModelError::from)?;
            Ok(crate::channel::build_decoder_input(&s, code, encoding).map_err(ModelError::from)?)
        })
        .collect()
}

/// Sum over samples and their evaluated layers of the per-bit mean BCE,
/// divided by `normalizer`.
///
/// With `multi_loss` off only the output at which each sample finishes
/// contributes.
pub fn multilayer_loss<T: Real>(
    g: &mut Graph<T>,
    trace: &ForwardTrace,
    inputs: &[&DecoderInput],
    multi_loss: bool,
    normalizer: usize,
) -> Result<Var, TensorError> {
    let mut total: Option<Var> = None;
    for out in &trace.outputs {
        let rows: Vec<usize> = if multi_loss {
            (0..out.active.len()).collect()
        } else {
            out.finishing.clone()
        };
        if rows.is_empty() {
            continue;
        }
        let selected = if rows.len() == out.active.len() {
            out.probs
        } else {
            g.gather(out.probs, &rows)?
        };
        let target: Vec<u8> = rows
            .iter()
            .flat_map(|&r| inputs[out.active[r]].z_target.iter().copied())
            .collect();
        let term = g.bce(selected, &target, T::of(BCE_EPS))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or(TensorError::Empty { op: "multilayer_loss" })?;
    g.scale(total, T::one() / T::of(normalizer as f64))
}

/// `lr_floor + (lr_0 - lr_floor) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64, TrainError> {
    if step > total_steps || total_steps == 0 {
        return Err(TrainError::Config(format!("step {step} outside 0..={total_steps}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(config.lr_floor + (config.learning_rate - config.lr_floor) * (1.0 + phase.cos()) / 2.0)
}

/// Adam with bias correction, one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor<f64>], lr: f64) -> Result<(), TensorError> {
        if grads.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in store.iter().zip(grads) {
            if p.tensor.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let (w, m, v) = (p.tensor.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Tensor<f64>>,
    /// Sum over samples of the layers evaluated.
    pub layers_evaluated: usize,
}

fn shard_gradients(
    model: &EccmModel,
    shard: &[&DecoderInput],
    multi_loss: bool,
    early_stop: bool,
    normalizer: usize,
) -> Result<BatchGradients, ModelError> {
    let mut g = Graph::<f64>::new();
    let mut bind = Binder::new(model.store(), true);
    let trace = model.forward(&mut g, &mut bind, shard, early_stop, false)?;
    let loss = multilayer_loss(&mut g, &trace, shard, multi_loss, normalizer)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(ModelError::NonFinite { layer: trace.outputs.len() });
    }
    let grads = g.backward(loss)?;
    Ok(BatchGradients {
        loss: value,
        grads: bind.collect(&grads),
        layers_evaluated: trace.depth.iter().sum(),
    })
}

/// Gradients of the batch loss (normalized by the whole batch size),
/// computed over fixed-size shards on up to `workers` threads and summed in
/// shard order.
pub fn batch_gradients(
    model: &EccmModel,
    batch: &[DecoderInput],
    multi_loss: bool,
    early_stop: bool,
    shard_size: usize,
    workers: usize,
) -> Result<BatchGradients, ModelError> {
    let refs: Vec<&DecoderInput> = batch.iter().collect();
    let shards: Vec<&[&DecoderInput]> = refs.chunks(shard_size.max(1)).collect();
    let results: Vec<Mutex<Option<Result<BatchGradients, ModelError>>>> =
        shards.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= shards.len() {
            break;
        }
        let r = shard_gradients(model, shards[i], multi_loss, early_stop, batch.len());
        *results[i].lock().expect("unpoisoned") = Some(r);
    };
    let threads = workers.clamp(1, shards.len());
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    let mut total: Option<BatchGradients> = None;
    for slot in results {
        let r = slot.into_inner().expect("unpoisoned").expect("every shard ran")?;
        match &mut total {
            None => total = Some(r),
            Some(t) => {
                t.loss += r.loss;
                t.layers_evaluated += r.layers_evaluated;
                accumulate(&mut t.grads, &r.grads)?;
            }
        }
    }
    Ok(total.expect("non-empty batch"))
}

/// Held-out random codewords at [`VALIDATION_SNR_DB`].
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub codewords: Vec<Vec<u8>>,
    pub inputs: Vec<DecoderInput>,
}

impl ValidationSet {
    pub fn generate(
        code: &ParityCheckMatrix,
        encoding: SyndromeEncoding,
        frames: usize,
        convention: SnrConvention,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = code.generator_matrix().map_err(ModelError::from)?;
        let sigma = snr_to_sigma(VALIDATION_SNR_DB, code.rate(), convention).map_err(ModelError::from)?;
        let mut codewords = Vec::with_capacity(frames);
        let mut inputs = Vec::with_capacity(frames);
        for _ in 0..frames {
            let msg: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
            let x = encode(&gen, &msg).map_err(ModelError::from)?;
            let s = transmit(&x, sigma, VALIDATION_SNR_DB, &mut rng).map_err(ModelError::from)?;
            inputs.push(crate::channel::build_decoder_input(&s, code, encoding).map_err(ModelError::from)?);
            codewords.push(x);
        }
        Ok(Self { codewords, inputs })
    }
}

/// Validation measurements of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// BER of the early-stopped decoder output.
    pub ber: f64,
    /// Mean per-bit BCE of each sample's final output against its flip target.
    pub loss: f64,
    pub layers_mean: f64,
    /// BER of every layer's output with early stopping off.
    pub layer_ber: Vec<f64>,
}

fn bce_row(p: &[f64], z: &[u8]) -> f64 {
    let terms = p.iter().zip(z).map(|(&p, &z)| {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        if z == 1 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    });
    terms.sum::<f64>() / p.len() as f64
}

pub fn validate(model: &EccmModel, set: &ValidationSet, chunk: usize) -> Result<ValidationReport, ModelError> {
    let n = model.code().n();
    let blocks = model.config().n_blocks;
    let (mut errors, mut loss, mut layers) = (0usize, 0.0, 0usize);
    let mut layer_errors = vec![0usize; blocks];
    for (inputs, words) in set.inputs.chunks(chunk).zip(set.codewords.chunks(chunk)) {
        let refs: Vec<&DecoderInput> = inputs.iter().collect();
        for ((r, x), inp) in model.decode_batch(&refs, true, false)?.iter().zip(words).zip(inputs) {
            errors += r.codeword_estimate.iter().zip(x).filter(|(a, b)| a != b).count();
            loss += bce_row(r.per_layer_outputs.last().expect("one layer"), &inp.z_target);
            layers += r.i_last;
        }
        for ((r, x), inp) in model.decode_batch(&refs, false, false)?.iter().zip(words).zip(inputs) {
            let hard = crate::channel::hard_decision(&inp.y_raw);
            for (e, o) in layer_errors.iter_mut().zip(&r.per_layer_outputs) {
                *e += (0..n).filter(|&j| (hard[j] ^ u8::from(o[j] > 0.5)) != x[j]).count();
            }
        }
    }
    let frames = set.inputs.len() as f64;
    let bits = frames * n as f64;
    Ok(ValidationReport {
        ber: errors as f64 / bits,
        loss: loss / frames,
        layers_mean: layers as f64 / frames,
        layer_ber: layer_errors.iter().map(|&e| e as f64 / bits).collect(),
    })
}

/// One row of the metrics log, written at the end of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_ber_4db: f64,
    /// Mean layers evaluated per training sample over the epoch.
    pub layers_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub metrics: MetricsRow,
    pub validation: ValidationReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last completed step.
    pub model: EccmModel,
    /// Parameters of the epoch with the lowest validation BER.
    pub best: EccmModel,
    pub best_epoch: usize,
    pub epochs: Vec<EpochSummary>,
    pub step_losses: Vec<f64>,
    /// Training ended because validation stopped improving.
    pub plateaued: bool,
}

/// Files written by [`train`] when an output directory is given.
pub struct TrainFiles {
    pub dir: PathBuf,
}

impl TrainFiles {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn validation(&self) -> PathBuf {
        self.dir.join("validation.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.ckpt"))
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

const DATA_STREAM: u64 = 0x7261_696e;
const VALIDATION_STREAM: u64 = 0x7661_6c69;

/// Trains a fresh model. `progress` is called after every epoch.
pub fn train(
    code: &ParityCheckMatrix,
    model_config: ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut model = EccmModel::new(code.clone(), model_config, config.seed)?;
    let encoding = model_config.syndrome_encoding;
    let val = ValidationSet::generate(
        code,
        encoding,
        config.validation_frames,
        config.snr_convention,
        config.seed ^ VALIDATION_STREAM,
    )?;
    let files = out_dir.map(|d| TrainFiles { dir: d.to_path_buf() });
    let mut metrics_csv = match &files {
        Some(f) => {
            std::fs::create_dir_all(&f.dir)?;
            Some((csv::Writer::from_path(f.metrics())?, csv::Writer::from_path(f.validation())?))
        }
        None => None,
    };
    if let Some((_, v)) = &mut metrics_csv {
        v.write_record(["epoch", "layer", "ber"])?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DATA_STREAM);
    let mut adam = Adam::new(model.store(), config.beta1, config.beta2, config.adam_eps);
    let total = config.total_steps();
    let mut step = 0;
    let mut step_losses = Vec::with_capacity(total);
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0, model.clone());
    let mut plateaued = false;
    for epoch in 1..=config.epochs {
        let (mut loss_sum, mut layer_sum, mut lr) = (0.0, 0usize, 0.0);
        for _ in 0..config.batches_per_epoch {
            let batch = make_batch(code, encoding, config, &mut rng)?;
            let out = batch_gradients(
                &model,
                &batch,
                config.multi_loss,
                config.early_stop,
                config.shard_size,
                config.workers,
            )
            .map_err(|e| match e {
                ModelError::NonFinite { layer } => TrainError::NonFinite { step: step + 1, layer: Some(layer) },
                e => e.into(),
            })?;
            if out.grads.iter().any(|g| !g.all_finite()) {
                return Err(TrainError::NonFinite { step: step + 1, layer: None });
            }
            lr = cosine_lr(step, total, config)?;
            adam.step(model.store_mut(), &out.grads, lr)?;
            step += 1;
            step_losses.push(out.loss);
            loss_sum += out.loss;
            layer_sum += out.layers_evaluated;
        }
        let validation = validate(&model, &val, 256)?;
        let metrics = MetricsRow {
            step,
            epoch,
            lr,
            loss: loss_sum / config.batches_per_epoch as f64,
            val_ber_4db: validation.ber,
            layers_mean: layer_sum as f64 / (config.batches_per_epoch * config.batch_size) as f64,
        };
        let summary = EpochSummary { metrics, validation };
        if let (Some(f), Some((m, v))) = (&files, &mut metrics_csv) {
            m.serialize(&summary.metrics)?;
            m.flush()?;
            for (i, b) in summary.validation.layer_ber.iter().enumerate() {
                v.write_record([epoch.to_string(), (i + 1).to_string(), b.to_string()])?;
            }
            v.flush()?;
            checkpoint::save(&model, &f.epoch_checkpoint(epoch))?;
        }
        progress(&summary);
        let ber = summary.validation.ber;
        epochs.push(summary);
        if ber < best.0 {
            best = (ber, epoch, model.clone());
        } else if epoch - best.1 >= config.patience {
            plateaued = true;
            break;
        }
    }
    if let Some(f) = &files {
        checkpoint::save(&best.2, &f.best_checkpoint())?;
        std::fs::write(f.summary(), serde_json::to_string_pretty(&epochs)?)?;
    }
    Ok(TrainOutcome {
        model,
        best: best.2,
        best_epoch: best.1,
        epochs,
        step_losses,
        plateaued,
    })
}

/// Finite-difference check of the full multi-layer loss over every
/// parameter, on `samples` zero-codeword frames at `snr_db`.
///
/// Early stopping is off so that perturbations cannot change which layers
/// contribute to the loss.
pub fn gradcheck(model: &EccmModel, samples: usize, snr_db: f64, seed: u64) -> Result<ParamCheckReport, TrainError> {
    let cfg = TrainConfig {
        batch_size: samples,
        snr_range_db: vec![snr_db],
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = make_batch(model.code(), model.config().syndrome_encoding, &cfg, &mut rng)?;
    let refs: Vec<&DecoderInput> = batch.iter().collect();
    check_param_gradients(model.store(), FD_STEP, FD_FLOOR, |g, bind| {
        let trace = model.forward(g, bind, &refs, false, false)?;
        Ok::<_, TrainError>(multilayer_loss(g, &trace, &refs, true, refs.len())?)
    })
}
