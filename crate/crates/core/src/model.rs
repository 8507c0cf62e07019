//! The full decoder: embedding, alternating Mamba/attention layers, output
//! head and syndrome-based early stopping.
//!
//! After every layer `i` the head produces per-bit flip probabilities `o^i`.
//! When the syndrome of the predicted flips `H (o^i > 0.5)` equals the input
//! syndrome, the estimate `y_b XOR (o^i > 0.5)` is a codeword and decoding of
//! that sample stops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{attention_forward, AttentionOptions, AttentionParams};
use crate::autodiff::{Graph, Real, Tensor, TensorError, Var};
use crate::channel::{hard_decision, ChannelError, DecoderInput, SyndromeEncoding};
use crate::gf2::{BinaryMatrix, CodeError, ParityCheckMatrix};
use crate::mamba::{
    bidirectional_forward, LayerMasks, MambaDims, MambaLayer, MambaOptions, ScanImpl, ScanMasks,
    TailMode,
};
use crate::params::{uniform, Binder, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("scan mask width {width} exceeds d_model {d_model} or d_state {d_state}")]
    MaskTooWide {
        width: usize,
        d_model: usize,
        d_state: usize,
    },
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Mamba and attention layers alternate, starting with Mamba.
    #[default]
    Hybrid,
    /// Attention layers only.
    Transformer,
}

/// Which structural matrix masks the Mamba scans.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MambaMask {
    /// `[H^T; I]`, one column per parity check.
    #[default]
    F,
    /// The attention mask `g(H)`, one column per sequence position.
    G,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub k_conv: usize,
    pub layout: Layout,
    pub mamba_mask: MambaMask,
    pub tail_mode: TailMode,
    pub residual: bool,
    pub score_scaling: bool,
    pub delta_softplus: bool,
    pub a_negative_exp: bool,
    pub shared_directions: bool,
    pub syndrome_encoding: SyndromeEncoding,
    pub per_layer_heads: bool,
    pub precision: Precision,
    pub scan: ScanImpl,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            d_state: 128,
            heads: 8,
            n_blocks: 8,
            k_conv: 4,
            layout: Layout::Hybrid,
            mamba_mask: MambaMask::F,
            tail_mode: TailMode::Zero,
            residual: false,
            score_scaling: true,
            delta_softplus: true,
            a_negative_exp: true,
            shared_directions: true,
            syndrome_encoding: SyndromeEncoding::Bipolar,
            per_layer_heads: false,
            precision: Precision::F64,
            scan: ScanImpl::Fused,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            d_state: 16,
            heads: 2,
            n_blocks: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self, code: &ParityCheckMatrix) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.d_state == 0 || self.n_blocks == 0 || self.k_conv == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.layout == Layout::Hybrid {
            if self.n_blocks % 2 != 0 {
                return bad(format!("hybrid layout needs an even n_blocks, got {}", self.n_blocks));
            }
            if self.k_conv > code.seq_len() {
                return bad(format!("k_conv {} exceeds sequence length {}", self.k_conv, code.seq_len()));
            }
            let width = match self.mamba_mask {
                MambaMask::F => code.checks(),
                MambaMask::G => code.seq_len(),
            };
            if width > self.d_model.min(self.d_state) {
                return Err(ModelError::MaskTooWide {
                    width,
                    d_model: self.d_model,
                    d_state: self.d_state,
                });
            }
        }
        Ok(())
    }

    pub fn is_mamba_layer(&self, index: usize) -> bool {
        self.layout == Layout::Hybrid && index % 2 == 0
    }

    pub fn mamba_options(&self) -> MambaOptions {
        MambaOptions {
            tail_mode: self.tail_mode,
            delta_softplus: self.delta_softplus,
            a_negative_exp: self.a_negative_exp,
            scan: self.scan,
        }
    }

    pub fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            heads: self.heads,
            residual: self.residual,
            score_scaling: self.score_scaling,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Mamba(MambaLayer),
    Attention(AttentionParams),
}

/// `o = sigmoid(W_s (y w_r + b_r) + b_s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutputHead {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
}

/// Result of decoding one received word.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// `o^1 .. o^{i_last}`, flip probabilities of length `n`.
    pub per_layer_outputs: Vec<Vec<f64>>,
    /// Number of layers evaluated (1-based index of the last one).
    pub i_last: usize,
    /// Whether the syndrome condition fired.
    pub stopped_early: bool,
    pub codeword_estimate: Vec<u8>,
    /// Attention weights `[h, L, L]` of each attention layer, when captured.
    pub attention: Option<Vec<Tensor<f64>>>,
}

impl DecodeResult {
    pub fn layers_evaluated(&self) -> usize {
        self.i_last
    }

    /// Attention weights summed over layers and heads, `[L, L]`.
    pub fn summed_attention(&self) -> Result<Tensor<f64>, ModelError> {
        let maps = self
            .attention
            .as_ref()
            .ok_or_else(|| ModelError::Config("attention capture was not enabled".into()))?;
        let first = maps
            .first()
            .ok_or_else(|| ModelError::Config("model has no attention layers".into()))?;
        let l = first.shape()[1];
        let mut sum = vec![0.0; l * l];
        for m in maps {
            for head in m.data().chunks_exact(l * l) {
                for (acc, v) in sum.iter_mut().zip(head) {
                    *acc += v;
                }
            }
        }
        Ok(Tensor::new(vec![l, l], sum)?)
    }
}

/// One layer's output head evaluation during a batched forward pass.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// 0-based layer index.
    pub layer: usize,
    /// Flip probabilities `[active.len(), n]`.
    pub probs: Var,
    /// Batch indices of the samples still active at this layer.
    pub active: Vec<usize>,
    /// Positions within `active` whose decoding ends at this layer.
    pub finishing: Vec<usize>,
}

/// Graph nodes of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub outputs: Vec<LayerOutput>,
    /// Layers evaluated per sample.
    pub depth: Vec<usize>,
    /// Per sample: whether the syndrome condition fired.
    pub stopped: Vec<bool>,
    /// Attention weights per attention layer, `[B, h, L, L]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EccmModel {
    config: ModelConfig,
    code: ParityCheckMatrix,
    store: ParamStore,
    w_emb: ParamId,
    layers: Vec<Layer>,
    heads: Vec<OutputHead>,
    scan_masks: Option<ScanMasks>,
    attention_mask: BinaryMatrix,
}

impl EccmModel {
    pub fn new(code: ParityCheckMatrix, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate(&code)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, l, d) = (code.n(), code.seq_len(), config.d_model);
        let mut store = ParamStore::new();
        let w_emb = store.add("embed.w", uniform(&mut rng, &[l, d], 1.0));
        let dims = MambaDims {
            seq_len: l,
            d_model: d,
            d_state: config.d_state,
            k_conv: config.k_conv,
        };
        let layers = (0..config.n_blocks)
            .map(|i| {
                let prefix = format!("layer{i}");
                if config.is_mamba_layer(i) {
                    Layer::Mamba(MambaLayer::init(
                        &mut store,
                        &format!("{prefix}.mamba"),
                        dims,
                        config.shared_directions,
                        &mut rng,
                    ))
                } else {
                    Layer::Attention(AttentionParams::init(&mut store, &format!("{prefix}.attn"), d, &mut rng))
                }
            })
            .collect();
        let head_count = if config.per_layer_heads { config.n_blocks } else { 1 };
        let heads = (0..head_count)
            .map(|i| {
                let prefix = if config.per_layer_heads { format!("head{i}") } else { "head".into() };
                OutputHead {
                    w_r: store.add(format!("{prefix}.w_r"), uniform(&mut rng, &[d], 1.0 / (d as f64).sqrt())),
                    b_r: store.add(format!("{prefix}.b_r"), Tensor::zeros(&[l])),
                    w_s: store.add(format!("{prefix}.w_s"), uniform(&mut rng, &[n, l], 1.0 / (l as f64).sqrt())),
                    b_s: store.add(format!("{prefix}.b_s"), Tensor::zeros(&[n])),
                }
            })
            .collect();
        let scan_masks = if config.layout == Layout::Hybrid {
            let pmask = match config.mamba_mask {
                MambaMask::F => code.participation_mask().0,
                MambaMask::G => code.attention_mask().0,
            };
            Some(ScanMasks::new(&pmask, d, config.d_state, config.tail_mode)?)
        } else {
            None
        };
        let attention_mask = code.attention_mask().0;
        Ok(Self {
            config,
            code,
            store,
            w_emb,
            layers,
            heads,
            scan_masks,
            attention_mask,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn code(&self) -> &ParityCheckMatrix {
        &self.code
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn heads(&self) -> &[OutputHead] {
        &self.heads
    }

    pub fn embedding(&self) -> ParamId {
        self.w_emb
    }

    pub fn scan_masks(&self) -> Option<&ScanMasks> {
        self.scan_masks.as_ref()
    }

    pub fn attention_mask(&self) -> &BinaryMatrix {
        &self.attention_mask
    }

    /// Builds the decoder input for a received word under this model's
    /// syndrome encoding.
    pub fn input_for(&self, sample: &crate::channel::ChannelSample) -> Result<DecoderInput, ModelError> {
        Ok(crate::channel::build_decoder_input(sample, &self.code, self.config.syndrome_encoding)?)
    }

    /// `y0[b, l, d] = y_in[b, l] * W_emb[l, d]`; `y_in [B, L]`.
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_, T>,
        y_in: Var,
    ) -> Result<Var, TensorError> {
        let s = g.shape(y_in).to_vec();
        let col = g.reshape(y_in, &[s[0], s[1], 1])?;
        let w = bind.bind(g, self.w_emb);
        g.mul(col, w)
    }

    /// Flip probabilities `[B, n]` from hidden states `[B, L, D]` after the
    /// 0-based layer `layer`.
    pub fn output_head<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_, T>,
        layer: usize,
        y: Var,
    ) -> Result<Var, TensorError> {
        let h = &self.heads[if self.config.per_layer_heads { layer } else { 0 }];
        let s = g.shape(y).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let w_r = bind.bind(g, h.w_r);
        let w_r = g.reshape(w_r, &[d, 1])?;
        let r = g.matmul(y, w_r)?;
        let r = g.reshape(r, &[b, l])?;
        let b_r = bind.bind(g, h.b_r);
        let r = g.add(r, b_r)?;
        let w_s = bind.bind(g, h.w_s);
        let w_st = g.transpose(w_s)?;
        let logits = g.matmul(r, w_st)?;
        let b_s = bind.bind(g, h.b_s);
        let logits = g.add(logits, b_s)?;
        g.sigmoid(logits)
    }

    fn layer_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_, T>,
        masks: Option<&LayerMasks>,
        index: usize,
        y: Var,
    ) -> Result<(Var, Option<Var>), TensorError> {
        match &self.layers[index] {
            Layer::Mamba(m) => {
                let masks = masks.expect("hybrid layout binds scan masks");
                let out = bidirectional_forward(g, bind, m, y, masks, &self.config.mamba_options())?;
                Ok((out, None))
            }
            Layer::Attention(p) => {
                let (out, alpha) =
                    attention_forward(g, bind, p, y, &self.attention_mask, &self.config.attention_options())?;
                Ok((out, Some(alpha)))
            }
        }
    }

    /// Runs the stack on a batch, shrinking the active set as samples meet
    /// the stop condition (when `early_stop` is set).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_, T>,
        inputs: &[&DecoderInput],
        early_stop: bool,
        capture: bool,
    ) -> Result<ForwardTrace, ModelError> {
        let (n, l) = (self.code.n(), self.code.seq_len());
        if inputs.is_empty() {
            return Err(TensorError::Empty { op: "forward" }.into());
        }
        if capture && early_stop {
            return Err(ModelError::Config("attention capture needs early stopping off".into()));
        }
        let mut flat = Vec::with_capacity(inputs.len() * l);
        for inp in inputs {
            if inp.y_in.len() != l || inp.y_raw.len() != n {
                return Err(CodeError::LengthMismatch {
                    expected: l,
                    got: inp.y_in.len(),
                }
                .into());
            }
            flat.extend(inp.y_in.iter().map(|&v| T::of(v)));
        }
        let y_in = g.constant(Tensor::new(vec![inputs.len(), l], flat)?);
        let masks = self.scan_masks.as_ref().map(|m| LayerMasks::bind(g, m));
        let mut y = self.embed(g, bind, y_in)?;
        let mut active: Vec<usize> = (0..inputs.len()).collect();
        let mut trace = ForwardTrace {
            outputs: Vec::new(),
            depth: vec![0; inputs.len()],
            stopped: vec![false; inputs.len()],
            attention: Vec::new(),
        };
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let (out, alpha) = self.layer_forward(g, bind, masks.as_ref(), i, y)?;
            if !g.value(out).all_finite() {
                return Err(ModelError::NonFinite { layer: i + 1 });
            }
            if capture {
                trace.attention.extend(alpha);
            }
            let probs = self.output_head(g, bind, i, out)?;
            let mut finishing = Vec::new();
            let mut keep = Vec::new();
            {
                let pv = g.value(probs).data();
                for (pos, &sample) in active.iter().enumerate() {
                    trace.depth[sample] = i + 1;
                    let stop = early_stop && {
                        let flips: Vec<u8> = pv[pos * n..(pos + 1) * n]
                            .iter()
                            .map(|&p| u8::from(p > T::of(0.5)))
                            .collect();
                        self.code.syndrome(&flips)? == inputs[sample].syndrome
                    };
                    if stop {
                        trace.stopped[sample] = true;
                    }
                    if stop || i == last {
                        finishing.push(pos);
                    } else {
                        keep.push(pos);
                    }
                }
            }
            trace.outputs.push(LayerOutput {
                layer: i,
                probs,
                active: active.clone(),
                finishing,
            });
            if keep.is_empty() {
                break;
            }
            y = if keep.len() == active.len() { out } else { g.gather(out, &keep)? };
            active = keep.iter().map(|&p| active[p]).collect();
        }
        Ok(trace)
    }

    /// Decodes a batch of received words.
    pub fn decode_batch(
        &self,
        inputs: &[&DecoderInput],
        early_stop: bool,
        capture: bool,
    ) -> Result<Vec<DecodeResult>, ModelError> {
        match self.config.precision {
            Precision::F64 => self.decode_batch_in::<f64>(inputs, early_stop, capture),
            Precision::F32 => self.decode_batch_in::<f32>(inputs, early_stop, capture),
        }
    }

    pub fn decode(&self, input: &DecoderInput, early_stop: bool) -> Result<DecodeResult, ModelError> {
        Ok(self.decode_batch(&[input], early_stop, false)?.remove(0))
    }

    fn decode_batch_in<T: Real>(
        &self,
        inputs: &[&DecoderInput],
        early_stop: bool,
        capture: bool,
    ) -> Result<Vec<DecodeResult>, ModelError> {
        let mut g = Graph::<T>::new();
        let mut bind = Binder::new(&self.store, false);
        let trace = self.forward(&mut g, &mut bind, inputs, early_stop, capture)?;
        let n = self.code.n();
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); inputs.len()];
        for out in &trace.outputs {
            let pv = g.value(out.probs).data();
            for (pos, &sample) in out.active.iter().enumerate() {
                per_layer[sample].push(pv[pos * n..(pos + 1) * n].iter().map(|v| v.as_f64()).collect());
            }
        }
        let mut results = Vec::with_capacity(inputs.len());
        for (b, (outputs, inp)) in per_layer.into_iter().zip(inputs).enumerate() {
            let last = outputs.last().expect("at least one layer");
            let codeword_estimate = hard_decision(&inp.y_raw)
                .into_iter()
                .zip(last)
                .map(|(yb, &p)| yb ^ u8::from(p > 0.5))
                .collect();
            let attention = capture.then(|| {
                trace
                    .attention
                    .iter()
                    .map(|&a| {
                        let t = g.value(a);
                        let per = t.numel() / inputs.len();
                        Tensor::new(t.shape()[1..].to_vec(), t.data()[b * per..(b + 1) * per].iter().map(|v| v.as_f64()).collect())
                            .expect("shape")
                    })
                    .collect()
            });
            results.push(DecodeResult {
                i_last: trace.depth[b],
                stopped_early: trace.stopped[b],
                per_layer_outputs: outputs,
                codeword_estimate,
                attention,
            });
        }
        Ok(results)
    }
}

#[cfg(test)]
mod tests;
