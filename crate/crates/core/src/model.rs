//! Tiny pre-norm decoder-only transformer.
//!
//! Block: `h += o(attn(rope(q(n(h))), rope(k(n(h))), v(n(h))))` followed by
//! `h += down(silu(gate(n(h))) ⊙ up(n(h)))`, where `n` is RMS norm with a
//! per-block gain. Weights are stored `[out × in]` and applied as `x Wᵀ`.
//! Rotary embeddings rotate the pair `(j, j + head_dim/2)` of each head by
//! `pos · rope_base^(-2j/head_dim)`.
//!
//! All arithmetic runs in `f64`; logits are narrowed to the parameter dtype.
//! LoRA branches `scale · B(A(dropout(x)))` can be attached to any of the
//! seven projections, and [`backward`] returns gradients for exactly those
//! branches plus an optional embedding delta.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::ckpt::Checkpoint;
use crate::rng::Stream;
use crate::tensor::{kernels, DType, Tensor};

pub const RMS_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} at position {pos} is out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, pos: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("unexpected parameter {0:?}")]
    UnexpectedParam(String),
    #[error("parameter {name:?} has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("parameter {name:?} has non-float dtype {dtype}")]
    ParamDType { name: String, dtype: DType },
    #[error(transparent)]
    Quant(#[from] crate::quant::QuantError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub max_seq: usize,
    pub tie_lm_head: bool,
}

/// The seven per-layer projections LoRA may target, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q_proj",
            Proj::K => "k_proj",
            Proj::V => "v_proj",
            Proj::O => "o_proj",
            Proj::Gate => "gate_proj",
            Proj::Up => "up_proj",
            Proj::Down => "down_proj",
        }
    }

    pub fn from_name(name: &str) -> Option<Proj> {
        Proj::ALL.into_iter().find(|p| p.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(ModelError::InvalidConfig(format!(
                "n_heads·head_dim = {}·{} must equal d_model = {}",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(
                "head_dim must be even for rotary embeddings".into(),
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(ModelError::InvalidConfig("rope_base must be positive".into()));
        }
        Ok(())
    }

    /// `[out, in]` shape of a projection.
    pub fn proj_shape(&self, p: Proj) -> [usize; 2] {
        let d = self.d_model;
        match p {
            Proj::Q | Proj::K | Proj::V | Proj::O => [d, d],
            Proj::Gate | Proj::Up => [self.d_ff, d],
            Proj::Down => [d, self.d_ff],
        }
    }

    /// Canonical parameter names with shapes, in name order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        out.insert("embed_tokens".to_string(), vec![self.vocab_size, self.d_model]);
        for i in 0..self.n_layers {
            for p in Proj::ALL {
                out.insert(layer_param(i, p.name()), self.proj_shape(p).to_vec());
            }
            out.insert(layer_param(i, "ln_attn"), vec![self.d_model]);
            out.insert(layer_param(i, "ln_mlp"), vec![self.d_model]);
        }
        out.insert("ln_final".to_string(), vec![self.d_model]);
        if !self.tie_lm_head {
            out.insert("lm_head".to_string(), vec![self.vocab_size, self.d_model]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Key/value pairs recorded in checkpoint meta under `model.`.
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("model.{k}"), v);
        };
        put("vocab_size", self.vocab_size.to_string());
        put("d_model", self.d_model.to_string());
        put("n_layers", self.n_layers.to_string());
        put("n_heads", self.n_heads.to_string());
        put("head_dim", self.head_dim.to_string());
        put("d_ff", self.d_ff.to_string());
        put("rope_base", format!("{:?}", self.rope_base));
        put("max_seq", self.max_seq.to_string());
        put("tie_lm_head", self.tie_lm_head.to_string());
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Option<ModelConfig> {
        let get = |k: &str| meta.get(&format!("model.{k}"));
        let num = |k: &str| get(k)?.parse::<usize>().ok();
        Some(ModelConfig {
            vocab_size: num("vocab_size")?,
            d_model: num("d_model")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            head_dim: num("head_dim")?,
            d_ff: num("d_ff")?,
            rope_base: get("rope_base")?.parse().ok()?,
            max_seq: num("max_seq")?,
            tie_lm_head: get("tie_lm_head")?.parse().ok()?,
        })
    }
}

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Row-major `f64` matrix used by the compute path.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => (1, t.numel()),
        };
        Self {
            rows,
            cols,
            data: t.to_f64_vec(),
        }
    }

    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        Tensor::from_values(dtype, vec![self.rows, self.cols], &self.data).expect("dense shape")
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    proj: [Dense; 7],
    ln_attn: Vec<f64>,
    ln_mlp: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Weights {
    embed: Dense,
    layers: Vec<LayerWeights>,
    ln_final: Vec<f64>,
    lm_head: Option<Dense>,
}

/// A model: validated config plus canonical parameters.
#[derive(Debug, Clone)]
pub struct TinyLM {
    config: ModelConfig,
    params: Checkpoint,
    weights: Weights,
}

/// Initialise parameters in `F32`. See [`init_params_with`].
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<TinyLM> {
    init_params_with(config, seed, DType::F32)
}

/// Every matrix is drawn from `N(0, 0.02²)` on the stream keyed by
/// `(seed, parameter name)`; norm gains are ones.
pub fn init_params_with(config: &ModelConfig, seed: u64, dtype: DType) -> Result<TinyLM> {
    config.validate()?;
    let mut params = Checkpoint::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let values = if shape.len() == 1 {
            vec![1.0; n]
        } else {
            Stream::new(seed, &name).normals(n, INIT_STD)
        };
        params.insert(name, Tensor::from_values(dtype, shape, &values).expect("param shape"));
    }
    params.meta = config.to_meta();
    TinyLM::from_checkpoint(config.clone(), params)
}

/// Options for a single forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Dynamic FP8 fake-quantization of every projection input.
    pub fp8_activations: bool,
}

/// One LoRA factor pair: `A: [r × in]`, `B: [out × r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Dense,
    pub b: Dense,
}

/// Per-layer LoRA pairs (indexed by [`Proj`]) and an optional embedding
/// delta. The same layout carries weights and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub layers: Vec<[Option<LoraPair>; 7]>,
    pub embed_delta: Option<Dense>,
}

impl LoraSet {
    pub fn pair(&self, layer: usize, p: Proj) -> Option<&LoraPair> {
        self.layers.get(layer)?[p.index()].as_ref()
    }

    pub fn pair_mut(&mut self, layer: usize, p: Proj) -> Option<&mut LoraPair> {
        self.layers.get_mut(layer)?[p.index()].as_mut()
    }

    pub fn zeros_like(&self) -> LoraSet {
        LoraSet {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.clone().map(|p| {
                        p.map(|p| LoraPair {
                            a: Dense::zeros(p.a.rows, p.a.cols),
                            b: Dense::zeros(p.b.rows, p.b.cols),
                        })
                    })
                })
                .collect(),
            embed_delta: self.embed_delta.as_ref().map(|e| Dense::zeros(e.rows, e.cols)),
        }
    }

    /// Visit every buffer with a stable name, in a fixed order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut Vec<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for p in Proj::ALL {
                if let Some(pair) = layer[p.index()].as_mut() {
                    f(format!("{}.lora_a", layer_param(i, p.name())), &mut pair.a.data);
                    f(format!("{}.lora_b", layer_param(i, p.name())), &mut pair.b.data);
                }
            }
        }
        if let Some(e) = self.embed_delta.as_mut() {
            f("embed_tokens.delta".to_string(), &mut e.data);
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(String, &Dense)) {
        for (i, layer) in self.layers.iter().enumerate() {
            for p in Proj::ALL {
                if let Some(pair) = layer[p.index()].as_ref() {
                    f(format!("{}.lora_a", layer_param(i, p.name())), &pair.a);
                    f(format!("{}.lora_b", layer_param(i, p.name())), &pair.b);
                }
            }
        }
        if let Some(e) = self.embed_delta.as_ref() {
            f("embed_tokens.delta".to_string(), e);
        }
    }

    /// `self += factor · other`; layouts must match.
    pub fn add_scaled(&mut self, other: &LoraSet, factor: f64) {
        let mut others = Vec::new();
        other.for_each(|_, d| others.push(d.data.clone()));
        let mut it = others.into_iter();
        self.for_each_mut(|_, buf| {
            let o = it.next().expect("matching layout");
            for (x, y) in buf.iter_mut().zip(o) {
                *x += factor * y;
            }
        });
    }

    pub fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|_, d| s += d.data.iter().map(|v| v * v).sum::<f64>());
        s
    }
}

/// LoRA branch configuration for one forward/backward evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LoraRun<'a> {
    pub set: &'a LoraSet,
    /// `alpha / r`.
    pub scale: f64,
    /// Dropout on the LoRA branch input: rate and the stream its masks are
    /// drawn from. `None` disables dropout (evaluation).
    pub dropout: Option<(f64, Stream)>,
}

// ---------------------------------------------------------------------------
// Forward and backward.
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct LinCache {
    /// Dropout multipliers applied to the LoRA input, when dropout is on.
    mask: Option<Vec<f64>>,
    /// LoRA input after dropout.
    xd: Option<Vec<f64>>,
    /// `xd Aᵀ`.
    u: Option<Vec<f64>>,
}

#[derive(Debug)]
struct LayerCache {
    h_in: Vec<f64>,
    inv1: Vec<f64>,
    xn1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    h_mid: Vec<f64>,
    inv2: Vec<f64>,
    xn2: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    act: Vec<f64>,
    lin: [LinCache; 7],
}

/// Activations retained by a forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    h_final: Vec<f64>,
    inv_final: Vec<f64>,
    hn: Vec<f64>,
}

impl ForwardCache {
    /// Input rows `[T × in]` seen by projection `p` of `layer`.
    pub fn proj_input(&self, layer: usize, p: Proj) -> &[f64] {
        let l = &self.layers[layer];
        match p {
            Proj::Q | Proj::K | Proj::V => &l.xn1,
            Proj::O => &l.attn,
            Proj::Gate | Proj::Up => &l.xn2,
            Proj::Down => &l.act,
        }
    }
}

struct Rope {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    fn new(t: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = vec![0.0; t * half];
        let mut sin = vec![0.0; t * half];
        for pos in 0..t {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos[pos * half + j] = angle.cos();
                sin[pos * half + j] = angle.sin();
            }
        }
        Self { half, cos, sin }
    }

    /// Rotate every head of `x: [T × n_heads·head_dim]` in place; `inverse`
    /// applies the transpose rotation (used by the backward pass).
    fn apply(&self, x: &mut [f64], t: usize, n_heads: usize, inverse: bool) {
        let hd = 2 * self.half;
        let d = n_heads * hd;
        for pos in 0..t {
            for h in 0..n_heads {
                let base = pos * d + h * hd;
                for j in 0..self.half {
                    let c = self.cos[pos * self.half + j];
                    let s = if inverse {
                        -self.sin[pos * self.half + j]
                    } else {
                        self.sin[pos * self.half + j]
                    };
                    let x1 = x[base + j];
                    let x2 = x[base + j + self.half];
                    x[base + j] = x1 * c - x2 * s;
                    x[base + j + self.half] = x1 * s + x2 * c;
                }
            }
        }
    }
}

fn dropout_mask(stream: Stream, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len as u64)
        .map(|i| if stream.uniform(i) < p { 0.0 } else { keep })
        .collect()
}

fn linear_forward(
    x: &[f64],
    t: usize,
    w: &Dense,
    lora: Option<&LoraPair>,
    scale: f64,
    dropout: Option<(f64, Stream)>,
    fp8: bool,
) -> (Vec<f64>, LinCache) {
    let quantized;
    let x = if fp8 {
        quantized = crate::quant::fp8_fake_quant(x);
        &quantized[..]
    } else {
        x
    };
    let (out, inp) = (w.rows, w.cols);
    let mut y = kernels::matmul_nt(x, &w.data, t, inp, out);
    let mut cache = LinCache::default();
    if let Some(pair) = lora {
        let r = pair.a.rows;
        let (xd, mask) = match dropout {
            Some((p, stream)) if p > 0.0 => {
                let mask = dropout_mask(stream, x.len(), p);
                (x.iter().zip(&mask).map(|(a, m)| a * m).collect(), Some(mask))
            }
            _ => (x.to_vec(), None),
        };
        let u = kernels::matmul_nt(&xd, &pair.a.data, t, inp, r);
        let delta = kernels::matmul_nt(&u, &pair.b.data, t, r, out);
        for (yv, dv) in y.iter_mut().zip(&delta) {
            *yv += scale * dv;
        }
        cache = LinCache {
            mask,
            xd: Some(xd),
            u: Some(u),
        };
    }
    (y, cache)
}

/// Returns `dx` and accumulates LoRA gradients into `grad`.
fn linear_backward(
    dy: &[f64],
    t: usize,
    w: &Dense,
    lora: Option<&LoraPair>,
    scale: f64,
    cache: &LinCache,
    grad: Option<&mut LoraPair>,
) -> Vec<f64> {
    let (out, inp) = (w.rows, w.cols);
    let mut dx = kernels::matmul(dy, &w.data, t, out, inp);
    if let (Some(pair), Some(grad)) = (lora, grad) {
        let r = pair.a.rows;
        let u = cache.u.as_ref().expect("lora cache");
        let xd = cache.xd.as_ref().expect("lora cache");
        let db = kernels::matmul_tn(dy, u, t, out, r);
        for (g, v) in grad.b.data.iter_mut().zip(db) {
            *g += scale * v;
        }
        let mut du = kernels::matmul(dy, &pair.b.data, t, out, r);
        du.iter_mut().for_each(|v| *v *= scale);
        let da = kernels::matmul_tn(&du, xd, t, r, inp);
        for (g, v) in grad.a.data.iter_mut().zip(da) {
            *g += v;
        }
        let dxd = kernels::matmul(&du, &pair.a.data, t, r, inp);
        match &cache.mask {
            Some(mask) => {
                for ((d, v), m) in dx.iter_mut().zip(dxd).zip(mask) {
                    *d += v * m;
                }
            }
            None => {
                for (d, v) in dx.iter_mut().zip(dxd) {
                    *d += v;
                }
            }
        }
    }
    dx
}

fn rms_backward(x: &[f64], inv: &[f64], gain: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let mut dx = vec![0.0; x.len()];
    for r in 0..rows {
        let s = inv[r];
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let dot: f64 = (0..d).map(|j| dyr[j] * gain[j] * xr[j]).sum();
        let coef = s * s * s * dot / d as f64;
        for j in 0..d {
            dx[r * d + j] = s * gain[j] * dyr[j] - coef * xr[j];
        }
    }
    dx
}

impl TinyLM {
    /// Adopt a parameter checkpoint. Quantized checkpoints are dequantized
    /// here, so forward runs on the reconstructed weights.
    pub fn from_checkpoint(config: ModelConfig, params: Checkpoint) -> Result<Self> {
        config.validate()?;
        let params = if crate::quant::is_quantized(&params) {
            crate::quant::dequantize_checkpoint(&params)?
        } else {
            params
        };
        let expected = config.param_shapes();
        for name in params.tensors.keys() {
            if !expected.contains_key(name) {
                return Err(ModelError::UnexpectedParam(name.clone()));
            }
        }
        for (name, shape) in &expected {
            let t = params.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    got: t.shape().to_vec(),
                    want: shape.clone(),
                });
            }
            if !t.dtype().is_float() {
                return Err(ModelError::ParamDType {
                    name: name.clone(),
                    dtype: t.dtype(),
                });
            }
        }
        let dense = |n: &str| Dense::from_tensor(&params.tensors[n]);
        let vec = |n: &str| params.tensors[n].to_f64_vec();
        let layers = (0..config.n_layers)
            .map(|i| LayerWeights {
                proj: Proj::ALL.map(|p| dense(&layer_param(i, p.name()))),
                ln_attn: vec(&layer_param(i, "ln_attn")),
                ln_mlp: vec(&layer_param(i, "ln_mlp")),
            })
            .collect();
        let weights = Weights {
            embed: dense("embed_tokens"),
            layers,
            ln_final: vec("ln_final"),
            lm_head: (!config.tie_lm_head).then(|| dense("lm_head")),
        };
        let mut params = params;
        for (k, v) in config.to_meta() {
            params.meta.entry(k).or_insert(v);
        }
        Ok(Self {
            config,
            params,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Checkpoint {
        &self.params
    }

    pub fn into_params(self) -> Checkpoint {
        self.params
    }

    /// Dtype logits are reported in.
    pub fn dtype(&self) -> DType {
        match self.params.tensors["embed_tokens"].dtype() {
            DType::F64 => DType::F64,
            _ => DType::F32,
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some((pos, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                id,
                pos,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[T × vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward_with(tokens, None, &RunOptions::default())
    }

    pub fn forward_with(&self, tokens: &[u32], lora: Option<LoraRun<'_>>, opts: &RunOptions) -> Result<Tensor> {
        let (logits, _) = self.forward_raw(tokens, lora, opts)?;
        Ok(
            Tensor::from_values(self.dtype(), vec![tokens.len(), self.config.vocab_size], &logits)
                .expect("logit shape"),
        )
    }

    /// Independent sequences; output `i` belongs to input `i`.
    pub fn forward_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<Tensor>> {
        batch.par_iter().map(|seq| self.forward(seq)).collect()
    }

    /// `f64` logits plus the activation cache.
    pub fn forward_raw(
        &self,
        tokens: &[u32],
        lora: Option<LoraRun<'_>>,
        opts: &RunOptions,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (t, d, nh, hd, ff) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.d_ff);
        let w = &self.weights;
        let scale = lora.map(|l| l.scale).unwrap_or(0.0);
        let embed_delta = lora.and_then(|l| l.set.embed_delta.as_ref());

        let embed_row = |id: usize| -> Vec<f64> {
            let mut row = w.embed.data[id * d..(id + 1) * d].to_vec();
            if let Some(delta) = embed_delta {
                for (r, dv) in row.iter_mut().zip(&delta.data[id * d..(id + 1) * d]) {
                    *r += dv;
                }
            }
            row
        };
        let mut h: Vec<f64> = tokens.iter().flat_map(|&id| embed_row(id as usize)).collect();

        let rope = Rope::new(t, hd, cfg.rope_base);
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut caches = Vec::with_capacity(cfg.n_layers);

        for (li, lw) in w.layers.iter().enumerate() {
            let pair = |p: Proj| lora.and_then(|l| l.set.pair(li, p));
            let drop = |p: Proj| {
                lora.and_then(|l| l.dropout)
                    .map(|(rate, s)| (rate, s.child_index(li as u64).child(p.name())))
            };
            let lin = |x: &[f64], p: Proj| {
                linear_forward(x, t, &lw.proj[p.index()], pair(p), scale, drop(p), opts.fp8_activations)
            };

            let h_in = h.clone();
            let (xn1, inv1) = kernels::rms_norm(&h, &lw.ln_attn, d, RMS_EPS);
            let (mut q, cq) = lin(&xn1, Proj::Q);
            let (mut k, ck) = lin(&xn1, Proj::K);
            let (v, cv) = lin(&xn1, Proj::V);
            rope.apply(&mut q, t, nh, false);
            rope.apply(&mut k, t, nh, false);

            let mut probs = vec![0.0; nh * t * t];
            let mut attn = vec![0.0; t * d];
            for head in 0..nh {
                let off = head * hd;
                for i in 0..t {
                    let row = &mut probs[(head * t + i) * t..(head * t + i) * t + t];
                    for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                        *r = kernels::dot(&q[i * d + off..i * d + off + hd], &k[j * d + off..j * d + off + hd])
                            * inv_sqrt;
                    }
                    kernels::softmax_row(&mut row[..=i]);
                    for jj in 0..=i {
                        let p = row[jj];
                        for c in 0..hd {
                            attn[i * d + off + c] += p * v[jj * d + off + c];
                        }
                    }
                }
            }
            let (o, co) = lin(&attn, Proj::O);
            for (hv, ov) in h.iter_mut().zip(&o) {
                *hv += ov;
            }

            let h_mid = h.clone();
            let (xn2, inv2) = kernels::rms_norm(&h, &lw.ln_mlp, d, RMS_EPS);
            let (gate, cg) = lin(&xn2, Proj::Gate);
            let (up, cu) = lin(&xn2, Proj::Up);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| kernels::silu(*g) * u).collect();
            debug_assert_eq!(act.len(), t * ff);
            let (down, cd) = lin(&act, Proj::Down);
            for (hv, dv) in h.iter_mut().zip(&down) {
                *hv += dv;
            }

            caches.push(LayerCache {
                h_in,
                inv1,
                xn1,
                q,
                k,
                v,
                probs,
                attn,
                h_mid,
                inv2,
                xn2,
                gate,
                up,
                act,
                lin: [cq, ck, cv, co, cg, cu, cd],
            });
        }

        let (hn, inv_final) = kernels::rms_norm(&h, &w.ln_final, d, RMS_EPS);
        let logits = match &w.lm_head {
            // lm_head stays in full precision under FP8.
            Some(head) => kernels::matmul_nt(&hn, &head.data, t, d, cfg.vocab_size),
            None => match embed_delta {
                Some(delta) => {
                    let tied: Vec<f64> = w.embed.data.iter().zip(&delta.data).map(|(a, b)| a + b).collect();
                    kernels::matmul_nt(&hn, &tied, t, d, cfg.vocab_size)
                }
                None => kernels::matmul_nt(&hn, &w.embed.data, t, d, cfg.vocab_size),
            },
        };
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                layers: caches,
                h_final: h,
                inv_final,
                hn,
            },
        ))
    }

    /// Gradients of a scalar loss with respect to the LoRA set, given
    /// `dlogits = ∂loss/∂logits` for the cached forward pass. Frozen weights
    /// receive nothing.
    pub fn backward(&self, lora: LoraRun<'_>, cache: &ForwardCache, dlogits: &[f64]) -> LoraSet {
        let cfg = &self.config;
        let w = &self.weights;
        let t = cache.tokens.len();
        let (d, nh, hd, v_sz) = (cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.vocab_size);
        let mut grads = lora.set.zeros_like();
        let scale = lora.scale;

        // Output head.
        let head: std::borrow::Cow<'_, [f64]> = match (&w.lm_head, &lora.set.embed_delta) {
            (Some(hm), _) => std::borrow::Cow::Borrowed(&hm.data),
            (None, Some(delta)) => {
                std::borrow::Cow::Owned(w.embed.data.iter().zip(&delta.data).map(|(a, b)| a + b).collect())
            }
            (None, None) => std::borrow::Cow::Borrowed(&w.embed.data),
        };
        let dhn = kernels::matmul(dlogits, &head, t, v_sz, d);
        if w.lm_head.is_none() {
            if let Some(ge) = grads.embed_delta.as_mut() {
                let dh = kernels::matmul_tn(dlogits, &cache.hn, t, v_sz, d);
                for (g, v) in ge.data.iter_mut().zip(dh) {
                    *g += v;
                }
            }
        }
        let mut dh = rms_backward(&cache.h_final, &cache.inv_final, &w.ln_final, &dhn, d);

        let rope = Rope::new(t, hd, cfg.rope_base);
        let inv_sqrt = 1.0 / (hd as f64).sqrt();

        for li in (0..cfg.n_layers).rev() {
            let lw = &w.layers[li];
            let lc = &cache.layers[li];
            let gl = &mut grads.layers[li];
            let mut lin_bwd = |dy: &[f64], p: Proj| {
                linear_backward(
                    dy,
                    t,
                    &lw.proj[p.index()],
                    lora.set.pair(li, p),
                    scale,
                    &lc.lin[p.index()],
                    gl[p.index()].as_mut(),
                )
            };

            // MLP block.
            let dact = lin_bwd(&dh, Proj::Down);
            let mut dgate = vec![0.0; dact.len()];
            let mut dup = vec![0.0; dact.len()];
            for i in 0..dact.len() {
                dgate[i] = dact[i] * lc.up[i] * kernels::silu_grad(lc.gate[i]);
                dup[i] = dact[i] * kernels::silu(lc.gate[i]);
            }
            let mut dxn2 = lin_bwd(&dgate, Proj::Gate);
            for (a, b) in dxn2.iter_mut().zip(lin_bwd(&dup, Proj::Up)) {
                *a += b;
            }
            let dres = rms_backward(&lc.h_mid, &lc.inv2, &lw.ln_mlp, &dxn2, d);
            for (a, b) in dh.iter_mut().zip(dres) {
                *a += b;
            }

            // Attention block.
            let dattn = lin_bwd(&dh, Proj::O);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for head in 0..nh {
                let off = head * hd;
                for i in 0..t {
                    let prow = &lc.probs[(head * t + i) * t..(head * t + i) * t + t];
                    let dout = &dattn[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        dp[j] = kernels::dot(dout, &lc.v[j * d + off..j * d + off + hd]);
                        for c in 0..hd {
                            dv[j * d + off + c] += prow[j] * dout[c];
                        }
                    }
                    let inner: f64 = (0..=i).map(|j| prow[j] * dp[j]).sum();
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - inner) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..hd {
                            dq[i * d + off + c] += ds * lc.k[j * d + off + c];
                            dk[j * d + off + c] += ds * lc.q[i * d + off + c];
                        }
                    }
                }
            }
            rope.apply(&mut dq, t, nh, true);
            rope.apply(&mut dk, t, nh, true);
            let mut dxn1 = lin_bwd(&dq, Proj::Q);
            for (a, b) in dxn1.iter_mut().zip(lin_bwd(&dk, Proj::K)) {
                *a += b;
            }
            for (a, b) in dxn1.iter_mut().zip(lin_bwd(&dv, Proj::V)) {
                *a += b;
            }
            let dres = rms_backward(&lc.h_in, &lc.inv1, &lw.ln_attn, &dxn1, d);
            for (a, b) in dh.iter_mut().zip(dres) {
                *a += b;
            }
        }

        if let Some(ge) = grads.embed_delta.as_mut() {
            for (pos, &id) in cache.tokens.iter().enumerate() {
                let id = id as usize;
                for c in 0..d {
                    ge.data[id * d + c] += dh[pos * d + c];
                }
            }
        }
        grads
    }
}
