//! LoRA adapters and the training loop.
//!
//! A target projection `W₀ ∈ R^{d×k}` gains `ΔW = (alpha/r)·B·A` with
//! `A ∈ R^{r×k}` drawn from `N(0, 0.02²)` and `B ∈ R^{d×r}` starting at zero.
//! Training minimises token-mean next-token cross entropy with AdamW on the
//! adapter factors (and the embedding delta when enabled); every base weight
//! stays frozen.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ckpt::Checkpoint;
use crate::model::{layer_param, Dense, LoraPair, LoraRun, LoraSet, ModelError, Proj, RunOptions, TinyLM};
use crate::rng::Stream;
use crate::tensor::{kernels, DType, Tensor};

pub const LORA_INIT_STD: f64 = 0.02;
pub const IGNORE: i32 = -1;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid LoRA config: {0}")]
    InvalidConfig(String),
    #[error("unknown LoRA target {0:?}")]
    UnknownTarget(String),
    #[error("LoRA target {0:?} is missing from the base checkpoint")]
    MissingTarget(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{name:?}: base dtype {base} cannot take a delta in {delta}")]
    DType { name: String, base: DType, delta: DType },
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("target id {id} at position {pos} is out of range for vocab size {vocab}")]
    Target { pos: usize, id: i32, vocab: usize },
    #[error("no positions contribute to the loss")]
    EmptyTargets,
    #[error("no training examples")]
    EmptyData,
    #[error("non-finite loss {loss} at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFinite {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AdaptError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Proj>,
    pub train_embeddings: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 8.0,
            dropout: 0.0,
            targets: Proj::ALL.to_vec(),
            train_embeddings: false,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(AdaptError::InvalidConfig("rank must be ≥ 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AdaptError::InvalidConfig("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AdaptError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Parse target names such as `q_proj`; duplicates collapse.
    pub fn parse_targets<S: AsRef<str>>(names: &[S]) -> Result<Vec<Proj>> {
        let mut out: Vec<Proj> = Vec::new();
        for n in names {
            let p = Proj::from_name(n.as_ref()).ok_or_else(|| AdaptError::UnknownTarget(n.as_ref().to_string()))?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }

    fn to_meta(&self) -> BTreeMap<String, String> {
        let targets: Vec<&str> = self.targets.iter().map(|p| p.name()).collect();
        BTreeMap::from([
            ("lora.rank".to_string(), self.rank.to_string()),
            ("lora.alpha".to_string(), format!("{:?}", self.alpha)),
            ("lora.dropout".to_string(), format!("{:?}", self.dropout)),
            ("lora.targets".to_string(), targets.join(",")),
            ("lora.train_embeddings".to_string(), self.train_embeddings.to_string()),
        ])
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Option<Self> {
        let targets: Vec<&str> = meta.get("lora.targets")?.split(',').filter(|s| !s.is_empty()).collect();
        Some(Self {
            rank: meta.get("lora.rank")?.parse().ok()?,
            alpha: meta.get("lora.alpha")?.parse().ok()?,
            dropout: meta.get("lora.dropout")?.parse().ok()?,
            targets: Self::parse_targets(&targets).ok()?,
            train_embeddings: meta.get("lora.train_embeddings")?.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub set: LoraSet,
}

impl LoraAdapter {
    pub fn run(&self) -> LoraRun<'_> {
        LoraRun {
            set: &self.set,
            scale: self.config.scale(),
            dropout: None,
        }
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.set.for_each(|_, _| n += 1);
        n
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.set.for_each(|_, d| n += d.data.len());
        n
    }

    /// Adapter tensors (`<target>.lora_a`, `<target>.lora_b`,
    /// `embed_tokens.delta`) in F64 with the config in meta.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.set.for_each(|name, d| c.insert(name, d.to_tensor(DType::F64)));
        c.meta = self.config.to_meta();
        c
    }

    pub fn from_checkpoint(model: &TinyLM, ckpt: &Checkpoint) -> Result<Self> {
        let config = LoraConfig::from_meta(&ckpt.meta)
            .ok_or_else(|| AdaptError::InvalidConfig("adapter checkpoint lacks lora.* meta".into()))?;
        let mut adapter = lora_init(model, &config, 0)?;
        let mut missing = None;
        adapter.set.for_each_mut(|name, buf| match ckpt.get(&name) {
            Some(t) if t.numel() == buf.len() => *buf = t.to_f64_vec(),
            _ => missing = Some(name),
        });
        if let Some(name) = missing {
            return Err(AdaptError::Shape(format!(
                "adapter tensor {name:?} missing or mis-sized"
            )));
        }
        Ok(adapter)
    }
}

/// Fresh adapter: `A ~ N(0, 0.02²)` keyed by `(seed, "<target>.lora_a")`,
/// `B = 0`, zero embedding delta.
pub fn lora_init(model: &TinyLM, cfg: &LoraConfig, seed: u64) -> Result<LoraAdapter> {
    cfg.validate()?;
    let mc = model.config();
    let layers = (0..mc.n_layers)
        .map(|i| {
            Proj::ALL.map(|p| {
                cfg.targets.contains(&p).then(|| {
                    let [d, k] = mc.proj_shape(p);
                    let name = format!("{}.lora_a", layer_param(i, p.name()));
                    LoraPair {
                        a: Dense {
                            rows: cfg.rank,
                            cols: k,
                            data: Stream::new(seed, &name).normals(cfg.rank * k, LORA_INIT_STD),
                        },
                        b: Dense::zeros(d, cfg.rank),
                    }
                })
            })
        })
        .collect();
    Ok(LoraAdapter {
        config: cfg.clone(),
        set: LoraSet {
            layers,
            embed_delta: cfg.train_embeddings.then(|| Dense::zeros(mc.vocab_size, mc.d_model)),
        },
    })
}

/// `ΔW = (alpha/r)·B·A`.
pub fn lora_delta(a: &Tensor, b: &Tensor, r: usize, alpha: f64) -> Result<Tensor> {
    let (ra, k) = match a.shape() {
        [ra, k] => (*ra, *k),
        s => return Err(AdaptError::Shape(format!("A must be 2-D, got {s:?}"))),
    };
    let (d, rb) = match b.shape() {
        [d, rb] => (*d, *rb),
        s => return Err(AdaptError::Shape(format!("B must be 2-D, got {s:?}"))),
    };
    if ra != r || rb != r {
        return Err(AdaptError::Shape(format!(
            "A {:?} and B {:?} disagree with rank {r}",
            a.shape(),
            b.shape()
        )));
    }
    let mut delta = kernels::matmul(&b.to_f64_vec(), &a.to_f64_vec(), d, r, k);
    let scale = alpha / r as f64;
    delta.iter_mut().for_each(|v| *v *= scale);
    Ok(Tensor::from_values(DType::promote(a.dtype(), b.dtype()), vec![d, k], &delta).expect("delta shape"))
}

/// Fold the adapter into a plain checkpoint: `W = W₀ + ΔW` per target (and
/// `embed_tokens += delta`), computed in f64 and stored in the base dtype.
pub fn merge_lora(base: &Checkpoint, adapter: &LoraAdapter) -> Result<Checkpoint> {
    let mut out = base.clone();
    let scale = adapter.config.scale();
    let mut apply = |name: String, delta: Vec<f64>| -> Result<()> {
        let w0 = base.get(&name).ok_or_else(|| AdaptError::MissingTarget(name.clone()))?;
        if !w0.dtype().is_float() {
            return Err(AdaptError::DType {
                name,
                base: w0.dtype(),
                delta: DType::F64,
            });
        }
        if w0.numel() != delta.len() {
            return Err(AdaptError::Shape(format!("{name}: base {:?}", w0.shape())));
        }
        let merged: Vec<f64> = w0.to_f64_vec().iter().zip(&delta).map(|(w, d)| w + d).collect();
        out.insert(
            name,
            Tensor::from_values(w0.dtype(), w0.shape().to_vec(), &merged).expect("merge shape"),
        );
        Ok(())
    };
    for (i, layer) in adapter.set.layers.iter().enumerate() {
        for p in Proj::ALL {
            let Some(pair) = &layer[p as usize] else { continue };
            let r = pair.a.rows;
            let mut delta = kernels::matmul(&pair.b.data, &pair.a.data, pair.b.rows, r, pair.a.cols);
            delta.iter_mut().for_each(|v| *v *= scale);
            apply(layer_param(i, p.name()), delta)?;
        }
    }
    if let Some(e) = &adapter.set.embed_delta {
        apply("embed_tokens".to_string(), e.data.clone())?;
    }
    Ok(out)
}

/// Percentage of trainable adapter parameters relative to the frozen base.
/// A tensor is a target when its name is the projection name or ends in
/// `.<projection name>`; each target adds `r·(d + k)`.
pub fn trainable_fraction(base: &Checkpoint, cfg: &LoraConfig) -> f64 {
    let total = base.param_count();
    if total == 0 {
        return 0.0;
    }
    let mut trainable = 0usize;
    for (name, t) in &base.tensors {
        let is_target = cfg
            .targets
            .iter()
            .any(|p| name == p.name() || name.strip_suffix(p.name()).is_some_and(|rest| rest.ends_with('.')));
        if is_target {
            if let [d, k] = t.shape() {
                trainable += cfg.rank * (d + k);
            }
        }
        if cfg.train_embeddings && name == "embed_tokens" {
            trainable += t.numel();
        }
    }
    100.0 * trainable as f64 / total as f64
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Held-out loss is logged every `eval_every` steps and at the last
    /// step; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            total_steps: 100,
            warmup_steps: 7,
            micro_batch: 4,
            accum_steps: 1,
            seq_len: 32,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn global_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AdaptError::InvalidTrainConfig(m.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be ≥ 1");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be < total_steps");
        }
        if self.micro_batch == 0 || self.accum_steps == 0 || self.seq_len == 0 {
            return bad("micro_batch, accum_steps and seq_len must be ≥ 1");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be finite and ≥ 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be > 0 and weight_decay ≥ 0");
        }
        Ok(())
    }
}

/// Linear warmup from `peak/warmup` to `peak`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(AdaptError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * (step + 1) as f64 / cfg.warmup_steps as f64);
    }
    let t = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok((cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0))
}

/// Mean over non-ignored positions of `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[i32]) -> Result<f64> {
    let [t, v] = logits.shape() else {
        return Err(AdaptError::Shape(format!(
            "logits must be 2-D, got {:?}",
            logits.shape()
        )));
    };
    if *t != targets.len() {
        return Err(AdaptError::Shape(format!(
            "{t} logit rows vs {} targets",
            targets.len()
        )));
    }
    let (sum, n) = ce_sum(&logits.to_f64_vec(), *v, targets, None)?;
    if n == 0 {
        return Err(AdaptError::EmptyTargets);
    }
    Ok(sum / n as f64)
}

/// Summed loss and count of contributing positions; when `grad` is given,
/// writes `grad_scale · ∂sum/∂logits` into it.
fn ce_sum(logits: &[f64], v: usize, targets: &[i32], mut grad: Option<(&mut [f64], f64)>) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for (pos, &tgt) in targets.iter().enumerate() {
        if tgt == IGNORE {
            continue;
        }
        if tgt < 0 || tgt as usize >= v {
            return Err(AdaptError::Target { pos, id: tgt, vocab: v });
        }
        let row = &logits[pos * v..(pos + 1) * v];
        let lse = kernels::logsumexp(row);
        sum += lse - row[tgt as usize];
        n += 1;
        if let Some((g, scale)) = grad.as_mut() {
            let grow = &mut g[pos * v..(pos + 1) * v];
            for (gv, &lv) in grow.iter_mut().zip(row) {
                *gv = *scale * (lv - lse).exp();
            }
            grow[tgt as usize] -= *scale;
        }
    }
    Ok((sum, n))
}

/// One training sequence: model input and per-position targets
/// (`IGNORE` positions do not contribute).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<u32>,
    pub targets: Vec<i32>,
}

impl Example {
    /// Next-token prediction over every position.
    pub fn causal(tokens: &[u32]) -> Option<Self> {
        (tokens.len() >= 2).then(|| Self {
            input: tokens[..tokens.len() - 1].to_vec(),
            targets: tokens[1..].iter().map(|&t| t as i32).collect(),
        })
    }

    /// Loss only on the response tokens.
    pub fn prompt_response(prompt: &[u32], response: &[u32]) -> Option<Self> {
        if prompt.is_empty() || response.is_empty() {
            return None;
        }
        let all: Vec<u32> = prompt.iter().chain(response).copied().collect();
        let mut ex = Self::causal(&all)?;
        for t in ex.targets.iter_mut().take(prompt.len() - 1) {
            *t = IGNORE;
        }
        Some(ex)
    }

    fn count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

/// Split each document's tokens into causal windows of at most
/// `seq_len + 1` tokens (stride `seq_len`).
pub fn chunk_documents(docs: &[Vec<u32>], seq_len: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for doc in docs {
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + seq_len + 1).min(doc.len());
            out.extend(Example::causal(&doc[start..end]));
            start += seq_len;
        }
    }
    out
}

/// Token-mean loss over `examples` and its gradient with respect to the
/// adapter. Per-sequence gradients are summed in input order.
pub fn loss_and_grad(
    model: &TinyLM,
    adapter: &LoraAdapter,
    examples: &[&Example],
    dropout: Option<Stream>,
) -> Result<(f64, LoraSet)> {
    let n: usize = examples.iter().map(|e| e.count()).sum();
    if n == 0 {
        return Err(AdaptError::EmptyTargets);
    }
    let inv_n = 1.0 / n as f64;
    let v = model.config().vocab_size;
    let p = adapter.config.dropout;
    let parts: Vec<Result<(f64, LoraSet)>> = examples
        .par_iter()
        .enumerate()
        .map(|(j, ex)| {
            let run = LoraRun {
                dropout: dropout.filter(|_| p > 0.0).map(|s| (p, s.child_index(j as u64))),
                ..adapter.run()
            };
            let (logits, cache) = model.forward_raw(&ex.input, Some(run), &RunOptions::default())?;
            let mut dlogits = vec![0.0; logits.len()];
            let (sum, _) = ce_sum(&logits, v, &ex.targets, Some((&mut dlogits, inv_n)))?;
            Ok((sum, model.backward(run, &cache, &dlogits)))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = adapter.set.zeros_like();
    for part in parts {
        let (sum, g) = part?;
        total += sum;
        grad.add_scaled(&g, 1.0);
    }
    Ok((total * inv_n, grad))
}

/// Token-mean loss without dropout.
pub fn eval_loss(model: &TinyLM, adapter: &LoraAdapter, examples: &[Example]) -> Result<f64> {
    let parts: Vec<Result<(f64, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let (logits, _) = model.forward_raw(&ex.input, Some(adapter.run()), &RunOptions::default())?;
            ce_sum(&logits, model.config().vocab_size, &ex.targets, None)
        })
        .collect();
    let (mut sum, mut n) = (0.0, 0);
    for part in parts {
        let (s, c) = part?;
        sum += s;
        n += c;
    }
    if n == 0 {
        return Err(AdaptError::EmptyTargets);
    }
    Ok(sum / n as f64)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &LoraSet) -> Self {
        let mut m = Vec::new();
        params.for_each(|_, d| m.push(vec![0.0; d.data.len()]));
        Self { v: m.clone(), m, t: 0 }
    }

    pub fn step(&mut self, params: &mut LoraSet, grads: &LoraSet, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut gs = Vec::new();
        grads.for_each(|_, d| gs.push(d.data.clone()));
        let mut idx = 0;
        params.for_each_mut(|_, p| {
            let (m, v, g) = (&mut self.m[idx], &mut self.v[idx], &gs[idx]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                p[i] -= lr * (update + cfg.weight_decay * p[i]);
            }
            idx += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    pub grad_norm: f64,
}

/// Example index for `(step, micro, slot)`: epochs walk independent
/// seeded permutations of the data.
fn example_index(order: &mut BTreeMap<usize, Vec<usize>>, n: usize, seed: u64, global: usize) -> usize {
    let epoch = global / n;
    let perm = order.entry(epoch).or_insert_with(|| {
        let mut p: Vec<usize> = (0..n).collect();
        Stream::new(seed, "data-order")
            .child_index(epoch as u64)
            .cursor()
            .shuffle(&mut p);
        p
    });
    perm[global % n]
}

/// Train `adapter` in place. Each optimizer step averages the gradients of
/// `accum_steps` micro-batches of `micro_batch` examples; dropout masks are
/// keyed by `(seed, step, micro-batch, slot)`.
pub fn train(
    model: &TinyLM,
    adapter: &mut LoraAdapter,
    data: &[Example],
    held_out: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AdaptError::EmptyData);
    }
    let mut opt = AdamW::new(&adapter.set);
    let mut order = BTreeMap::new();
    let dropout_root = Stream::new(cfg.seed, "lora-dropout");
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg)?;
        let mut grad = adapter.set.zeros_like();
        let mut loss_sum = 0.0;
        for micro in 0..cfg.accum_steps {
            let batch: Vec<&Example> = (0..cfg.micro_batch)
                .map(|slot| {
                    let global = (step * cfg.accum_steps + micro) * cfg.micro_batch + slot;
                    &data[example_index(&mut order, data.len(), cfg.seed, global)]
                })
                .collect();
            let stream = dropout_root.child_index(step as u64).child_index(micro as u64);
            let (loss, g) = loss_and_grad(model, adapter, &batch, Some(stream))?;
            loss_sum += loss;
            grad.add_scaled(&g, 1.0 / cfg.accum_steps as f64);
        }
        let train_loss = loss_sum / cfg.accum_steps as f64;
        let grad_norm = grad.sq_norm().sqrt();
        if !train_loss.is_finite() || !grad_norm.is_finite() {
            return Err(AdaptError::NonFinite {
                step,
                loss: train_loss,
                lr,
                grad_norm,
            });
        }
        opt.step(&mut adapter.set, &grad, lr, cfg);
        let eval_due = cfg.eval_every > 0
            && !held_out.is_empty()
            && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps);
        let eval_loss = if eval_due {
            let l = eval_loss(model, adapter, held_out)?;
            if !l.is_finite() {
                return Err(AdaptError::NonFinite {
                    step,
                    loss: l,
                    lr,
                    grad_norm,
                });
            }
            Some(l)
        } else {
            None
        };
        let m = StepMetrics {
            step,
            lr,
            train_loss,
            eval_loss,
            grad_norm,
        };
        on_step(&m);
        log.push(m);
    }
    Ok(log)
}
