//! Independent oracles shared by integration and acceptance tests. Nothing
//! here calls into the library's compute kernels; every routine is a
//! direct loop-level restatement of the math.
#![allow(dead_code)]

use adaptkit::adapt::{loss_and_grad, Example, LoraAdapter};
use adaptkit::ckpt::{Checkpoint, WriteOptions};
use adaptkit::evalmc::McqItem;
use adaptkit::model::{init_params, init_params_with, ModelConfig, TinyLM};
use adaptkit::quant::{quantize_checkpoint, QuantSpec, Scheme};
use adaptkit::rng::{Cursor, Stream};
use adaptkit::tensor::{DType, Tensor};
use adaptkit::tok::Tokenizer;

pub fn toy_config(d_model: usize, vocab: usize, n_layers: usize, tie: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model,
        n_layers,
        n_heads: 2,
        head_dim: d_model / 2,
        d_ff: 2 * d_model,
        rope_base: 10000.0,
        max_seq: 32,
        tie_lm_head: tie,
    }
}

/// Model whose matrices have standard deviation `std` and whose norm gains
/// are perturbed away from one, so every path carries signal.
pub fn scaled_model(cfg: &ModelConfig, seed: u64, std: f64, dtype: DType) -> TinyLM {
    let base = init_params_with(cfg, seed, DType::F64).unwrap();
    let mut params = base.params().clone();
    let s = Stream::new(seed, "test-scale");
    for (i, (_, t)) in params.tensors.iter_mut().enumerate() {
        let n = t.numel();
        let noise = s.child_index(i as u64).normals(n, 1.0);
        let vals: Vec<f64> = if t.rank() == 2 {
            noise.iter().map(|z| z * std).collect()
        } else {
            noise.iter().map(|z| 1.0 + 0.2 * z).collect()
        };
        *t = Tensor::from_values(dtype, t.shape().to_vec(), &vals).unwrap();
    }
    TinyLM::from_checkpoint(cfg.clone(), params).unwrap()
}

/// Fill every adapter buffer with `N(0, std²)` noise.
pub fn randomize_adapter(adapter: &mut LoraAdapter, seed: u64, std: f64) {
    let s = Stream::new(seed, "test-adapter");
    let mut k = 0u64;
    adapter.set.for_each_mut(|_, buf| {
        *buf = s.child_index(k).normals(buf.len(), std);
        k += 1;
    });
}

fn mat(params: &Checkpoint, name: &str) -> (Vec<f64>, usize, usize) {
    let t = params.get(name).unwrap_or_else(|| panic!("missing {name}"));
    (t.to_f64_vec(), t.shape()[0], t.shape()[1])
}

/// `x Wᵀ` for one row.
fn apply(w: &(Vec<f64>, usize, usize), x: &[f64]) -> Vec<f64> {
    let (data, rows, cols) = w;
    (0..*rows)
        .map(|r| (0..*cols).map(|c| data[r * cols + c] * x[c]).sum())
        .collect()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, gv)| v * inv * gv).collect()
}

/// Effective weights with any adapter folded in as `W + (alpha/r)·B·A`.
fn effective(params: &Checkpoint, adapter: Option<&LoraAdapter>) -> Checkpoint {
    let mut out = params.clone();
    let Some(ad) = adapter else { return out };
    let scale = ad.config.alpha / ad.config.rank as f64;
    let mut bufs = std::collections::BTreeMap::new();
    ad.set.for_each(|name, d| {
        bufs.insert(name, d.clone());
    });
    for (name, a) in &bufs {
        if let Some(target) = name.strip_suffix(".lora_a") {
            let b = &bufs[&format!("{target}.lora_b")];
            let (mut w, rows, cols) = mat(params, target);
            for r in 0..rows {
                for c in 0..cols {
                    let mut s = 0.0;
                    for j in 0..a.rows {
                        s += b.data[r * b.cols + j] * a.data[j * a.cols + c];
                    }
                    w[r * cols + c] += scale * s;
                }
            }
            out.insert(target, Tensor::from_f64(vec![rows, cols], w).unwrap());
        }
    }
    if let Some(delta) = bufs.get("embed_tokens.delta") {
        let (mut e, rows, cols) = mat(params, "embed_tokens");
        for (x, d) in e.iter_mut().zip(&delta.data) {
            *x += d;
        }
        out.insert("embed_tokens", Tensor::from_f64(vec![rows, cols], e).unwrap());
    }
    out
}

/// Straight-line forward pass in f64; returns `[T × vocab]` logits.
pub fn reference_forward(
    cfg: &ModelConfig,
    params: &Checkpoint,
    adapter: Option<&LoraAdapter>,
    tokens: &[u32],
) -> Vec<f64> {
    let p = effective(params, adapter);
    let d = cfg.d_model;
    let hd = cfg.head_dim;
    let half = hd / 2;
    let t = tokens.len();
    let (emb, _, _) = mat(&p, "embed_tokens");
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&id| emb[id as usize * d..(id as usize + 1) * d].to_vec())
        .collect();
    let rotate = |v: &mut [f64], pos: usize| {
        for head in 0..cfg.n_heads {
            for j in 0..half {
                let theta = pos as f64 * cfg.rope_base.powf(-2.0 * j as f64 / hd as f64);
                let (a, b) = (v[head * hd + j], v[head * hd + j + half]);
                v[head * hd + j] = a * theta.cos() - b * theta.sin();
                v[head * hd + j + half] = a * theta.sin() + b * theta.cos();
            }
        }
    };
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let g1 = p.get(&name("ln_attn")).unwrap().to_f64_vec();
        let g2 = p.get(&name("ln_mlp")).unwrap().to_f64_vec();
        let (wq, wk, wv, wo) = (
            mat(&p, &name("q_proj")),
            mat(&p, &name("k_proj")),
            mat(&p, &name("v_proj")),
            mat(&p, &name("o_proj")),
        );
        let (wg, wu, wd) = (
            mat(&p, &name("gate_proj")),
            mat(&p, &name("up_proj")),
            mat(&p, &name("down_proj")),
        );
        let xn: Vec<Vec<f64>> = h.iter().map(|x| rms(x, &g1)).collect();
        let mut q: Vec<Vec<f64>> = xn.iter().map(|x| apply(&wq, x)).collect();
        let mut k: Vec<Vec<f64>> = xn.iter().map(|x| apply(&wk, x)).collect();
        let v: Vec<Vec<f64>> = xn.iter().map(|x| apply(&wv, x)).collect();
        for pos in 0..t {
            rotate(&mut q[pos], pos);
            rotate(&mut k[pos], pos);
        }
        let mut attn = vec![vec![0.0; d]; t];
        for head in 0..cfg.n_heads {
            let r = head * hd..(head + 1) * hd;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - m).exp() / z;
                    for c in r.clone() {
                        attn[i][c] += w * v[j][c];
                    }
                }
            }
        }
        for i in 0..t {
            let o = apply(&wo, &attn[i]);
            for c in 0..d {
                h[i][c] += o[c];
            }
            let x2 = rms(&h[i], &g2);
            let gate = apply(&wg, &x2);
            let up = apply(&wu, &x2);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = apply(&wd, &act);
            for c in 0..d {
                h[i][c] += down[c];
            }
        }
    }
    let gf = p.get("ln_final").unwrap().to_f64_vec();
    let head = if cfg.tie_lm_head {
        mat(&p, "embed_tokens")
    } else {
        mat(&p, "lm_head")
    };
    h.iter().flat_map(|x| apply(&head, &rms(x, &gf))).collect()
}

#[derive(Debug)]
pub struct GradCheck {
    pub tensor: String,
    pub max_rel: f64,
    pub max_abs: f64,
}

/// Central differences of the training loss, one element at a time, against
/// the analytic gradient. Relative error uses `max(|a|, |n|, floor)` as the
/// denominator so exact zeros compare cleanly.
pub fn finite_difference_check(
    model: &TinyLM,
    adapter: &LoraAdapter,
    examples: &[&Example],
    dropout: Option<Stream>,
    h: f64,
    floor: f64,
) -> Vec<GradCheck> {
    let (_, grad) = loss_and_grad(model, adapter, examples, dropout).unwrap();
    let mut analytic = Vec::new();
    grad.for_each(|name, d| analytic.push((name, d.data.clone())));
    let mut out = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for e in 0..g.len() {
            let loss_at = |delta: f64| {
                let mut ad = adapter.clone();
                let mut k = 0;
                ad.set.for_each_mut(|_, buf| {
                    if k == ti {
                        buf[e] += delta;
                    }
                    k += 1;
                });
                loss_and_grad(model, &ad, examples, dropout).unwrap().0
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let diff = (numeric - g[e]).abs();
            max_abs = max_abs.max(diff);
            max_rel = max_rel.max(diff / g[e].abs().max(numeric.abs()).max(floor));
        }
        out.push(GradCheck {
            tensor: name.clone(),
            max_rel,
            max_abs,
        });
    }
    out
}

/// Prediction and probabilities re-derived from raw logits: explicit
/// full-vocabulary softmax, explicit variant maximum, explicit argmax.
pub fn brute_force_mcq(model: &TinyLM, tok: &Tokenizer, item: &McqItem) -> (usize, [f64; 4]) {
    let letters = ["A", "B", "C", "D"];
    let mut prompt = format!("Question: {}\n", item.question);
    for (l, o) in letters.iter().zip(&item.options) {
        prompt += &format!("{l}. {o}\n");
    }
    prompt += "Answer:";
    let ids = tok.encode(&prompt);
    let logits = model.forward(&ids).unwrap().to_f64_vec();
    let v = model.config().vocab_size;
    let last = &logits[(ids.len() - 1) * v..];
    let m = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = last.iter().map(|x| (x - m).exp()).sum();
    let mut q = [0.0; 4];
    for (i, l) in letters.iter().enumerate() {
        for variant in [l.to_string(), format!(" {l}"), format!("\n{l}")] {
            let enc = tok.encode(&variant);
            if enc.len() == 1 {
                q[i] = f64::max(q[i], (last[enc[0] as usize] - m).exp() / z);
            }
        }
    }
    let total: f64 = q.iter().sum();
    let probs = q.map(|x| x / total);
    let mut best = 0;
    for i in 1..4 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    (best, probs)
}

/// Toy model instruction-tuned on `items`: LoRA on prompt/answer pairs,
/// merged back into F32 weights.
pub fn tuned_model(items: &[McqItem], steps: usize, lr: f64, seed: u64) -> (TinyLM, Tokenizer) {
    use adaptkit::adapt::{lora_init, merge_lora, train, LoraConfig, TrainConfig};
    use adaptkit::evalmc::PromptTemplate;
    use adaptkit::model::init_params;
    use adaptkit::synth::{fixture_tokenizer, sft_pairs};
    let tok = fixture_tokenizer();
    let mut cfg = toy_config(32, tok.vocab_size(), 2, true);
    cfg.max_seq = 64;
    let base = init_params(&cfg, seed).unwrap();
    let pairs = sft_pairs(items, &PromptTemplate::default());
    let data: Vec<Example> = pairs
        .iter()
        .filter_map(|(p, r)| Example::prompt_response(&tok.encode(p), &tok.encode(r)))
        .collect();
    let lc = LoraConfig {
        rank: 8,
        alpha: 16.0,
        train_embeddings: true,
        ..LoraConfig::default()
    };
    let mut ad = lora_init(&base, &lc, seed).unwrap();
    let tc = TrainConfig {
        peak_lr: lr,
        total_steps: steps,
        warmup_steps: steps / 10,
        micro_batch: 8,
        seq_len: 64,
        seed,
        ..TrainConfig::default()
    };
    train(&base, &mut ad, &data, &[], &tc, |_| {}).unwrap();
    let merged = merge_lora(base.params(), &ad).unwrap();
    (TinyLM::from_checkpoint(cfg, merged).unwrap(), tok)
}

/// Serialized seed checkpoints for mutation: F32, BF16, mixed dtypes
/// with metadata and an empty tensor, and an INT4-quantized model.
pub fn fuzz_seed_files() -> Vec<Vec<u8>> {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        head_dim: 4,
        d_ff: 12,
        rope_base: 10000.0,
        max_seq: 8,
        tie_lm_head: false,
    };
    let dense = init_params(&cfg, 1).unwrap().into_params();
    let mut mixed = Checkpoint::new();
    mixed.insert("a", Tensor::from_f64(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    mixed.insert("b.c", Tensor::from_i32(vec![2, 2], vec![1, 2, 3, -4]).unwrap());
    mixed.insert("d", Tensor::from_u8(vec![5], vec![0, 1, 2, 3, 255]).unwrap());
    mixed.insert("e", Tensor::zeros(DType::BF16, vec![2, 0]));
    mixed.meta.insert("note".into(), "x".into());
    let q = quantize_checkpoint(&dense, &QuantSpec::new(Scheme::Int4Rtn), None).unwrap();
    [dense.to_dtype(DType::F32), dense.to_dtype(DType::BF16), mixed, q]
        .iter()
        .map(|c| c.to_bytes(WriteOptions::default()).unwrap())
        .collect()
}

/// One random structural mutation of a serialized checkpoint.
pub fn mutate_ckpt_bytes(src: &[u8], c: &mut Cursor) -> Vec<u8> {
    let mut b = src.to_vec();
    match c.below(6) {
        0 => {
            for _ in 0..1 + c.below(8) {
                let i = c.below(b.len());
                b[i] ^= 1 << c.below(8);
            }
        }
        1 => b.truncate(c.below(b.len())),
        2 => {
            // Overwrite the declared header length.
            let v = [0u64, 1, 7, u64::MAX, (b.len() as u64) * 2, c.next_u64()][c.below(6)];
            b[4..12].copy_from_slice(&v.to_le_bytes());
        }
        3 => {
            // Rewrite a digit run inside the JSON header.
            let end = 12 + u64::from_le_bytes(b[4..12].try_into().unwrap()) as usize;
            let digits: Vec<usize> = (12..end.min(b.len())).filter(|&i| b[i].is_ascii_digit()).collect();
            if !digits.is_empty() {
                let i = digits[c.below(digits.len())];
                let repl = ["9999999999999", "0", "18446744073709551615", "-1", "1e9"][c.below(5)];
                b.splice(i..i + 1, repl.bytes());
            }
        }
        4 => {
            let extra = c.below(64);
            b.extend((0..extra).map(|_| c.below(256) as u8));
        }
        _ => {
            let i = c.below(b.len());
            let n = c.below(32).min(b.len() - i);
            for x in &mut b[i..i + n] {
                *x = c.below(256) as u8;
            }
        }
    }
    b
}
