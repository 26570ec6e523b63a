//! Post-training quantization: dynamic FP8 (E4M3), group-wise symmetric
//! INT4 by round-to-nearest or GPTQ, and memory-footprint accounting.
//!
//! INT4 codes are two's-complement nibbles in `[-8, 7]`, packed two per byte
//! along each row, low nibble first. A group is `group_size` consecutive
//! columns of one row with scale `absmax / 7`.
//!
//! In a quantized checkpoint each quantized weight `W` becomes `W.qdata`
//! (U8) plus `W.scales` (F32), described by the meta entry
//! `quant.layout.W = "dtype=F32;shape=d,k"`. The scheme tag lives under
//! `quant.scheme` and the group size under `quant.group_size`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ckpt::{Checkpoint, QUANT_LAYOUT_PREFIX};
use crate::model::{layer_param, ModelError, Proj, TinyLM};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("tensor {name:?} must be 2-D for {scheme}, got shape {shape:?}")]
    NotMatrix {
        name: String,
        scheme: &'static str,
        shape: Vec<usize>,
    },
    #[error("non-finite value in tensor {0:?}")]
    NonFinite(String),
    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); increase damping")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("calibration Hessian is singular: zero activations with zero damping")]
    Singular,
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("Hessian for {name:?} has size {got}, expected {want}")]
    HessianSize { name: String, got: usize, want: usize },
    #[error("no calibration Hessian for {0:?}")]
    MissingHessian(String),
    #[error("unknown quantization scheme tag {0:?}")]
    UnknownScheme(String),
    #[error("malformed quantized entry {name:?}: {reason}")]
    Malformed { name: String, reason: String },
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),
    #[error("calibration forward failed: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, QuantError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Fp8Dynamic,
    Int4Rtn,
    Int4Gptq,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::Fp8Dynamic => "fp8",
            Scheme::Int4Rtn => "int4-rtn",
            Scheme::Int4Gptq => "int4-gptq",
        }
    }

    pub fn parse(tag: &str) -> Result<Scheme> {
        match tag {
            "fp8" => Ok(Scheme::Fp8Dynamic),
            "int4-rtn" => Ok(Scheme::Int4Rtn),
            "int4-gptq" => Ok(Scheme::Int4Gptq),
            other => Err(QuantError::UnknownScheme(other.to_string())),
        }
    }

    pub fn is_int4(self) -> bool {
        !matches!(self, Scheme::Fp8Dynamic)
    }

    pub fn default_exclusions(self) -> Vec<String> {
        let names: &[&str] = match self {
            Scheme::Fp8Dynamic => &["lm_head"],
            _ => &["lm_head", "embed_tokens", "vision_tower", "multi_modal_projector"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec {
    pub scheme: Scheme,
    pub group_size: usize,
    pub exclusions: Vec<String>,
    pub calib_samples: usize,
    pub damping: f64,
}

impl QuantSpec {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            group_size: 128,
            exclusions: scheme.default_exclusions(),
            calib_samples: 128,
            damping: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(QuantError::InvalidSpec("group_size must be ≥ 1".into()));
        }
        if self.scheme == Scheme::Int4Gptq && !(self.damping > 0.0) {
            return Err(QuantError::InvalidSpec("GPTQ damping must be > 0".into()));
        }
        Ok(())
    }

    /// Exclusions match a tensor by name suffix or by any dotted path
    /// component (`vision_tower.blocks.0.fc` matches `vision_tower`).
    pub fn is_excluded(&self, name: &str) -> bool {
        self.exclusions
            .iter()
            .any(|e| !e.is_empty() && (name.ends_with(e.as_str()) || name.split('.').any(|c| c == e)))
    }
}

// ---------------------------------------------------------------------------
// E4M3
// ---------------------------------------------------------------------------

pub const E4M3_MAX: f64 = 448.0;
const E4M3_MAX_CODE: u8 = 0x7E;
const E4M3_NAN: u8 = 0x7F;

/// Nearest E4M3 code (round-half-to-even on the mantissa), saturating to
/// ±448. Bias 7, no infinities, `S.1111.111` is NaN.
pub fn e4m3_encode(x: f64) -> u8 {
    if x.is_nan() {
        return E4M3_NAN;
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0 };
    let a = x.abs();
    if a >= E4M3_MAX {
        return sign | E4M3_MAX_CODE;
    }
    const MIN_NORMAL: f64 = 1.0 / 64.0;
    if a < MIN_NORMAL {
        // Subnormal step is 2^-9; a result of 8 is the smallest normal,
        // which is also code 0x08.
        let m = (a * 512.0).round_ties_even() as u8;
        return sign | m;
    }
    let exp = ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    let frac = a / f64::powi(2.0, exp);
    let mut m = ((frac - 1.0) * 8.0).round_ties_even() as i32;
    let mut e = exp;
    if m == 8 {
        m = 0;
        e += 1;
    }
    let biased = e + 7;
    if biased > 15 || (biased == 15 && m == 7) {
        return sign | E4M3_MAX_CODE;
    }
    sign | ((biased as u8) << 3) | m as u8
}

pub fn e4m3_decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = ((code >> 3) & 0x0F) as i32;
    let m = (code & 0x07) as f64;
    if e == 15 && m == 7.0 {
        return f64::NAN;
    }
    let mag = if e == 0 {
        m / 8.0 * f64::powi(2.0, -6)
    } else {
        (1.0 + m / 8.0) * f64::powi(2.0, e - 7)
    };
    sign * mag
}

pub fn fp8_scale(absmax: f64) -> f32 {
    if absmax == 0.0 {
        1.0
    } else {
        (absmax / E4M3_MAX) as f32
    }
}

/// Codes of `values / scale`.
pub fn fp8_encode_with_scale(values: &[f64], scale: f32) -> Vec<u8> {
    let s = scale as f64;
    values.iter().map(|&v| e4m3_encode(v / s)).collect()
}

/// Quantize-dequantize with a per-call absmax scale, as applied to
/// activations at run time.
pub fn fp8_fake_quant(values: &[f64]) -> Vec<f64> {
    let absmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return vec![0.0; values.len()];
    }
    let s = fp8_scale(absmax) as f64;
    values.iter().map(|&v| e4m3_decode(e4m3_encode(v / s)) * s).collect()
}

/// Packed low-bit payload with its scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub scheme: Scheme,
    /// FP8: one code per element. INT4: `[d × ceil(k/2)]` packed nibbles.
    pub qdata: Vec<u8>,
    /// FP8: one per-tensor scale. INT4: `[d × ceil(k/group)]`.
    pub scales: Vec<f32>,
    pub group_size: usize,
    pub orig_shape: Vec<usize>,
    pub orig_dtype: DType,
}

pub fn quant_fp8(w: &Tensor) -> Result<QuantizedTensor> {
    if !w.all_finite() {
        return Err(QuantError::NonFinite("<input>".into()));
    }
    let values = w.to_f64_vec();
    let absmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = fp8_scale(absmax);
    Ok(QuantizedTensor {
        scheme: Scheme::Fp8Dynamic,
        qdata: fp8_encode_with_scale(&values, scale),
        scales: vec![scale],
        group_size: 0,
        orig_shape: w.shape().to_vec(),
        orig_dtype: w.dtype(),
    })
}

pub fn dequant_fp8(q: &QuantizedTensor) -> Tensor {
    let s = q.scales[0] as f64;
    let values: Vec<f64> = q.qdata.iter().map(|&c| e4m3_decode(c) * s).collect();
    Tensor::from_values(q.orig_dtype, q.orig_shape.clone(), &values).expect("fp8 shape")
}

// ---------------------------------------------------------------------------
// INT4
// ---------------------------------------------------------------------------

pub const INT4_MIN: i8 = -8;
pub const INT4_MAX: i8 = 7;

/// Pack codes of a `[rows × cols]` matrix, two per byte, low nibble first.
pub fn pack_int4(codes: &[i8], rows: usize, cols: usize) -> Vec<u8> {
    let stride = cols.div_ceil(2);
    let mut out = vec![0u8; rows * stride];
    for r in 0..rows {
        for c in 0..cols {
            let nib = (codes[r * cols + c] as u8) & 0x0F;
            let byte = &mut out[r * stride + c / 2];
            if c % 2 == 0 {
                *byte |= nib;
            } else {
                *byte |= nib << 4;
            }
        }
    }
    out
}

pub fn unpack_int4(packed: &[u8], rows: usize, cols: usize) -> Vec<i8> {
    let stride = cols.div_ceil(2);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let byte = packed[r * stride + c / 2];
            let nib = if c % 2 == 0 { byte & 0x0F } else { byte >> 4 };
            // sign-extend the nibble
            out.push(((nib << 4) as i8) >> 4);
        }
    }
    out
}

/// Group scale and the per-value quantizer it induces. Codes are computed
/// from the exact ratio `w / absmax · 7` so rational ties such as 3.5 round
/// half-to-even regardless of how the stored f32 scale rounds.
#[derive(Debug, Clone, Copy)]
struct GroupQuantizer {
    absmax: f64,
    scale: f32,
}

impl GroupQuantizer {
    fn new(absmax: f64) -> Self {
        let scale = if absmax == 0.0 { 1.0 } else { (absmax / 7.0) as f32 };
        Self { absmax, scale }
    }

    fn code(&self, w: f64) -> i8 {
        let ratio = if self.absmax == 0.0 { w } else { w / self.absmax * 7.0 };
        ratio.round_ties_even().clamp(INT4_MIN as f64, INT4_MAX as f64) as i8
    }

    fn dequant(&self, code: i8) -> f64 {
        code as f64 * self.scale as f64
    }
}

fn groups_per_row(cols: usize, group: usize) -> usize {
    cols.div_ceil(group)
}

fn matrix_dims(w: &Tensor, scheme: &'static str) -> Result<(usize, usize)> {
    match w.shape() {
        [d, k] => Ok((*d, *k)),
        other => Err(QuantError::NotMatrix {
            name: "<input>".into(),
            scheme,
            shape: other.to_vec(),
        }),
    }
}

/// Round-to-nearest group-wise symmetric INT4.
pub fn quant_int4_rtn(w: &Tensor, group: usize) -> Result<QuantizedTensor> {
    let (d, k) = matrix_dims(w, "int4-rtn")?;
    if group == 0 {
        return Err(QuantError::InvalidSpec("group_size must be ≥ 1".into()));
    }
    if !w.all_finite() {
        return Err(QuantError::NonFinite("<input>".into()));
    }
    let values = w.to_f64_vec();
    let ng = groups_per_row(k, group);
    let mut codes = vec![0i8; d * k];
    let mut scales = vec![0f32; d * ng];
    for r in 0..d {
        for g in 0..ng {
            let cols = g * group..((g + 1) * group).min(k);
            let row = &values[r * k..(r + 1) * k];
            let absmax = row[cols.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let q = GroupQuantizer::new(absmax);
            scales[r * ng + g] = q.scale;
            for c in cols {
                codes[r * k + c] = q.code(row[c]);
            }
        }
    }
    Ok(QuantizedTensor {
        scheme: Scheme::Int4Rtn,
        qdata: pack_int4(&codes, d, k),
        scales,
        group_size: group,
        orig_shape: vec![d, k],
        orig_dtype: w.dtype(),
    })
}

/// `code · scale` per element.
pub fn dequant_int4(q: &QuantizedTensor) -> Tensor {
    let (d, k) = (q.orig_shape[0], q.orig_shape[1]);
    let ng = groups_per_row(k, q.group_size);
    let codes = unpack_int4(&q.qdata, d, k);
    let values: Vec<f64> = (0..d * k)
        .map(|i| {
            let (r, c) = (i / k, i % k);
            codes[i] as f64 * q.scales[r * ng + c / q.group_size] as f64
        })
        .collect();
    Tensor::from_values(q.orig_dtype, vec![d, k], &values).expect("int4 shape")
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    match q.scheme {
        Scheme::Fp8Dynamic => dequant_fp8(q),
        _ => dequant_int4(q),
    }
}

/// Unpacked codes of an INT4 tensor.
pub fn int4_codes(q: &QuantizedTensor) -> Vec<i8> {
    unpack_int4(&q.qdata, q.orig_shape[0], q.orig_shape[1])
}

// ---------------------------------------------------------------------------
// Calibration Hessian and GPTQ
// ---------------------------------------------------------------------------

/// Lower Cholesky factor of a symmetric positive definite `n × n` matrix.
pub fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(QuantError::NotPositiveDefinite { pivot: i, value: s });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky_lower(a, n)?;
    // L⁻¹ by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = vec![0.0; n * n];
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for p in c..i {
                s -= l[i * n + p] * linv[p * n + c];
            }
            linv[i * n + c] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (i..n).map(|p| linv[p * n + i] * linv[p * n + j]).sum();
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    Ok(inv)
}

/// `H = 2·X·Xᵀ/N + λI`, `λ = damping · mean(diag(2·X·Xᵀ/N))`, for
/// calibration activations `x: [k × N]` (one sample per column).
pub fn hessian_from_calib(x: &[f64], k: usize, n: usize, damping: f64) -> Result<Vec<f64>> {
    if n == 0 || k == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    let mut h = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..n).map(|c| x[i * n + c] * x[j * n + c]).sum();
            let v = 2.0 * s / n as f64;
            h[i * k + j] = v;
            h[j * k + i] = v;
        }
    }
    finish_hessian(h, k, damping)
}

fn finish_hessian(mut h: Vec<f64>, k: usize, damping: f64) -> Result<Vec<f64>> {
    let mean_diag = (0..k).map(|i| h[i * k + i]).sum::<f64>() / k as f64;
    let lambda = damping * mean_diag;
    for i in 0..k {
        h[i * k + i] += lambda;
    }
    if cholesky_lower(&h, k).is_err() {
        return Err(QuantError::Singular);
    }
    Ok(h)
}

/// Group-wise GPTQ without activation reordering. Columns are processed
/// left to right; each group's scales are fixed from the current weights
/// when the sweep enters the group, and every column's rounding error is
/// pushed into the columns to its right through the upper Cholesky factor
/// of `H⁻¹`.
pub fn gptq_quant(w: &Tensor, h: &[f64], group: usize) -> Result<QuantizedTensor> {
    let (d, k) = matrix_dims(w, "int4-gptq")?;
    if group == 0 {
        return Err(QuantError::InvalidSpec("group_size must be ≥ 1".into()));
    }
    if h.len() != k * k {
        return Err(QuantError::HessianSize {
            name: "<input>".into(),
            got: h.len(),
            want: k * k,
        });
    }
    if !w.all_finite() {
        return Err(QuantError::NonFinite("<input>".into()));
    }
    let hinv = spd_inverse(h, k)?;
    // Upper factor U with H⁻¹ = UᵀU is the transpose of the lower factor.
    let lower = cholesky_lower(&hinv, k)?;
    let upper = |i: usize, j: usize| lower[j * k + i];

    let mut work = w.to_f64_vec();
    let ng = groups_per_row(k, group);
    let mut codes = vec![0i8; d * k];
    let mut scales = vec![0f32; d * ng];
    let mut quantizers = vec![GroupQuantizer::new(0.0); d];
    for j in 0..k {
        if j % group == 0 {
            let g = j / group;
            let end = (j + group).min(k);
            for r in 0..d {
                let absmax = work[r * k + j..r * k + end].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                quantizers[r] = GroupQuantizer::new(absmax);
                scales[r * ng + g] = quantizers[r].scale;
            }
        }
        let pivot = upper(j, j);
        for r in 0..d {
            let wv = work[r * k + j];
            let code = quantizers[r].code(wv);
            codes[r * k + j] = code;
            let err = (wv - quantizers[r].dequant(code)) / pivot;
            if err != 0.0 {
                for l in j + 1..k {
                    work[r * k + l] -= err * upper(j, l);
                }
            }
        }
    }
    Ok(QuantizedTensor {
        scheme: Scheme::Int4Gptq,
        qdata: pack_int4(&codes, d, k),
        scales,
        group_size: group,
        orig_shape: vec![d, k],
        orig_dtype: w.dtype(),
    })
}

/// `tr((W − Ŵ) H (W − Ŵ)ᵀ)`.
pub fn proxy_loss(w: &Tensor, w_hat: &Tensor, h: &[f64]) -> f64 {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    let a = w.to_f64_vec();
    let b = w_hat.to_f64_vec();
    let mut total = 0.0;
    for r in 0..d {
        let e: Vec<f64> = (0..k).map(|c| a[r * k + c] - b[r * k + c]).collect();
        for i in 0..k {
            if e[i] == 0.0 {
                continue;
            }
            let hi: f64 = (0..k).map(|j| h[i * k + j] * e[j]).sum();
            total += e[i] * hi;
        }
    }
    total
}

/// Calibration Hessians for every projection of `model`, harvested from its
/// full-precision activations on `samples`.
pub fn collect_hessians(model: &TinyLM, samples: &[Vec<u32>], damping: f64) -> Result<BTreeMap<String, Vec<f64>>> {
    if samples.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let cfg = model.config();
    let mut sums: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
    let mut tokens = 0usize;
    for seq in samples {
        let (_, cache) = model
            .forward_raw(seq, None, &Default::default())
            .map_err(|e: ModelError| QuantError::Model(e.to_string()))?;
        tokens += seq.len();
        for layer in 0..cfg.n_layers {
            for p in Proj::ALL {
                let k = cfg.proj_shape(p)[1];
                let x = cache.proj_input(layer, p);
                let entry = sums
                    .entry(layer_param(layer, p.name()))
                    .or_insert_with(|| (k, vec![0.0; k * k]));
                for row in x.chunks_exact(k) {
                    for i in 0..k {
                        if row[i] == 0.0 {
                            continue;
                        }
                        for j in 0..=i {
                            entry.1[i * k + j] += row[i] * row[j];
                        }
                    }
                }
            }
        }
    }
    sums.into_iter()
        .map(|(name, (k, mut acc))| {
            for i in 0..k {
                for j in 0..=i {
                    let v = 2.0 * acc[i * k + j] / tokens as f64;
                    acc[i * k + j] = v;
                    acc[j * k + i] = v;
                }
            }
            finish_hessian(acc, k, damping).map(|h| (name, h))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Whole-checkpoint application
// ---------------------------------------------------------------------------

pub fn is_quantized(ckpt: &Checkpoint) -> bool {
    ckpt.meta.contains_key("quant.scheme")
}

fn layout_string(dtype: DType, shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("dtype={};shape={}", dtype, dims.join(","))
}

fn parse_layout(name: &str, s: &str) -> Result<(DType, Vec<usize>)> {
    let malformed = |reason: &str| QuantError::Malformed {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let mut dtype = None;
    let mut shape = None;
    for part in s.split(';') {
        match part.split_once('=') {
            Some(("dtype", v)) => dtype = DType::parse(v),
            Some(("shape", v)) => {
                shape = v
                    .split(',')
                    .map(|d| d.parse::<usize>().ok())
                    .collect::<Option<Vec<_>>>()
            }
            _ => return Err(malformed("unrecognised layout field")),
        }
    }
    Ok((
        dtype.ok_or_else(|| malformed("missing dtype"))?,
        shape.ok_or_else(|| malformed("missing shape"))?,
    ))
}

/// Replace every non-excluded 2-D tensor with its quantized pair. GPTQ
/// requires a Hessian per quantized tensor name.
pub fn quantize_checkpoint(
    ckpt: &Checkpoint,
    spec: &QuantSpec,
    hessians: Option<&BTreeMap<String, Vec<f64>>>,
) -> Result<Checkpoint> {
    spec.validate()?;
    let mut out = Checkpoint {
        tensors: BTreeMap::new(),
        meta: ckpt.meta.clone(),
    };
    let mut quantized_any = false;
    for (name, t) in &ckpt.tensors {
        if t.rank() != 2 || spec.is_excluded(name) || !t.dtype().is_float() {
            out.insert(name.clone(), t.clone());
            continue;
        }
        let q = match spec.scheme {
            Scheme::Fp8Dynamic => quant_fp8(t),
            Scheme::Int4Rtn => quant_int4_rtn(t, spec.group_size),
            Scheme::Int4Gptq => {
                let h = hessians
                    .and_then(|m| m.get(name))
                    .ok_or_else(|| QuantError::MissingHessian(name.clone()))?;
                gptq_quant(t, h, spec.group_size)
            }
        }
        .map_err(|e| match e {
            QuantError::NonFinite(_) => QuantError::NonFinite(name.clone()),
            QuantError::HessianSize { got, want, .. } => QuantError::HessianSize {
                name: name.clone(),
                got,
                want,
            },
            other => other,
        })?;
        let scales_shape = match q.scheme {
            Scheme::Fp8Dynamic => vec![],
            _ => vec![q.orig_shape[0], groups_per_row(q.orig_shape[1], q.group_size)],
        };
        let qdata_shape = match q.scheme {
            Scheme::Fp8Dynamic => q.orig_shape.clone(),
            _ => vec![q.orig_shape[0], q.orig_shape[1].div_ceil(2)],
        };
        out.insert(
            format!("{name}.qdata"),
            Tensor::from_u8(qdata_shape, q.qdata).expect("qdata shape"),
        );
        out.insert(
            format!("{name}.scales"),
            Tensor::from_f32(scales_shape, q.scales).expect("scales shape"),
        );
        out.meta.insert(
            format!("{QUANT_LAYOUT_PREFIX}{name}"),
            layout_string(t.dtype(), t.shape()),
        );
        quantized_any = true;
    }
    if quantized_any || !ckpt.tensors.is_empty() {
        out.meta.insert("quant.scheme".into(), spec.scheme.tag().into());
        out.meta.insert("quant.group_size".into(), spec.group_size.to_string());
    }
    if !quantized_any {
        // Nothing matched: the output is the input.
        return Ok(ckpt.clone());
    }
    Ok(out)
}

/// Rebuild the quantized pairs of a checkpoint as [`QuantizedTensor`]s.
pub fn quantized_entries(ckpt: &Checkpoint) -> Result<BTreeMap<String, QuantizedTensor>> {
    let tag = ckpt
        .meta
        .get("quant.scheme")
        .ok_or_else(|| QuantError::UnknownScheme(String::new()))?;
    let scheme = Scheme::parse(tag)?;
    let group_size = if scheme.is_int4() {
        ckpt.meta
            .get("quant.group_size")
            .and_then(|g| g.parse::<usize>().ok())
            .filter(|&g| g > 0)
            .ok_or_else(|| QuantError::Malformed {
                name: "quant.group_size".into(),
                reason: "missing or invalid".into(),
            })?
    } else {
        0
    };
    let mut out = BTreeMap::new();
    for (key, layout) in &ckpt.meta {
        let Some(name) = key.strip_prefix(QUANT_LAYOUT_PREFIX) else {
            continue;
        };
        let malformed = |reason: String| QuantError::Malformed {
            name: name.to_string(),
            reason,
        };
        let (orig_dtype, orig_shape) = parse_layout(name, layout)?;
        let qdata = ckpt
            .get(&format!("{name}.qdata"))
            .and_then(Tensor::as_u8)
            .ok_or_else(|| malformed("qdata missing or not U8".into()))?;
        let scales_t = ckpt
            .get(&format!("{name}.scales"))
            .ok_or_else(|| malformed("scales missing".into()))?;
        if scales_t.dtype() != DType::F32 {
            return Err(malformed("scales must be F32".into()));
        }
        let numel: usize = orig_shape.iter().product();
        let (want_q, want_s) = match scheme {
            Scheme::Fp8Dynamic => (numel, 1),
            _ => {
                let [d, k] = orig_shape[..] else {
                    return Err(malformed("INT4 tensor must be 2-D".into()));
                };
                (d * k.div_ceil(2), d * groups_per_row(k, group_size))
            }
        };
        if qdata.len() != want_q || scales_t.numel() != want_s {
            return Err(malformed(format!(
                "payload sizes {}/{} do not match layout {:?}",
                qdata.len(),
                scales_t.numel(),
                orig_shape
            )));
        }
        out.insert(
            name.to_string(),
            QuantizedTensor {
                scheme,
                qdata: qdata.to_vec(),
                scales: scales_t.to_f32_vec(),
                group_size,
                orig_shape,
                orig_dtype,
            },
        );
    }
    Ok(out)
}

/// Inverse layout transform: quantized pairs become dense tensors again.
pub fn dequantize_checkpoint(ckpt: &Checkpoint) -> Result<Checkpoint> {
    let entries = quantized_entries(ckpt)?;
    let mut out = Checkpoint::new();
    for (name, t) in &ckpt.tensors {
        let base = name.strip_suffix(".qdata").or_else(|| name.strip_suffix(".scales"));
        if base.is_some_and(|b| entries.contains_key(b)) {
            continue;
        }
        out.insert(name.clone(), t.clone());
    }
    for (name, q) in &entries {
        out.insert(name.clone(), dequantize(q));
    }
    out.meta = ckpt
        .meta
        .iter()
        .filter(|(k, _)| !k.starts_with("quant."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Footprint
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Bf16,
    Fp8,
    Int4,
}

impl Precision {
    pub fn label(self) -> &'static str {
        match self {
            Precision::Bf16 => "BF16",
            Precision::Fp8 => "FP8",
            Precision::Int4 => "INT4",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub precision: Precision,
    pub bytes: u64,
    pub bf16_bytes: u64,
}

impl Footprint {
    /// BF16 baseline over quantized size.
    pub fn ratio(&self) -> f64 {
        self.bf16_bytes as f64 / self.bytes as f64
    }

    pub fn row(&self, variant: &str) -> String {
        format!(
            "{variant}\t{}\t{}\t{}\t{:.3}",
            self.precision.label(),
            self.bytes,
            self.bf16_bytes,
            self.ratio()
        )
    }
}

/// Bytes a single tensor occupies under `precision`. `excluded` tensors and
/// non-matrices keep their stored dtype under FP8/INT4.
pub fn tensor_footprint(shape: &[usize], dtype: DType, precision: Precision, excluded: bool, group: usize) -> u64 {
    let numel: u64 = shape.iter().map(|&d| d as u64).product();
    let quantizable = shape.len() == 2 && !excluded && dtype.is_float();
    match precision {
        Precision::Bf16 => 2 * numel,
        _ if !quantizable => numel * dtype.size_bytes() as u64,
        Precision::Fp8 => numel + 4,
        Precision::Int4 => {
            let (d, k) = (shape[0] as u64, shape[1] as u64);
            d * k.div_ceil(2) + d * k.div_ceil(group as u64) * 4
        }
    }
}

/// Projected footprint of a dense checkpoint under `spec`.
pub fn footprint_plan(ckpt: &Checkpoint, spec: &QuantSpec) -> Footprint {
    let precision = if spec.scheme.is_int4() {
        Precision::Int4
    } else {
        Precision::Fp8
    };
    let mut bytes = 0;
    let mut bf16 = 0;
    for (name, t) in &ckpt.tensors {
        bytes += tensor_footprint(t.shape(), t.dtype(), precision, spec.is_excluded(name), spec.group_size);
        bf16 += 2 * t.numel() as u64;
    }
    Footprint {
        precision,
        bytes,
        bf16_bytes: bf16,
    }
}

/// Measured footprint of a stored checkpoint: quantized payloads and scales
/// as stored, everything else at its stored dtype. Dense checkpoints are
/// reported as BF16.
pub fn footprint_of(ckpt: &Checkpoint) -> Result<Footprint> {
    if !is_quantized(ckpt) {
        let bf16 = ckpt.param_count() as u64 * 2;
        return Ok(Footprint {
            precision: Precision::Bf16,
            bytes: bf16,
            bf16_bytes: bf16,
        });
    }
    let entries = quantized_entries(ckpt)?;
    let pair_names: BTreeSet<String> = entries
        .keys()
        .flat_map(|n| [format!("{n}.qdata"), format!("{n}.scales")])
        .collect();
    let mut bytes = 0u64;
    let mut bf16 = 0u64;
    for (name, t) in &ckpt.tensors {
        bytes += t.byte_len() as u64;
        if !pair_names.contains(name) {
            bf16 += 2 * t.numel() as u64;
        }
    }
    for q in entries.values() {
        bf16 += 2 * q.orig_shape.iter().product::<usize>() as u64;
    }
    let precision = match Scheme::parse(&ckpt.meta["quant.scheme"])? {
        Scheme::Fp8Dynamic => Precision::Fp8,
        _ => Precision::Int4,
    };
    Ok(Footprint {
        precision,
        bytes,
        bf16_bytes: bf16,
    })
}
