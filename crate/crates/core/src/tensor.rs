//! Dense row-major tensors and the small kernel set the rest of the crate
//! is built on.
//!
//! `BF16` is a storage dtype only. Every kernel widens its inputs to `f64`,
//! computes, and narrows the result to the promoted output dtype: `F32` when
//! all inputs are `F32`/`BF16`, `F64` otherwise.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {op} got shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("{op} is not defined for dtype {dtype}")]
    DType { op: &'static str, dtype: DType },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F64,
    F32,
    BF16,
    I32,
    U8,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 | DType::I32 => 4,
            DType::BF16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F64 | DType::F32 | DType::BF16)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::BF16 => "BF16",
            DType::I32 => "I32",
            DType::U8 => "U8",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        Some(match s {
            "F64" => DType::F64,
            "F32" => DType::F32,
            "BF16" => DType::BF16,
            "I32" => DType::I32,
            "U8" => DType::U8,
            _ => return None,
        })
    }

    /// Output dtype of an arithmetic kernel over inputs of these dtypes.
    pub fn promote(a: DType, b: DType) -> DType {
        let narrow = |d| matches!(d, DType::F32 | DType::BF16);
        if narrow(a) && narrow(b) {
            DType::F32
        } else {
            DType::F64
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Round an `f32` to bfloat16 bits, round-half-to-even on the dropped
/// mantissa bits. NaN maps to the canonical quiet NaN.
pub fn f32_to_bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x0040;
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb);
    (rounded >> 16) as u16
}

pub fn bf16_bits_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F64(Vec<f64>),
    F32(Vec<f32>),
    BF16(Vec<u16>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F64(v) => v.len(),
            Storage::F32(v) => v.len(),
            Storage::BF16(v) => v.len(),
            Storage::I32(v) => v.len(),
            Storage::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Storage::F64(_) => DType::F64,
            Storage::F32(_) => DType::F32,
            Storage::BF16(_) => DType::BF16,
            Storage::I32(_) => DType::I32,
            Storage::U8(_) => DType::U8,
        }
    }
}

/// Dense n-dimensional array. Immutable once built; kernels return new
/// tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, storage: Storage) -> Result<Self> {
        if numel(&shape) != storage.len() {
            return Err(TensorError::BufferLength {
                shape,
                len: storage.len(),
            });
        }
        Ok(Self { shape, storage })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, Storage::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, Storage::F32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, Storage::U8(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, Storage::I32(data))
    }

    pub fn from_bf16_bits(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::new(shape, Storage::BF16(data))
    }

    /// Build a tensor of `dtype` from `f64` values, rounding once.
    pub fn from_values(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let storage = match dtype {
            DType::F64 => Storage::F64(values.to_vec()),
            DType::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            DType::BF16 => Storage::BF16(values.iter().map(|&v| f32_to_bf16_bits(v as f32)).collect()),
            DType::I32 => Storage::I32(values.iter().map(|&v| v as i32).collect()),
            DType::U8 => Storage::U8(values.iter().map(|&v| v as u8).collect()),
        };
        Self::new(shape, storage)
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        let storage = match dtype {
            DType::F64 => Storage::F64(vec![0.0; n]),
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::BF16 => Storage::BF16(vec![0; n]),
            DType::I32 => Storage::I32(vec![0; n]),
            DType::U8 => Storage::U8(vec![0; n]),
        };
        Self { shape, storage }
    }

    pub fn scalar(dtype: DType, value: f64) -> Self {
        Self::from_values(dtype, Vec::new(), &[value]).expect("scalar shape")
    }

    pub fn dtype(&self) -> DType {
        self.storage.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.storage.len()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }

    /// Widen every element to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.storage {
            Storage::F64(v) => v.clone(),
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::BF16(v) => v.iter().map(|&b| bf16_bits_to_f32(b) as f64).collect(),
            Storage::I32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Widen to `f32` (exact for `F32`/`BF16`).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.storage {
            Storage::F32(v) => v.clone(),
            Storage::BF16(v) => v.iter().map(|&b| bf16_bits_to_f32(b)).collect(),
            _ => self.to_f64_vec().into_iter().map(|x| x as f32).collect(),
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.storage {
            Storage::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        match (&self.storage, dtype) {
            (Storage::BF16(_), DType::F32) => {
                Tensor::from_f32(self.shape.clone(), self.to_f32_vec()).expect("same length")
            }
            (Storage::F32(v), DType::BF16) => {
                Tensor::from_bf16_bits(self.shape.clone(), v.iter().map(|&x| f32_to_bf16_bits(x)).collect())
                    .expect("same length")
            }
            _ => Tensor::from_values(dtype, self.shape.clone(), &self.to_f64_vec()).expect("same length"),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.storage.clone())
    }

    pub fn all_finite(&self) -> bool {
        match &self.storage {
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::BF16(v) => v.iter().all(|&b| bf16_bits_to_f32(b).is_finite()),
            Storage::I32(_) | Storage::U8(_) => true,
        }
    }

    /// Little-endian payload bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        match &self.storage {
            Storage::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::BF16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Inverse of [`Tensor::to_le_bytes`]. The byte count must match the
    /// shape exactly.
    pub fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor> {
        let n = bytes.len() / dtype.size_bytes();
        if !bytes.len().is_multiple_of(dtype.size_bytes()) || n != numel(&shape) {
            return Err(TensorError::BufferLength { shape, len: n });
        }
        let storage = match dtype {
            DType::F64 => Storage::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F32 => Storage::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::BF16 => Storage::BF16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::I32 => Storage::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => Storage::U8(bytes.to_vec()),
        };
        Tensor::new(shape, storage)
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. These operate on row-major f64 buffers and are shared by the
// model's forward and backward passes.
// ---------------------------------------------------------------------------

pub mod kernels {
    /// `c[m×n] = a[m×k] · b[k×n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in row.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        c
    }

    /// `c[m×n] = a[m×k] · w[n×k]ᵀ`, the linear-layer product for a weight
    /// stored as `[out × in]`.
    pub fn matmul_nt(a: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let wrow = &w[j * k..(j + 1) * k];
                c[i * n + j] = dot(arow, wrow);
            }
        }
        c
    }

    /// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
    pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; k * n];
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        c
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Max-subtracted softmax of one row, in place.
    pub fn softmax_row(row: &mut [f64]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    /// Log-sum-exp of one row.
    pub fn logsumexp(row: &[f64]) -> f64 {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    /// RMS norm over rows of width `d`. Returns the output and the per-row
    /// reciprocal RMS (needed for the backward pass).
    pub fn rms_norm(x: &[f64], gain: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let rows = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let s = 1.0 / (ms + eps).sqrt();
            inv[r] = s;
            for j in 0..d {
                y[r * d + j] = xr[j] * s * gain[j];
            }
        }
        (y, inv)
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn silu(x: f64) -> f64 {
        x * sigmoid(x)
    }

    /// d silu(x) / dx.
    pub fn silu_grad(x: f64) -> f64 {
        let s = sigmoid(x);
        s * (1.0 + x * (1.0 - s))
    }
}

fn float_dtype_check(op: &'static str, t: &Tensor) -> Result<()> {
    if t.dtype() == DType::U8 {
        return Err(TensorError::DType { op, dtype: t.dtype() });
    }
    Ok(())
}

/// Matrix product of a `[m×k]` and a `[k×n]` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    float_dtype_check("matmul", a)?;
    float_dtype_check("matmul", b)?;
    let shape_err = || TensorError::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err());
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let c = kernels::matmul(&a.to_f64_vec(), &b.to_f64_vec(), m, k, n);
    Tensor::from_values(DType::promote(a.dtype(), b.dtype()), vec![m, n], &c)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    float_dtype_check("softmax", x)?;
    if axis >= x.rank() {
        return Err(TensorError::Axis { axis, rank: x.rank() });
    }
    let data = x.to_f64_vec();
    if let Some(i) = data.iter().position(|v| v.is_nan()) {
        return Err(TensorError::Numeric {
            op: "softmax",
            detail: format!("NaN input at flat index {i}"),
        });
    }
    let shape = x.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = data.clone();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = data[base + j * inner];
            }
            kernels::softmax_row(&mut lane);
            for (j, l) in lane.iter().enumerate() {
                out[base + j * inner] = *l;
            }
        }
    }
    Tensor::from_values(DType::promote(x.dtype(), x.dtype()), shape.to_vec(), &out)
}

/// `y = x / sqrt(mean(x²) + eps) ⊙ gain` over the last axis.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    float_dtype_check("rms_norm", x)?;
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 || gain.rank() != 1 || gain.shape()[0] != d {
        return Err(TensorError::Shape {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let (y, _) = kernels::rms_norm(&x.to_f64_vec(), &gain.to_f64_vec(), d, eps);
    Tensor::from_values(DType::promote(x.dtype(), gain.dtype()), x.shape().to_vec(), &y)
}

/// Elementwise SiLU.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    float_dtype_check("silu", x)?;
    let y: Vec<f64> = x.to_f64_vec().into_iter().map(kernels::silu).collect();
    Tensor::from_values(DType::promote(x.dtype(), x.dtype()), x.shape().to_vec(), &y)
}

fn zip_same_shape(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    float_dtype_check(op, a)?;
    float_dtype_check(op, b)?;
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out: Vec<f64> = a
        .to_f64_vec()
        .into_iter()
        .zip(b.to_f64_vec())
        .map(|(x, y)| f(x, y))
        .collect();
    Tensor::from_values(DType::promote(a.dtype(), b.dtype()), a.shape().to_vec(), &out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    float_dtype_check("scale", a)?;
    let out: Vec<f64> = a.to_f64_vec().into_iter().map(|x| x * factor).collect();
    Tensor::from_values(DType::promote(a.dtype(), a.dtype()), a.shape().to_vec(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_example() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b).unwrap().to_f64_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = t64(&[2, 3], &[1.0, -2.0, 3.5, 4.0, 0.5, 9.0]);
        let z = Tensor::zeros(DType::F64, vec![3, 4]);
        assert!(matmul(&a, &z).unwrap().to_f64_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(DType::F32, vec![2, 3]);
        let b = Tensor::zeros(DType::F32, vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn matmul_f32_accumulates_in_f32_or_better() {
        let a = Tensor::from_f32(vec![1, 2], vec![1.0, 1e-8]).unwrap();
        let b = Tensor::from_f32(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dtype(), DType::F32);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t64(&[2], &[0.0, 0.0]), 0).unwrap().to_f64_vec();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = softmax(&t64(&[2], &[2f64.ln(), 0.0]), 0).unwrap().to_f64_vec();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&t64(&[2], &[1000.0, 0.0]), 0).unwrap().to_f64_vec();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let err = softmax(&t64(&[2], &[f64::NAN, 0.0]), 0).unwrap_err();
        assert!(matches!(err, TensorError::Numeric { .. }));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t64(&[2, 2], &[0.0, 1.0, 0.0, 3.0]);
        let s = softmax(&x, 0).unwrap().to_f64_vec();
        assert_eq!(s[0], 0.5);
        assert!((s[1] + s[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_examples() {
        let ones = t64(&[4], &[1.0; 4]);
        let y = rms_norm(&ones, &ones, 1e-12).unwrap().to_f64_vec();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-9));

        let x = t64(&[2], &[3.0, -3.0]);
        let g = t64(&[2], &[1.0, 1.0]);
        assert_eq!(rms_norm(&x, &g, 0.0).unwrap().to_f64_vec(), vec![1.0, -1.0]);

        let z = t64(&[2], &[0.0, 0.0]);
        assert_eq!(rms_norm(&x, &z, 1e-6).unwrap().to_f64_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn rms_norm_gain_length_mismatch() {
        let x = t64(&[2, 3], &[1.0; 6]);
        let g = t64(&[2], &[1.0; 2]);
        assert!(matches!(rms_norm(&x, &g, 1e-6), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn bf16_rounds_half_to_even() {
        // 1 + 2^-8 is exactly halfway between two bf16 values; ties to even
        // keeps the mantissa at 1.0.
        let halfway = f32::from_bits(0x3F80_8000);
        assert_eq!(f32_to_bf16_bits(halfway), 0x3F80);
        // the next halfway point rounds up to the even neighbour
        let halfway_odd = f32::from_bits(0x3F81_8000);
        assert_eq!(f32_to_bf16_bits(halfway_odd), 0x3F82);
        assert_eq!(f32_to_bf16_bits(1.0), 0x3F80);
        assert!(bf16_bits_to_f32(f32_to_bf16_bits(f32::NAN)).is_nan());
        assert_eq!(bf16_bits_to_f32(f32_to_bf16_bits(f32::INFINITY)), f32::INFINITY);
    }

    #[test]
    fn bytes_roundtrip_each_dtype() {
        for dtype in [DType::F64, DType::F32, DType::BF16, DType::I32, DType::U8] {
            let t = Tensor::from_values(dtype, vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
            let back = Tensor::from_le_bytes(dtype, vec![2, 2], &t.to_le_bytes()).unwrap();
            assert_eq!(back, t);
        }
        assert!(Tensor::from_le_bytes(DType::F32, vec![2], &[0u8; 7]).is_err());
    }

    fn mat4() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 16)
    }

    proptest! {
        #[test]
        fn matmul_identity_and_distributivity(a in mat4(), b in mat4(), c in mat4()) {
            let mut eye = vec![0.0; 16];
            for i in 0..4 { eye[i * 4 + i] = 1.0; }
            let (ta, tb, tc) = (t64(&[4, 4], &a), t64(&[4, 4], &b), t64(&[4, 4], &c));
            let ti = t64(&[4, 4], &eye);
            prop_assert_eq!(matmul(&ta, &ti).unwrap(), ta.clone());
            prop_assert_eq!(matmul(&ti, &ta).unwrap(), ta.clone());
            let lhs = matmul(&ta, &add(&tb, &tc).unwrap()).unwrap().to_f64_vec();
            let rhs = add(&matmul(&ta, &tb).unwrap(), &matmul(&ta, &tc).unwrap()).unwrap().to_f64_vec();
            for (x, y) in lhs.iter().zip(&rhs) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs())));
            }
        }

        #[test]
        fn softmax_shift_invariant(x in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
            let n = x.len();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let p = softmax(&t64(&[n], &x), 0).unwrap().to_f64_vec();
            let q = softmax(&t64(&[n], &shifted), 0).unwrap().to_f64_vec();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn rms_norm_has_unit_rms(x in proptest::collection::vec(0.5f64..10.0, 1..16), neg in proptest::collection::vec(any::<bool>(), 16)) {
            let d = x.len();
            let x: Vec<f64> = x.iter().zip(&neg).map(|(v, &n)| if n { -v } else { *v }).collect();
            let g = t64(&[d], &vec![1.0; d]);
            let y = rms_norm(&t64(&[d], &x), &g, 1e-12).unwrap().to_f64_vec();
            let rms = (y.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
            prop_assert!((rms - 1.0).abs() <= 1e-6);
        }
    }
}
