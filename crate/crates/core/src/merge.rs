//! Linear interpolation of two checkpoints and ratio sweeps.
//!
//! `out = w·a + (1 − w)·b` per tensor. F32 and BF16 tensors are blended in
//! f32 and rounded once into `a`'s dtype; F64 tensors are blended in f64.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ckpt::Checkpoint;
use crate::evalmc::{evaluate, EvalOptions, McqItem, PromptTemplate};
use crate::model::{ModelConfig, TinyLM};
use crate::tensor::{DType, Tensor};
use crate::tok::Tokenizer;

pub const DEFAULT_WEIGHT_A: f64 = 0.8;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("weight_a must lie in [0, 1], got {0}")]
    Weight(f64),
    #[error("tensor name sets differ: only in a {only_a:?}, only in b {only_b:?}")]
    NameSet { only_a: Vec<String>, only_b: Vec<String> },
    #[error("{name:?}: shape {a:?} vs {b:?}")]
    Shape { name: String, a: Vec<usize>, b: Vec<usize> },
    #[error("{name:?}: dtype {a} vs {b}")]
    DType { name: String, a: DType, b: DType },
    #[error("{name:?}: cannot interpolate non-float dtype {dtype}")]
    NonFloat { name: String, dtype: DType },
}

pub type Result<T> = std::result::Result<T, MergeError>;

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub weight_a: f64,
    /// Only these tensors are interpolated; the rest are copied from `a`.
    pub filter: Option<BTreeSet<String>>,
}

impl MergeSpec {
    pub fn new(weight_a: f64) -> Self {
        Self { weight_a, filter: None }
    }
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self::new(DEFAULT_WEIGHT_A)
    }
}

fn blend(name: &str, ta: &Tensor, tb: &Tensor, w: f64) -> Result<Tensor> {
    if ta.shape() != tb.shape() {
        return Err(MergeError::Shape {
            name: name.to_string(),
            a: ta.shape().to_vec(),
            b: tb.shape().to_vec(),
        });
    }
    if ta.dtype() != tb.dtype() {
        return Err(MergeError::DType {
            name: name.to_string(),
            a: ta.dtype(),
            b: tb.dtype(),
        });
    }
    if !ta.dtype().is_float() {
        return Err(MergeError::NonFloat {
            name: name.to_string(),
            dtype: ta.dtype(),
        });
    }
    // Endpoints are copies, so signed zeros and NaN payloads survive.
    if w == 1.0 {
        return Ok(ta.clone());
    }
    if w == 0.0 {
        return Ok(tb.clone());
    }
    let shape = ta.shape().to_vec();
    let out = match ta.dtype() {
        DType::F64 => {
            let wb = 1.0 - w;
            let v: Vec<f64> = ta
                .to_f64_vec()
                .iter()
                .zip(tb.to_f64_vec())
                .map(|(x, y)| w * x + wb * y)
                .collect();
            Tensor::from_f64(shape, v)
        }
        dtype => {
            let (wa, wb) = (w as f32, (1.0 - w) as f32);
            let v: Vec<f64> = ta
                .to_f32_vec()
                .iter()
                .zip(tb.to_f32_vec())
                .map(|(x, y)| (wa * x + wb * y) as f64)
                .collect();
            Tensor::from_values(dtype, shape, &v)
        }
    };
    Ok(out.expect("blend shape"))
}

/// Interpolate `a` and `b`. Meta is `a`'s plus `merge.weight_a` and the
/// digests of both inputs.
pub fn linear_merge(a: &Checkpoint, b: &Checkpoint, spec: &MergeSpec) -> Result<Checkpoint> {
    let w = spec.weight_a;
    if !(0.0..=1.0).contains(&w) {
        return Err(MergeError::Weight(w));
    }
    let in_scope = |n: &String| spec.filter.as_ref().is_none_or(|f| f.contains(n));
    let names_a: BTreeSet<&String> = a.tensors.keys().filter(|n| in_scope(n)).collect();
    let names_b: BTreeSet<&String> = b.tensors.keys().filter(|n| in_scope(n)).collect();
    if names_a != names_b {
        return Err(MergeError::NameSet {
            only_a: names_a.difference(&names_b).map(|s| s.to_string()).collect(),
            only_b: names_b.difference(&names_a).map(|s| s.to_string()).collect(),
        });
    }
    let mut out = Checkpoint {
        tensors: Default::default(),
        meta: a.meta.clone(),
    };
    for (name, ta) in &a.tensors {
        let t = if in_scope(name) {
            blend(name, ta, &b.tensors[name], w)?
        } else {
            ta.clone()
        };
        out.insert(name.clone(), t);
    }
    out.meta.insert("merge.weight_a".into(), format!("{w:?}"));
    out.meta.insert("merge.digest_a".into(), a.digest());
    out.meta.insert("merge.digest_b".into(), b.digest());
    Ok(out)
}

/// Ratios from `start` to `end` inclusive in increments of `step`.
pub fn ratio_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || end < start {
        return vec![start];
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| {
            let r = start + i as f64 * step;
            // Trim representation noise such as 0.30000000000000004.
            (r * 1e9).round() / 1e9
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Weight of checkpoint `a`.
    pub ratio: f64,
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Merge at every ratio and evaluate. Rows come back sorted by ratio; a
/// failing ratio is reported in its row and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn merge_sweep(
    a: &Checkpoint,
    b: &Checkpoint,
    config: &ModelConfig,
    ratios: &[f64],
    bench: &[McqItem],
    tmpl: &PromptTemplate,
    tok: &Tokenizer,
    opts: &EvalOptions,
) -> Vec<SweepRow> {
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted
        .par_iter()
        .map(|&ratio| {
            let result = linear_merge(a, b, &MergeSpec::new(ratio))
                .map_err(|e| e.to_string())
                .and_then(|m| TinyLM::from_checkpoint(config.clone(), m).map_err(|e| e.to_string()))
                .and_then(|model| evaluate(&model, bench, tmpl, tok, opts).map_err(|e| e.to_string()));
            match result {
                Ok(r) => SweepRow {
                    ratio,
                    accuracy: Some(r.accuracy),
                    error: None,
                },
                Err(e) => SweepRow {
                    ratio,
                    accuracy: None,
                    error: Some(e),
                },
            }
        })
        .collect()
}

/// CSV with columns `ratio, weight_b, accuracy` (empty accuracy marks a
/// failed ratio).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["ratio", "weight_b", "accuracy"])
        .expect("in-memory csv");
    for r in rows {
        let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        let wb = ((1.0 - r.ratio) * 1e9).round() / 1e9;
        w.write_record([format!("{}", r.ratio), format!("{wb}"), acc])
            .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
