//! The `TCK1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   "TCK1"                     4 bytes
//! offset 4   header_len                 u64
//! offset 12  header                     header_len bytes, UTF-8 JSON, padded
//!                                       with ASCII spaces so that the payload
//!                                       region starts on a 64-byte boundary
//! offset P   payload region             P = 12 + header_len
//! ```
//!
//! The header is a JSON object with keys in lexicographic order. Each tensor
//! entry is `name -> {"byte_len", "byte_offset", "dtype", "shape"}`, where
//! `byte_offset` is relative to the payload region. The reserved key
//! `"__meta__"` maps to a string-to-string object. Payloads are written in
//! name order, each starting on a 64-byte boundary; gaps are zero-filled.
//!
//! Quantized tensors are stored as a `<name>.qdata` / `<name>.scales` pair
//! and described by a `quant.layout.<name>` meta key. Both directions of that
//! pairing are validated on read and write.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{numel, DType, Tensor};

pub const MAGIC: &[u8; 4] = b"TCK1";
pub const ALIGN: usize = 64;
pub const META_KEY: &str = "__meta__";
pub const FORMAT_VERSION: &str = "1";
/// Meta key prefix describing a quantized tensor pair.
pub const QUANT_LAYOUT_PREFIX: &str = "quant.layout.";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"TCK1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated file: need {needed} bytes, have {have}")]
    Truncated { needed: u64, have: u64 },
    #[error("header is not valid JSON: {0}")]
    HeaderJson(String),
    #[error("tensor {name:?}: extent [{offset}, {offset}+{len}) lies outside the {available}-byte payload region")]
    OutOfBounds {
        name: String,
        offset: u64,
        len: u64,
        available: u64,
    },
    #[error("tensors {first:?} and {second:?} have overlapping extents")]
    Overlap { first: String, second: String },
    #[error("tensor {name:?}: {reason}")]
    InvalidEntry { name: String, reason: String },
    #[error("invalid tensor name {0:?}: names must be nonempty printable ASCII")]
    InvalidName(String),
    #[error("tensor {name:?} contains non-finite values")]
    NonFinite { name: String },
    #[error("meta key {key:?} references missing tensor {missing:?}")]
    UnresolvedMeta { key: String, missing: String },
}

pub type Result<T> = std::result::Result<T, CkptError>;

/// Ordered tensor map plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    /// Permit NaN/inf in float tensors.
    pub allow_nonfinite: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    byte_len: u64,
    byte_offset: u64,
    dtype: String,
    shape: Vec<u64>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

pub fn valid_name(name: &str) -> bool {
    !name.is_empty() && name != META_KEY && name.bytes().all(|b| (0x20..0x7F).contains(&b))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.tensors.values().map(Tensor::byte_len).sum()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Cast every float tensor to `dtype`; integer tensors are left alone.
    pub fn to_dtype(&self, dtype: DType) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let t = if t.dtype().is_float() { t.cast(dtype) } else { t.clone() };
                (n.clone(), t)
            })
            .collect();
        Checkpoint {
            tensors,
            meta: self.meta.clone(),
        }
    }

    /// Name and meta-reference invariants.
    pub fn validate(&self) -> Result<()> {
        for name in self.tensors.keys() {
            if !valid_name(name) {
                return Err(CkptError::InvalidName(name.clone()));
            }
        }
        for key in self.meta.keys() {
            if let Some(base) = key.strip_prefix(QUANT_LAYOUT_PREFIX) {
                for suffix in [".qdata", ".scales"] {
                    let want = format!("{base}{suffix}");
                    if !self.tensors.contains_key(&want) {
                        return Err(CkptError::UnresolvedMeta {
                            key: key.clone(),
                            missing: want,
                        });
                    }
                }
            }
        }
        for name in self.tensors.keys() {
            if let Some(base) = name.strip_suffix(".qdata") {
                let key = format!("{QUANT_LAYOUT_PREFIX}{base}");
                if !self.meta.contains_key(&key) {
                    return Err(CkptError::UnresolvedMeta {
                        key,
                        missing: name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Serialize to the canonical `TCK1` byte layout.
    pub fn to_bytes(&self, opts: WriteOptions) -> Result<Vec<u8>> {
        self.validate()?;
        if !opts.allow_nonfinite {
            if let Some((name, _)) = self.tensors.iter().find(|(_, t)| !t.all_finite()) {
                return Err(CkptError::NonFinite { name: name.clone() });
            }
        }

        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        let mut layout = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let len = t.byte_len();
            header.insert(
                name.clone(),
                serde_json::to_value(Entry {
                    byte_len: len as u64,
                    byte_offset: offset as u64,
                    dtype: t.dtype().as_str().to_string(),
                    shape: t.shape().iter().map(|&d| d as u64).collect(),
                })
                .expect("entry serializes"),
            );
            layout.push((offset, t));
            offset = align_up(offset + len);
        }
        let mut meta = self.meta.clone();
        meta.entry("format_version".into())
            .or_insert_with(|| FORMAT_VERSION.into());
        header.insert(META_KEY.into(), serde_json::to_value(&meta).expect("meta serializes"));
        // serde_json::Map is a BTreeMap without the preserve_order feature,
        // so keys come out sorted.
        let mut header_bytes = serde_json::to_vec(&serde_json::Value::Object(header)).expect("header serializes");
        let payload_start = align_up(12 + header_bytes.len());
        header_bytes.resize(payload_start - 12, b' ');

        let payload_len = layout.last().map(|(off, t)| off + t.byte_len()).unwrap_or(0);
        let mut out = Vec::with_capacity(payload_start + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (off, t) in layout {
            out.resize(payload_start + off, 0);
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    /// Parse a `TCK1` image. Every extent is bounds-checked before it is
    /// touched; malformed input yields an error, never a panic.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let have = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(CkptError::Truncated { needed: 12, have });
        }
        if &bytes[..4] != MAGIC {
            return Err(CkptError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        if bytes.len() < 12 {
            return Err(CkptError::Truncated { needed: 12, have });
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let payload_start = header_len
            .checked_add(12)
            .filter(|&end| end <= have)
            .ok_or(CkptError::Truncated {
                needed: header_len.saturating_add(12),
                have,
            })?;
        let header = &bytes[12..payload_start as usize];
        let payload = &bytes[payload_start as usize..];
        let available = payload.len() as u64;

        let value: serde_json::Value =
            serde_json::from_slice(header).map_err(|e| CkptError::HeaderJson(e.to_string()))?;
        let serde_json::Value::Object(map) = value else {
            return Err(CkptError::HeaderJson("top level is not an object".into()));
        };

        let mut ckpt = Checkpoint::new();
        let mut extents: Vec<(u64, u64, String)> = Vec::new();
        for (name, v) in map {
            if name == META_KEY {
                ckpt.meta =
                    serde_json::from_value(v).map_err(|e| CkptError::HeaderJson(format!("bad {META_KEY}: {e}")))?;
                continue;
            }
            if !valid_name(&name) {
                return Err(CkptError::InvalidName(name));
            }
            let entry: Entry = serde_json::from_value(v).map_err(|e| CkptError::InvalidEntry {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            let invalid = |reason: String| CkptError::InvalidEntry {
                name: name.clone(),
                reason,
            };
            let dtype =
                DType::parse(&entry.dtype).ok_or_else(|| invalid(format!("unknown dtype {:?}", entry.dtype)))?;
            let expected = entry
                .shape
                .iter()
                .try_fold(dtype.size_bytes() as u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| invalid("shape overflows".into()))?;
            if expected != entry.byte_len {
                return Err(invalid(format!(
                    "byte_len {} does not match shape {:?} of {}",
                    entry.byte_len, entry.shape, dtype
                )));
            }
            let end = entry.byte_offset.checked_add(entry.byte_len);
            if end.is_none_or(|e| e > available) {
                return Err(CkptError::OutOfBounds {
                    name,
                    offset: entry.byte_offset,
                    len: entry.byte_len,
                    available,
                });
            }
            let (start, end) = (entry.byte_offset as usize, end.unwrap() as usize);
            let shape: Vec<usize> = entry.shape.iter().map(|&d| d as usize).collect();
            debug_assert_eq!(numel(&shape) * dtype.size_bytes(), end - start);
            let tensor =
                Tensor::from_le_bytes(dtype, shape, &payload[start..end]).map_err(|e| invalid(e.to_string()))?;
            extents.push((entry.byte_offset, entry.byte_len, name.clone()));
            ckpt.tensors.insert(name, tensor);
        }

        extents.sort();
        for pair in extents.windows(2) {
            let (a_off, a_len, ref a) = pair[0];
            let (b_off, b_len, ref b) = pair[1];
            if a_len > 0 && b_len > 0 && a_off + a_len > b_off {
                return Err(CkptError::Overlap {
                    first: a.clone(),
                    second: b.clone(),
                });
            }
        }
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// SHA-256 of the canonical serialization (non-finite values allowed).
    pub fn digest(&self) -> String {
        let bytes = self
            .to_bytes(WriteOptions { allow_nonfinite: true })
            .expect("digest of an invalid checkpoint");
        let hash = Sha256::digest(&bytes);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>, opts: WriteOptions) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes(opts)?;
    std::fs::write(path, bytes).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// One line per tensor plus a total, as printed by `ckpt inspect`.
pub fn inspect(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    for (name, t) in &ckpt.tensors {
        out.push_str(&format!(
            "{name}\t{}\t{:?}\t{} bytes\n",
            t.dtype(),
            t.shape(),
            t.byte_len()
        ));
    }
    for (k, v) in &ckpt.meta {
        out.push_str(&format!("meta {k} = {v}\n"));
    }
    out.push_str(&format!(
        "total: {} tensors, {} parameters, {} bytes\n",
        ckpt.len(),
        ckpt.param_count(),
        ckpt.total_bytes()
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "w",
            Tensor::from_f32(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap(),
        );
        c.insert(
            "b",
            Tensor::from_values(DType::BF16, vec![3], &[0.5, 1.5, -2.0]).unwrap(),
        );
        c.insert("ids", Tensor::from_i32(vec![4], vec![1, -2, 3, 4]).unwrap());
        c.insert("d", Tensor::from_f64(vec![], vec![std::f64::consts::PI]).unwrap());
        c.meta.insert("config".into(), "toy".into());
        c
    }

    #[test]
    fn empty_checkpoint_roundtrips() {
        let bytes = Checkpoint::new().to_bytes(WriteOptions::default()).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(bytes.len() % ALIGN, 0);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn f32_scalar_one_payload_bytes() {
        let mut c = Checkpoint::new();
        c.insert("one", Tensor::from_f32(vec![], vec![1.0]).unwrap());
        let bytes = c.to_bytes(WriteOptions::default()).unwrap();
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let start = 12 + header_len;
        assert_eq!(start % ALIGN, 0);
        assert_eq!(&bytes[start..start + 4], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn payloads_are_aligned_and_gaps_zeroed() {
        let bytes = sample().to_bytes(WriteOptions::default()).unwrap();
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        let start = 12 + header_len;
        for (name, e) in header.as_object().unwrap() {
            if name == META_KEY {
                continue;
            }
            let off = e["byte_offset"].as_u64().unwrap() as usize;
            let len = e["byte_len"].as_u64().unwrap() as usize;
            assert_eq!(off % ALIGN, 0, "{name}");
            let pad_end = align_up(off + len).min(bytes.len() - start);
            assert!(bytes[start + off + len..start + pad_end].iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn header_keys_are_sorted() {
        let bytes = sample().to_bytes(WriteOptions::default()).unwrap();
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();
        let pos: Vec<usize> = ["\"__meta__\"", "\"b\"", "\"d\"", "\"ids\"", "\"w\""]
            .iter()
            .map(|k| text.find(k).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{text}");
        assert!(text.find("\"byte_len\"").unwrap() < text.find("\"byte_offset\"").unwrap());
    }

    #[test]
    fn roundtrip_and_write_read_write_identity() {
        let c = sample();
        let first = c.to_bytes(WriteOptions::default()).unwrap();
        let back = Checkpoint::from_bytes(&first).unwrap();
        assert_eq!(back.tensors, c.tensors);
        let second = back.to_bytes(WriteOptions::default()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tck");
        write_checkpoint(&sample(), &path, WriteOptions::default()).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.tensors, sample().tensors);
        assert!(matches!(
            read_checkpoint(dir.path().join("missing.tck")),
            Err(CkptError::Io { .. })
        ));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample().to_bytes(WriteOptions::default()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CkptError::BadMagic { .. })
        ));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = sample().to_bytes(WriteOptions::default()).unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..8]),
            Err(CkptError::Truncated { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..40]),
            Err(CkptError::Truncated { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CkptError::OutOfBounds { .. })
        ));
    }

    fn handmade(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn rejects_offset_past_eof() {
        let bytes = handmade(
            r#"{"x":{"byte_len":4,"byte_offset":64,"dtype":"F32","shape":[1]}}"#,
            &[0; 8],
        );
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CkptError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn rejects_overlap() {
        let bytes = handmade(
            r#"{"x":{"byte_len":8,"byte_offset":0,"dtype":"F32","shape":[2]},"y":{"byte_len":4,"byte_offset":4,"dtype":"F32","shape":[1]}}"#,
            &[0; 8],
        );
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CkptError::Overlap { .. })));
    }

    #[test]
    fn rejects_bad_json_and_bad_entries() {
        let bytes = handmade("{not json", &[]);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CkptError::HeaderJson(_))));
        let bytes = handmade(
            r#"{"x":{"byte_len":4,"byte_offset":0,"dtype":"F16","shape":[1]}}"#,
            &[0; 4],
        );
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CkptError::InvalidEntry { .. })
        ));
        let bytes = handmade(
            r#"{"x":{"byte_len":4,"byte_offset":0,"dtype":"F32","shape":[4294967296,4294967296,16]}}"#,
            &[0; 4],
        );
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CkptError::InvalidEntry { .. })
        ));
    }

    #[test]
    fn refuses_nonfinite_unless_allowed() {
        let mut c = Checkpoint::new();
        c.insert("x", Tensor::from_f32(vec![1], vec![f32::NAN]).unwrap());
        assert!(matches!(
            c.to_bytes(WriteOptions::default()),
            Err(CkptError::NonFinite { .. })
        ));
        let bytes = c.to_bytes(WriteOptions { allow_nonfinite: true }).unwrap();
        assert!(Checkpoint::from_bytes(&bytes).unwrap().tensors["x"].to_f64_vec()[0].is_nan());
    }

    #[test]
    fn rejects_bad_names_and_dangling_meta() {
        let mut c = Checkpoint::new();
        c.insert("bad\nname", Tensor::zeros(DType::F32, vec![1]));
        assert!(matches!(
            c.to_bytes(WriteOptions::default()),
            Err(CkptError::InvalidName(_))
        ));
        let mut c = Checkpoint::new();
        c.insert("", Tensor::zeros(DType::F32, vec![1]));
        assert!(matches!(
            c.to_bytes(WriteOptions::default()),
            Err(CkptError::InvalidName(_))
        ));

        let mut c = Checkpoint::new();
        c.meta.insert(format!("{QUANT_LAYOUT_PREFIX}w"), "x".into());
        c.insert("w.qdata", Tensor::zeros(DType::U8, vec![1]));
        assert!(matches!(
            c.to_bytes(WriteOptions::default()),
            Err(CkptError::UnresolvedMeta { .. })
        ));
        let mut c = Checkpoint::new();
        c.insert("w.qdata", Tensor::zeros(DType::U8, vec![1]));
        c.insert("w.scales", Tensor::zeros(DType::F32, vec![1]));
        assert!(matches!(
            c.to_bytes(WriteOptions::default()),
            Err(CkptError::UnresolvedMeta { .. })
        ));
    }

    proptest! {
        #[test]
        fn random_checkpoints_roundtrip_bit_exactly(
            tensors in proptest::collection::btree_map(
                "[a-z][a-z0-9_.]{0,12}",
                (0usize..4, proptest::collection::vec(any::<u32>(), 0..40)),
                0..6,
            )
        ) {
            let mut c = Checkpoint::new();
            for (name, (kind, raw)) in tensors {
                let n = raw.len();
                let t = match kind {
                    0 => Tensor::from_f32(vec![n], raw.iter().map(|&b| (b as f32) * 1e-3).collect()),
                    1 => Tensor::from_f64(vec![n], raw.iter().map(|&b| (b as f64).sqrt()).collect()),
                    2 => Tensor::from_bf16_bits(vec![n], raw.iter().map(|&b| (b as u16) & 0x7F7F).collect()),
                    _ => Tensor::from_u8(vec![n], raw.iter().map(|&b| b as u8).collect()),
                }.unwrap();
                c.insert(name, t);
            }
            let bytes = c.to_bytes(WriteOptions::default()).unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back.tensors, &c.tensors);
            prop_assert_eq!(back.to_bytes(WriteOptions::default()).unwrap(), bytes);
        }
    }
}
