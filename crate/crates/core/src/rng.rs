//! Splittable counter-based random numbers.
//!
//! Every random value is a pure function of `(key, counter)`, so parameter
//! initialisation, dropout masks and data order never depend on call order or
//! platform. The algorithm, for reimplementation elsewhere:
//!
//! ```text
//! mix(z):   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!           z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!           z ^ (z >> 31)                               (all wrapping u64)
//! fnv(s):   FNV-1a 64 over the UTF-8 bytes of s
//! key(seed, name)       = mix(seed ^ mix(fnv(name)))
//! child(key, name)      = mix(key ^ mix(fnv(name)))
//! bits(key, i)          = mix(key + (i + 1) * 0x9E3779B97F4A7C15)
//! uniform(key, i)       = (bits(key, i) >> 11) * 2^-53          in [0, 1)
//! normal(key, i)        = sqrt(-2 ln(1 - u0)) * cos(2π u1),
//!                         u0 = uniform(key, 2i), u1 = uniform(key, 2i + 1)
//! ```
//!
//! `ln`, `cos` and `sqrt` come from the pure-Rust `libm` port so normals are
//! bit-identical across targets.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A keyed stream of random values addressed by counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64, name: &str) -> Self {
        Self {
            key: mix64(seed ^ mix64(fnv1a64(name))),
        }
    }

    /// Derive an independent named sub-stream.
    pub fn child(&self, name: &str) -> Self {
        Self {
            key: mix64(self.key ^ mix64(fnv1a64(name))),
        }
    }

    pub fn child_index(&self, index: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(index.wrapping_add(GOLDEN))),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn bits(&self, i: u64) -> u64 {
        mix64(self.key.wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn uniform(&self, i: u64) -> f64 {
        (self.bits(i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on counters `2i` and `2i + 1`.
    pub fn normal(&self, i: u64) -> f64 {
        let u0 = self.uniform(2 * i);
        let u1 = self.uniform(2 * i + 1);
        libm::sqrt(-2.0 * libm::log(1.0 - u0)) * libm::cos(2.0 * std::f64::consts::PI * u1)
    }

    pub fn normals(&self, n: usize, std: f64) -> Vec<f64> {
        (0..n as u64).map(|i| self.normal(i) * std).collect()
    }

    /// Sequential cursor over this stream.
    pub fn cursor(&self) -> Cursor {
        Cursor { stream: *self, next: 0 }
    }
}

/// Stateful convenience wrapper that walks a [`Stream`]'s counters in order.
#[derive(Debug, Clone)]
pub struct Cursor {
    stream: Stream,
    next: u64,
}

impl Cursor {
    pub fn next_u64(&mut self) -> u64 {
        let v = self.stream.bits(self.next);
        self.next += 1;
        v
    }

    pub fn uniform(&mut self) -> f64 {
        let v = self.stream.uniform(self.next);
        self.next += 1;
        v
    }

    /// Integer in `[0, n)` by multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen test vectors. Any change here breaks checkpoint reproducibility.
    #[test]
    fn test_vectors() {
        assert_eq!(mix64(0), 0);
        assert_eq!(mix64(1), 0x5692_161D_100B_05E5);
        assert_eq!(fnv1a64(""), 0xCBF2_9CE4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xAF63_DC4C_8601_EC8C);
        let s = Stream::new(0, "embed_tokens");
        assert_eq!(s.key(), STREAM_KEY);
        assert_eq!(s.bits(0), STREAM_BITS0);
        assert_eq!(s.normal(0).to_bits(), STREAM_NORMAL0);
    }

    const STREAM_KEY: u64 = 0x5ac3_9931_b084_4889;
    const STREAM_BITS0: u64 = 0x89cf_c954_fd9c_6b6e;
    const STREAM_NORMAL0: u64 = 0xbff2_c60b_5bf7_2bb1;

    #[test]
    fn uniform_in_unit_interval_and_normals_are_standard() {
        let s = Stream::new(7, "x");
        let n = 20_000;
        let us: Vec<f64> = (0..n).map(|i| s.uniform(i)).collect();
        assert!(us.iter().all(|&u| (0.0..1.0).contains(&u)));
        let zs = s.normals(n as usize, 1.0);
        let mean = zs.iter().sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn children_are_independent_of_order() {
        let root = Stream::new(1, "root");
        let a = root.child("a");
        let b = root.child("b");
        assert_ne!(a.key(), b.key());
        assert_eq!(root.child("a"), a);
        assert_ne!(root.child_index(0), root.child_index(1));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        Stream::new(3, "shuffle").cursor().shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
