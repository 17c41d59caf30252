//! Seeded feature hashing of free text into fixed-width blocks.

use serde::{Deserialize, Serialize};

/// Hashes whitespace tokens into `dims` signed buckets and L2-normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHasher {
    pub dims: usize,
    pub seed: u64,
}

impl FeatureHasher {
    pub fn new(dims: usize, seed: u64) -> Self {
        FeatureHasher { dims, seed }
    }

    fn token_hash(&self, token: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for b in token.bytes() {
            h ^= u64::from(b.to_ascii_lowercase());
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= h >> 29;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^ (h >> 32)
    }

    /// Write the hashed features of `text` into `out` (length `dims`).
    pub fn encode_into(&self, text: &str, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dims);
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.dims == 0 {
            return;
        }
        for token in text.split_whitespace() {
            let token = token.trim_matches(|c: char| c.is_ascii_punctuation() && c != '%');
            if token.is_empty() {
                continue;
            }
            let h = self.token_hash(token);
            let idx = (h % self.dims as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            out[idx] += sign;
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dims];
        self.encode_into(text, &mut out);
        out
    }

    /// Mean of the hashed features of several texts; zeros when empty.
    pub fn pooled<'a, I>(&self, texts: I) -> Vec<f64>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut acc = vec![0.0; self.dims];
        let mut buf = vec![0.0; self.dims];
        let mut n = 0usize;
        for t in texts {
            self.encode_into(t, &mut buf);
            acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_hashes_to_zeros() {
        let h = FeatureHasher::new(16, 3);
        assert!(h.encode("").iter().all(|v| *v == 0.0));
        assert!(h.encode("   ").iter().all(|v| *v == 0.0));
        assert!(h.pooled(std::iter::empty()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hashing_is_deterministic_and_seeded() {
        let a = FeatureHasher::new(32, 1).encode("Top state: positive 70%.");
        let b = FeatureHasher::new(32, 1).encode("Top state: positive 70%.");
        let c = FeatureHasher::new(32, 2).encode("Top state: positive 70%.");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let norm: f64 = a.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_is_order_invariant() {
        let h = FeatureHasher::new(16, 9);
        let a = h.pooled(["likes sports", "reads news", "quiet"]);
        let b = h.pooled(["quiet", "likes sports", "reads news"]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
