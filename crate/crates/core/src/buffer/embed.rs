use std::hash::Hasher;

use fnv::FnvHasher;

use crate::corpus::Interaction;
use crate::lm::words;
use crate::scalar::Real;

/// Maps text to a fixed-dimension vector for clustering.
pub trait Embedder<T>: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<T>;

    fn embed_interaction(&self, it: &Interaction) -> Vec<T> {
        self.embed(&it.joined_text())
    }
}

/// Bag-of-words term frequencies hashed into `dim` buckets, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedTfEmbedder {
    pub dim: usize,
}

impl Default for HashedTfEmbedder {
    fn default() -> Self {
        HashedTfEmbedder { dim: 256 }
    }
}

fn bucket(word: &str, dim: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(word.as_bytes());
    (h.finish() % dim as u64) as usize
}

impl<T: Real> Embedder<T> for HashedTfEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        for w in words(text) {
            v[bucket(&w, self.dim)] += T::one();
        }
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > T::zero() {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}
