//! Keyed random streams.
//!
//! Every stochastic draw is addressed by `(run seed, purpose, step, index)`.
//! The key is mixed into a ChaCha8 seed, so a draw never depends on how many
//! other draws happened before it. Checkpoint replay and cross-run
//! determinism both rely on this.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::real::Real;
use crate::tensor::Tensor;

/// What a draw is for. Discriminants are part of the reproducibility
/// contract and must not be renumbered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    InitialLatent = 1,
    ReflTruncate = 2,
    LvNoise = 3,
    PretrainNoise = 4,
    PretrainTimestep = 5,
    ContextDropout = 6,
    PromptSample = 7,
    Dataset = 8,
    ParamInit = 9,
    AncestralNoise = 10,
    EvalLatent = 11,
    Minibatch = 12,
    Probe = 13,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub step: u64,
    pub index: u64,
}

impl RngKey {
    pub fn new(seed: u64, purpose: Purpose, step: u64, index: u64) -> Self {
        RngKey {
            seed,
            purpose,
            step,
            index,
        }
    }

    pub fn stream(&self) -> ChaCha8Rng {
        let mut words = [0u64; 4];
        let mut h = splitmix(self.seed);
        h = splitmix(h ^ self.purpose as u64);
        h = splitmix(h ^ self.step);
        h = splitmix(h ^ self.index);
        for (i, w) in words.iter_mut().enumerate() {
            h = splitmix(h ^ (i as u64));
            *w = h;
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// Seed plus helpers for the common draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KeyedRng {
    pub seed: u64,
}

impl KeyedRng {
    pub fn new(seed: u64) -> Self {
        KeyedRng { seed }
    }

    pub fn stream(&self, purpose: Purpose, step: u64, index: u64) -> ChaCha8Rng {
        RngKey::new(self.seed, purpose, step, index).stream()
    }

    /// Standard normal tensor. Draws are made at 64-bit and rounded, so the
    /// two precisions see the same noise up to representation.
    pub fn normal<R: Real>(&self, shape: &[usize], purpose: Purpose, step: u64, index: u64) -> Tensor<R> {
        let mut rng = self.stream(purpose, step, index);
        normal_tensor(shape, &mut rng)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_in(&self, lo: u64, hi: u64, purpose: Purpose, step: u64, index: u64) -> u64 {
        self.stream(purpose, step, index).random_range(lo..=hi)
    }

    pub fn uniform(&self, purpose: Purpose, step: u64, index: u64) -> f64 {
        self.stream(purpose, step, index).random::<f64>()
    }
}

pub fn normal_tensor<R: Real, G: Rng>(shape: &[usize], rng: &mut G) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| R::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and data agree by construction")
}
