//! Seeded random streams.
//!
//! Every consumer of randomness asks the run-level [`Rng`] for a named
//! stream. Streams are ChaCha8 generators keyed by the run seed and a stable
//! hash of the stream name, so two components never share state and adding a
//! new component does not perturb the others.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Run-level seed from which named streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for the component called `name`.
    pub fn stream(&self, name: &str) -> Stream {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(fnv1a(name.as_bytes()));
        Stream { inner }
    }

    /// Child seed namespace, e.g. one per fold.
    pub fn derive(&self, name: &str) -> Rng {
        let mut s = self.stream(name);
        Rng { seed: s.next_u64() }
    }
}

/// FNV-1a, used only to map stream names to ChaCha stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, written out so the permutation does not depend on
        // the rand crate's internal choice of algorithm.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Gamma(shape, 1) variate via Marsaglia-Tsang.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let u = self.uniform().max(f64::MIN_POSITIVE);
            return self.gamma(shape + 1.0) * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = self.uniform();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    pub fn dirichlet(&mut self, alpha: &[f64]) -> Vec<f64> {
        let draws: Vec<f64> = alpha.iter().map(|&a| self.gamma(a)).collect();
        let total: f64 = draws.iter().sum();
        draws.into_iter().map(|g| g / total).collect()
    }

    pub fn as_rng_core(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
