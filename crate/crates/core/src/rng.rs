//! Seeded randomness.
//!
//! Every stochastic site in a run owns an [`Rng`] seeded from
//! [`derive_seed`], so results never depend on the order in which sites are
//! visited or on how work is spread across threads.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{invalid, Result};

/// A single-owner seeded generator (ChaCha8, platform independent).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let dist = Gamma::new(shape, 1.0)
            .map_err(|e| invalid(format!("gamma shape {shape}: {e}")))?;
        Ok(dist.sample(&mut self.inner))
    }

    /// One draw from the symmetric Dirichlet `Dir(concentration · 1_k)`.
    pub fn dirichlet(&mut self, concentration: f64, k: usize) -> Result<Vec<f64>> {
        if concentration <= 0.0 || !concentration.is_finite() {
            return Err(invalid(format!("dirichlet concentration {concentration} must be > 0")));
        }
        loop {
            let mut draws = (0..k)
                .map(|_| self.gamma(concentration))
                .collect::<Result<Vec<_>>>()?;
            let total: f64 = draws.iter().sum();
            // All-zero draws underflow at tiny concentrations; redraw.
            if total > 0.0 && total.is_finite() {
                draws.iter_mut().for_each(|d| *d /= total);
                return Ok(draws);
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..n`, uniformly, in draw order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, amount).into_vec()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `(master_seed, site, round, client)` into a seed for one
/// stochastic site.
pub fn derive_seed(master_seed: u64, site: &str, round: u64, client: u64) -> u64 {
    // FNV-1a over the tag keeps site names stable across builds.
    let tag = site
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
    let mut h = splitmix64(master_seed);
    for part in [tag, round, client] {
        h = splitmix64(h ^ part);
    }
    h
}

/// Convenience wrapper: a fresh [`Rng`] for one site.
pub fn site_rng(master_seed: u64, site: &str, round: u64, client: u64) -> Rng {
    Rng::seed_from(derive_seed(master_seed, site, round, client))
}
