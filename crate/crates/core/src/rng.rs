//! Counter-based gaussian streams.
//!
//! Every draw is addressed by `(seed, path, role, sub, step)`, so a path can be
//! replayed in isolation and the ensemble output does not depend on how paths
//! are scheduled across workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Which sub-process consumes a stream. Temporal noise is kept apart from the
/// spatial noise so the `(t, tdot)` path does not depend on whether the spatial
/// part is simulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamRole {
    Temporal = 1,
    Spatial = 2,
    Base = 3,
    Frame = 4,
    Theta = 5,
    Sampling = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub path: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, path: u64) -> Self {
        NoiseKey { seed, path }
    }

    /// Generator positioned at the start of block `(role, sub, step)`.
    pub fn rng(&self, role: StreamRole, sub: u64, step: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.path.to_le_bytes());
        key[16..24].copy_from_slice(&(role as u64).to_le_bytes());
        key[24..32].copy_from_slice(&sub.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(step);
        rng
    }

    pub fn fill(&self, role: StreamRole, sub: u64, step: u64, out: &mut [f64]) {
        let mut rng = self.rng(role, sub, step);
        for o in out.iter_mut() {
            *o = rng.sample(StandardNormal);
        }
    }

    pub fn gaussians(&self, role: StreamRole, sub: u64, step: u64, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill(role, sub, step, &mut v);
        v
    }
}
