//! Euler-Maruyama propagation and reproducible per-stream random numbers.
//!
//! Every stochastic component of the library draws its noise from an
//! [`RngStream`] keyed by `(seed, stream_id)`. Stream ids are packed
//! injectively from a purpose tag, a step index and a sample index, so
//! parallel execution order never changes results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::StateModel;

/// A purpose tag for deriving independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    InitCloud = 0,
    Propagate = 1,
    Predict = 2,
    CenterSelect = 3,
    Sgd = 4,
    Resample = 5,
    Truth = 6,
    Observation = 7,
    ApfAux = 8,
    ApfResample = 9,
    ApfPropagate = 10,
    EnkfForecast = 11,
    EnkfPerturb = 12,
    Band = 13,
}

/// Packs (purpose, step, index) into a single stream id.
///
/// Layout: purpose in the top 8 bits, step in the next 24, index in the low
/// 32, so the mapping is injective for step < 2^24 and index < 2^32.
pub fn stream_id(purpose: Purpose, step: u64, index: u64) -> u64 {
    debug_assert!(step < (1 << 24));
    debug_assert!(index < (1 << 32));
    ((purpose as u64) << 56) | ((step & 0xff_ffff) << 32) | (index & 0xffff_ffff)
}

/// SplitMix64 step; used to derive child seeds from a base seed and a label.
pub fn derive_seed(base: u64, label: u64) -> u64 {
    let mut z = base ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A counter-based Gaussian/uniform source with reproducible streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { rng }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// One forward Euler-Maruyama step: `x + b(x) dt + sigma * sqrt(dt) * w`.
pub fn euler_forward(
    model: &StateModel,
    x: &[f64],
    dt: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    euler_step(model, x, dt, 1.0, rng)
}

/// One time-inverse Euler-Maruyama step: `x - b(x) dt + sigma * sqrt(dt) * w`.
pub fn euler_time_inverse(
    model: &StateModel,
    x: &[f64],
    dt: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    euler_step(model, x, dt, -1.0, rng)
}

fn euler_step(
    model: &StateModel,
    x: &[f64],
    dt: f64,
    drift_sign: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    debug_assert!(dt > 0.0);
    let b = model.drift(x)?;
    let sqrt_dt = dt.sqrt();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let w: f64 = rng.standard_normal();
        let xi = x[i] + drift_sign * b[i] * dt + model.sigma[i] * sqrt_dt * w;
        if !xi.is_finite() {
            return Err(Error::NonFinite {
                context: format!("euler step of model '{}'", model.name),
            });
        }
        out.push(xi);
    }
    Ok(out)
}
