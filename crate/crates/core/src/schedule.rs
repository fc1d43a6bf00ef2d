//! Noise schedule and the one-step clean-latent estimate.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// Number of discrete timesteps; valid timesteps are `0..=TIMESTEPS`, with
/// `TIMESTEPS` itself being pure noise.
pub const TIMESTEPS: u32 = 1000;

/// `alpha(t)` and `sigma(t)` on integer timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// Flow-matching line: `alpha = 1 - t/1000`, `sigma = t/1000`.
    #[default]
    Linear,
}

impl NoiseSchedule {
    fn check(t: u32) -> Result<f64> {
        if t > TIMESTEPS {
            return Err(Error::arg(format!("timestep {t} outside [0, {TIMESTEPS}]")));
        }
        Ok(f64::from(t) / f64::from(TIMESTEPS))
    }

    pub fn alpha(&self, t: u32) -> Result<f64> {
        match self {
            NoiseSchedule::Linear => Ok(1.0 - Self::check(t)?),
        }
    }

    pub fn sigma(&self, t: u32) -> Result<f64> {
        match self {
            NoiseSchedule::Linear => Self::check(t),
        }
    }
}

/// `z_t = alpha(t) z0 + sigma(t) noise`.
pub fn add_noise(
    schedule: &NoiseSchedule,
    z0: &LatentGrid,
    noise: &LatentGrid,
    t: u32,
) -> Result<LatentGrid> {
    let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
    if !z0.same_shape(noise) {
        return Err(Error::dim("clean latent and noise differ in shape"));
    }
    z0.zip_map(noise, |x, e| (a * f64::from(x) + s * f64::from(e)) as f32)
}

/// `(z_t - sigma(t) eps_hat) / alpha(t)`.
pub fn estimate_clean_from_noise_pred(
    schedule: &NoiseSchedule,
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: u32,
) -> Result<LatentGrid> {
    let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
    if a == 0.0 {
        return Err(Error::SingularSchedule { timestep: t });
    }
    if !z_t.same_shape(eps_hat) {
        return Err(Error::dim("noisy latent and noise prediction differ in shape"));
    }
    z_t.zip_map(eps_hat, |z, e| ((f64::from(z) - s * f64::from(e)) / a) as f32)
}
