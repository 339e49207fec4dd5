//! Linear variance schedule and the forward noising process
//! `x_t = alpha_t * x_0 + sigma_t * eps`.
//!
//! Index 0 of `alphas`/`sigmas` is the noise-free state, so `t` ranges over
//! `0..=T`. All schedule arithmetic is done in `f64`; the noised vector is
//! cast to `f32` at the feature boundary.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Fresh noise per (seed, sample, timestep).
    Stochastic,
    /// One fixed noise vector per (seed, sample), shared across timesteps.
    #[default]
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x0: Vec<f32>,
    pub xt: Vec<f32>,
    pub t: usize,
    pub epsilon: Vec<f32>,
    pub mode: NoiseMode,
}

impl NoiseSchedule {
    /// Builds `steps` betas linearly spaced over `[beta_min, beta_max]`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let in_unit = |b: f64| b.is_finite() && b > 0.0 && b < 1.0;
        if !in_unit(beta_min) || !in_unit(beta_max) {
            return Err(Error::invalid(format!(
                "beta bounds must lie in (0, 1), got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_min > beta_max {
            return Err(Error::invalid(format!(
                "beta_min {beta_min} exceeds beta_max {beta_max}"
            )));
        }

        let betas: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            let span = beta_max - beta_min;
            (0..steps)
                .map(|i| beta_min + span * i as f64 / (steps - 1) as f64)
                .collect()
        };

        let mut alphas = Vec::with_capacity(steps + 1);
        let mut sigmas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        sigmas.push(0.0);
        let mut alpha_bar = 1.0f64;
        for &beta in &betas {
            alpha_bar *= 1.0 - beta;
            alphas.push(alpha_bar.sqrt());
            // 1 - alpha_bar directly, rather than 1 - alpha^2, avoids one rounding.
            sigmas.push((1.0 - alpha_bar).sqrt());
        }

        Ok(Self {
            steps,
            beta_min,
            beta_max,
            betas,
            alphas,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    /// `betas[i]` is the variance rate of step `i + 1`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t.to_string(),
                allowed: format!("[0, {}]", self.steps),
            });
        }
        Ok(())
    }

    /// Noise vector for one sample. Deterministic mode ignores `t`.
    pub fn epsilon(&self, dim: usize, t: usize, mode: NoiseMode, seed: u64, sample_id: u64) -> Vec<f32> {
        let mut stream = match mode {
            NoiseMode::Deterministic => rng::keyed(rng::domain::NOISE_DETERMINISTIC, seed, &[sample_id]),
            NoiseMode::Stochastic => {
                rng::keyed(rng::domain::NOISE_STOCHASTIC, seed, &[sample_id, t as u64])
            }
        };
        (0..dim)
            .map(|_| stream.sample::<f64, _>(StandardNormal) as f32)
            .collect()
    }

    /// Applies the forward process with a caller-supplied noise vector.
    pub fn apply(&self, x0: &[f32], t: usize, epsilon: &[f32]) -> Result<Vec<f32>> {
        self.check_step(t)?;
        if x0.len() != epsilon.len() {
            return Err(Error::shape(format!(
                "x0 has {} entries but epsilon has {}",
                x0.len(),
                epsilon.len()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("x0"));
        }
        let (a, s) = (self.alphas[t], self.sigmas[t]);
        Ok(x0
            .iter()
            .zip(epsilon)
            .map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32)
            .collect())
    }

    /// Noises `x0` to step `t`.
    pub fn noise(
        &self,
        x0: &[f32],
        t: usize,
        mode: NoiseMode,
        seed: u64,
        sample_id: u64,
    ) -> Result<NoisedSample> {
        self.check_step(t)?;
        let epsilon = self.epsilon(x0.len(), t, mode, seed, sample_id);
        let xt = self.apply(x0, t, &epsilon)?;
        Ok(NoisedSample {
            x0: x0.to_vec(),
            xt,
            t,
            epsilon,
            mode,
        })
    }
}

/// Maps continuous time `u in [0, 1]` onto a discrete step, `round(u * T)`
/// with halves rounded away from zero.
pub fn continuous_to_step(u: f64, steps: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::OutOfRange {
            what: "continuous time",
            value: u.to_string(),
            allowed: "[0, 1]".into(),
        });
    }
    let scaled = u * steps as f64;
    // u*T is often a hair below an exact half (0.0305 * 1000 = 30.499999...),
    // so snap values within a few ulps of .5 before rounding.
    let floor = scaled.floor();
    let frac = scaled - floor;
    let step = if (frac - 0.5).abs() <= 1e-9 * scaled.max(1.0) {
        floor + 1.0
    } else {
        scaled.round()
    };
    Ok((step as usize).min(steps))
}

/// Continuous time represented by discrete step `t`.
pub fn step_to_continuous(t: usize, steps: usize) -> f64 {
    t as f64 / steps as f64
}
