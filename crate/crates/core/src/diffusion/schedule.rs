//! DDPM noise schedule and the forward noising process.

use crate::numerics::{Result, Rng, TensorError};

/// Linear β schedule; index 0 is the clean image (`ᾱ_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    /// `betas[t]` for `t` in `1..=steps`; `betas[0] = 0`.
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// β runs linearly from `1e-4` to `0.02`, both scaled by `1000/steps` so
    /// short schedules still end near pure noise.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(TensorError::Config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(0.999));
        let mut betas = vec![0.0];
        let mut alpha_bars = vec![1.0];
        for t in 1..=steps {
            let beta = lo + (hi - lo) * (t - 1) as f64 / (steps - 1) as f64;
            betas.push(beta);
            alpha_bars.push(alpha_bars[t - 1] * (1.0 - beta));
        }
        Ok(DiffusionSchedule { steps, betas, alpha_bars })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(TensorError::invalid("diffusion", format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` with fresh `ε`; returns `(x_t, ε)`.
    pub fn add_noise(&self, x0: &[f64], t: usize, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(t)?;
        let eps = rng.normals(x0.len(), 1.0);
        Ok((noised(x0, &eps, self.alpha_bars[t]), eps))
    }

    /// One ancestral step from `x_t` given the predicted noise: the clipped
    /// clean estimate feeds the posterior mean, and `z` (ignored at `t = 1`)
    /// scales with the posterior standard deviation.
    pub fn reverse_step(&self, x_t: &[f64], eps: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let beta = self.betas[t];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        Ok(x_t
            .iter()
            .zip(eps)
            .zip(z)
            .map(|((&x, &e), &n)| {
                let x0 = ((x - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
                let mean = c0 * x0 + ct * x;
                if t > 1 {
                    mean + sigma * n
                } else {
                    mean
                }
            })
            .collect())
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε`.
pub fn noised(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}
