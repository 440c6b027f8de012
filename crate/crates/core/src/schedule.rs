//! Noise schedule, forward noising, clean-data recovery, deterministic DDIM
//! updates and the mixed per-layer timestep sampler used in training.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta schedule. `alpha_bar[0] = 1` and `alpha_bar[t] = Π_{s≤t}(1 − β_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Whether the terminal step is close enough to pure noise (`ᾱ_T < 0.05`).
    pub fn terminal_snr_ok(&self) -> bool {
        self.alpha_bar[self.steps()] < 0.05
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Invalid(format!(
                "timestep {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        same_shape(x0, eps)?;
        let ab = self.alpha_bar[t];
        Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
    }

    /// `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
    pub fn predict_x0(&self, x_t: &Tensor, t: usize, eps_pred: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        same_shape(x_t, eps_pred)?;
        let ab = self.alpha_bar[t];
        if ab <= 0.0 {
            return Err(Error::Invalid(format!("alpha_bar is zero at t={t}")));
        }
        let diff = (x_t - eps_pred.affine((1.0 - ab).sqrt(), 0.0)?)?;
        Ok(diff.affine(1.0 / ab.sqrt(), 0.0)?)
    }

    /// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps_pred: &Tensor,
        t: usize,
        t_prev: usize,
    ) -> Result<Tensor> {
        if t <= t_prev {
            return Err(Error::Invalid(format!(
                "ddim step requires t > t_prev, got {t} -> {t_prev}"
            )));
        }
        let x0 = self.predict_x0(x_t, t, eps_pred)?;
        self.ddim_recombine(&x0, eps_pred, t_prev)
    }

    /// Second half of a DDIM update: `√ᾱ_prev·x̂₀ + √(1−ᾱ_prev)·ε̂`. Callers
    /// that overwrite the predicted clean data go through this directly.
    pub fn ddim_recombine(&self, x0: &Tensor, eps_pred: &Tensor, t_prev: usize) -> Result<Tensor> {
        self.check_t(t_prev)?;
        same_shape(x0, eps_pred)?;
        let ab = self.alpha_bar[t_prev];
        if t_prev == 0 {
            return Ok(x0.clone());
        }
        Ok((x0.affine(ab.sqrt(), 0.0)? + eps_pred.affine((1.0 - ab).sqrt(), 0.0)?)?)
    }

    /// Evenly spaced sampling timesteps, descending, ending with 0:
    /// `[T, …, T/steps, 0]` (length `steps + 1`).
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.steps() {
            return Err(Error::Invalid(format!(
                "sampling steps must be in [1, {}], got {steps}",
                self.steps()
            )));
        }
        let total = self.steps();
        Ok((0..=steps)
            .rev()
            .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "tensor shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Per-layer training timesteps, background first, each in `[1, T]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepAssignment(pub Vec<usize>);

impl TimestepAssignment {
    pub fn shared(num_layers: usize, t: usize) -> Self {
        Self(vec![t; num_layers])
    }

    pub fn is_shared(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

/// Which branch of the mixed timestep strategy to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepMode {
    /// Fair coin between shared and independent.
    Mixed,
    Shared,
    Independent,
}

/// Draws per-layer timesteps: with probability one half every layer shares a
/// single uniform `t`, otherwise each layer draws its own.
///
/// Returns the assignment and whether the shared branch was taken.
pub fn draw_timesteps<R: Rng + ?Sized>(
    num_layers: usize,
    total_steps: usize,
    mode: TimestepMode,
    rng: &mut R,
) -> Result<(TimestepAssignment, bool)> {
    if num_layers < 2 {
        return Err(Error::Invalid(format!(
            "timestep draw needs at least 2 layers, got {num_layers}"
        )));
    }
    if total_steps == 0 {
        return Err(Error::Invalid("schedule has no steps".into()));
    }
    let shared = match mode {
        TimestepMode::Mixed => rng.random_bool(0.5),
        TimestepMode::Shared => true,
        TimestepMode::Independent => false,
    };
    let ts = if shared {
        let t = rng.random_range(1..=total_steps);
        vec![t; num_layers]
    } else {
        (0..num_layers)
            .map(|_| rng.random_range(1..=total_steps))
            .collect()
    };
    Ok((TimestepAssignment(ts), shared))
}
