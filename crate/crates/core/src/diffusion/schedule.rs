use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Variance schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    /// Linear in `sqrt(beta)`, as used by latent diffusion checkpoints.
    #[serde(rename = "scaled_linear")]
    ScaledLinear,
}

/// Parameters that rebuild a [`NoiseSchedule`]; this is what checkpoints store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
            ddim_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        make_noise_schedule(
            self.train_timesteps,
            self.beta_start,
            self.beta_end,
            self.kind,
            self.ddim_steps,
        )
    }
}

/// Cumulative signal fractions `alpha_bar[0..=T]` plus the DDIM timestep
/// subsequence used for sampling and inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    alpha_bar: Vec<T>,
    ddim_steps: Vec<usize>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Validates `1 = a[0] > a[1] > ... > a[T] > 0` and a strictly
    /// increasing step list within `1..=T`.
    pub fn from_alpha_bar(alpha_bar: Vec<T>, ddim_steps: Vec<usize>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != T::one() {
            return Err(Error::InvalidArgument(
                "alpha_bar needs at least two entries and alpha_bar[0] = 1".into(),
            ));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || !(alpha_bar[alpha_bar.len() - 1] > T::zero()) {
            return Err(Error::InvalidArgument("alpha_bar must be strictly decreasing in (0, 1]".into()));
        }
        let t_max = alpha_bar.len() - 1;
        if ddim_steps.is_empty()
            || ddim_steps[0] == 0
            || ddim_steps.windows(2).any(|w| w[1] <= w[0])
            || *ddim_steps.last().unwrap() > t_max
        {
            return Err(Error::InvalidArgument(format!(
                "ddim steps must be strictly increasing within 1..={t_max}"
            )));
        }
        Ok(Self { alpha_bar, ddim_steps })
    }

    pub fn train_timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[T] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<T> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::Timestep(format!("timestep {t} outside 0..={}", self.train_timesteps()))
        })
    }

    /// Increasing timesteps `tau_1 < ... < tau_S`; `tau_0 = 0` is implicit.
    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim_steps
    }

    /// Same `alpha_bar`, different step count.
    pub fn with_ddim_steps(&self, steps: usize) -> Result<Self> {
        Self::from_alpha_bar(self.alpha_bar.clone(), even_steps(self.train_timesteps(), steps)?)
    }
}

fn even_steps(t_train: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > t_train {
        return Err(Error::InvalidArgument(format!(
            "ddim step count must be in 1..={t_train}, got {s}"
        )));
    }
    Ok((0..s).map(|i| i * t_train / s + 1).collect())
}

/// Linear betas from `beta_start` to `beta_end`, `alpha_bar[t] = prod_{i<=t} (1 - beta_i)`,
/// and `S` evenly spaced DDIM timesteps `1, 1 + T/S, 1 + 2T/S, ...`.
///
/// Starting at 1 keeps the last sampling step, and the first inversion
/// step, at the lowest noise level.
pub fn make_noise_schedule<T: Scalar>(
    train_timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
    ddim_steps: usize,
) -> Result<NoiseSchedule<T>> {
    if train_timesteps == 0 {
        return Err(Error::InvalidArgument("train_timesteps must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let steps = even_steps(train_timesteps, ddim_steps)?;
    let frac = |i: usize| if train_timesteps == 1 { 0.0 } else { i as f64 / (train_timesteps - 1) as f64 };
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..train_timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * frac(i))
            .collect(),
        ScheduleKind::ScaledLinear => {
            let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
            (0..train_timesteps).map(|i| (a + (b - a) * frac(i)).powi(2)).collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(train_timesteps + 1);
    let mut acc = 1.0f64;
    alpha_bar.push(T::one());
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(T::of(acc));
    }
    NoiseSchedule::from_alpha_bar(alpha_bar, steps)
}
