use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::numerics::Tensor;

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, DiffusionError> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(DiffusionError::Invalid(format!("unknown schedule {other:?} (linear or cosine)"))),
        }
    }
}

/// Noise schedule over steps `1..=T`; index 0 is the clean endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<Schedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Invalid("schedule needs at least one step".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                LINEAR_BETA_START + f * (LINEAR_BETA_END - LINEAR_BETA_START)
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                (((t as f64 / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos().powi(2)
            };
            (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-12, COSINE_MAX_BETA)).collect()
        }
    };
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
    }
    Ok(Schedule { kind, betas, alpha_bars })
}

impl Schedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T` (`alpha_bar_0 = 1`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior `q(x_{t-1} | x_t, x_0)`: coefficients on `x_0`, on `x_t`,
    /// and the variance.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, ab_prev, beta) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        (c0, ct, var)
    }
}

/// `sqrt(ab) x0 + sqrt(1 - ab) noise` for an explicit `alpha_bar`.
pub fn q_sample_with_alpha_bar(x0: &Tensor, alpha_bar: f64, noise: &Tensor) -> Result<Tensor, DiffusionError> {
    if x0.shape() != noise.shape() {
        return Err(DiffusionError::Shape(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(DiffusionError::Invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(&x, &n)| a * x + s * n).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data).expect("same shape"))
}

/// Forward noising to step `t` (`t = 0` returns `x0`).
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &Schedule) -> Result<Tensor, DiffusionError> {
    if t > schedule.steps() {
        return Err(DiffusionError::Invalid(format!("step {t} beyond T = {}", schedule.steps())));
    }
    q_sample_with_alpha_bar(x0, schedule.alpha_bar(t), noise)
}
