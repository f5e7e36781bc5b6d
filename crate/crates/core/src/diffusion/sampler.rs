use std::time::{Duration, Instant};

use super::schedule::Schedule;
use super::tns::tns_kappa;
use super::{concat_frames, frame_block, segment_bounds, Condition, Denoiser, DiffusionError};
use crate::numerics::{gaussian, RngStream, Tensor};

/// Tag for a segment's starting noise; step noise uses the level itself.
pub(crate) const INIT_TAG: u64 = u64::MAX;

/// One reverse step per frame given a predicted `x0`. Frames at level 0
/// pass through unchanged and level-1 frames land exactly on `x0_hat`.
/// `noise` is only read for frames above level 1.
pub fn posterior_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: &[usize],
    noise: &Tensor,
    schedule: &Schedule,
) -> Result<Tensor, DiffusionError> {
    if x_t.shape() != x0_hat.shape() || x_t.shape() != noise.shape() {
        return Err(DiffusionError::Shape(format!(
            "x_t {:?}, x0_hat {:?}, noise {:?}",
            x_t.shape(),
            x0_hat.shape(),
            noise.shape()
        )));
    }
    if t.len() != x_t.shape()[0] {
        return Err(DiffusionError::Shape(format!("{} levels for {} frames", t.len(), x_t.shape()[0])));
    }
    if let Some(&bad) = t.iter().find(|&&v| v > schedule.steps()) {
        return Err(DiffusionError::Invalid(format!("level {bad} beyond T = {}", schedule.steps())));
    }
    let row = x_t.len() / t.len();
    let mut out = Vec::with_capacity(x_t.len());
    for (l, &level) in t.iter().enumerate() {
        let r = l * row..(l + 1) * row;
        let (xt, x0, z) = (&x_t.data()[r.clone()], &x0_hat.data()[r.clone()], &noise.data()[r]);
        match level {
            0 => out.extend_from_slice(xt),
            1 => out.extend_from_slice(x0),
            _ => {
                let (c0, ct, var) = schedule.posterior(level);
                let sigma = var.sqrt();
                out.extend(x0.iter().zip(xt).zip(z).map(|((&a, &b), &n)| c0 * a + ct * b + sigma * n));
            }
        }
    }
    Ok(Tensor::new(x_t.shape().to_vec(), out)?)
}

/// Ancestral step `x_t -> x_{t-1}` with fresh noise from `rng`.
pub fn ddpm_step<M: Denoiser + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: &[usize],
    cond: &Condition<'_>,
    offset: usize,
    rng: &mut RngStream,
    schedule: &Schedule,
) -> Result<Tensor, DiffusionError> {
    if t.contains(&0) {
        return Err(DiffusionError::Invalid("cannot step from level 0".into()));
    }
    let x0_hat = model.predict_x0(x_t, t, cond, offset)?;
    let noise = gaussian(rng, x_t.shape());
    posterior_step(x_t, &x0_hat, t, &noise, schedule)
}

/// Result of a full reverse chain.
#[derive(Clone, Debug)]
pub struct Sampled {
    /// `[L, N, 151]`.
    pub x: Tensor,
    pub elapsed: Duration,
    pub model_calls: usize,
}

/// Uniform-level ancestral sampling over the whole sequence. The starting
/// noise is `rng.derive(INIT)`; step `t` draws from `rng.derive(t)`.
pub fn sample_offline<M: Denoiser + ?Sized>(
    model: &M,
    cond: &Condition<'_>,
    dancers: usize,
    channels: usize,
    schedule: &Schedule,
    rng: &RngStream,
) -> Result<Sampled, DiffusionError> {
    let start = Instant::now();
    let len = cond.music.shape()[0];
    let mut x = gaussian(&mut rng.derive(INIT_TAG), &[len, dancers, channels]);
    for t in (1..=schedule.steps()).rev() {
        x = ddpm_step(model, &x, &vec![t; len], cond, 0, &mut rng.derive(t as u64), schedule)?;
    }
    Ok(Sampled { x, elapsed: start.elapsed(), model_calls: schedule.steps() })
}

/// Level of segment `s` at engine clock `c`: `clamp(T + s*kappa - c, 0, T)`.
pub fn clock_level(segment: usize, clock: usize, kappa: usize, steps: usize) -> usize {
    (steps + segment * kappa).saturating_sub(clock).min(steps)
}

/// Starting noise for segment `s`.
pub(crate) fn segment_init(rng: &RngStream, s: usize, shape: &[usize]) -> Tensor {
    gaussian(&mut rng.derive_path(&[s as u64, INIT_TAG]), shape)
}

/// Noise used when segment `s` leaves `level`.
pub(crate) fn segment_noise(rng: &RngStream, s: usize, level: usize, shape: &[usize]) -> Tensor {
    if level <= 1 {
        return Tensor::zeros(shape);
    }
    gaussian(&mut rng.derive_path(&[s as u64, level as u64]), shape)
}

/// Triangular rollout over the whole sequence: segments of `segment_len`
/// frames start `kappa = ceil(T / window)` steps apart, so at most `window`
/// segments are mid-chain at any clock. Noise is keyed per (segment, level)
/// so a streamed run with the same `rng` draws identical values.
pub fn sample_tns<M: Denoiser + ?Sized>(
    model: &M,
    cond: &Condition<'_>,
    dancers: usize,
    channels: usize,
    segment_len: usize,
    window: usize,
    schedule: &Schedule,
    rng: &RngStream,
) -> Result<Sampled, DiffusionError> {
    if segment_len == 0 || window == 0 {
        return Err(DiffusionError::Invalid("segment_len and window must be at least 1".into()));
    }
    let start = Instant::now();
    let len = cond.music.shape()[0];
    let steps = schedule.steps();
    let kappa = tns_kappa(steps, window);
    let bounds = segment_bounds(len, segment_len);
    let mut segs: Vec<Tensor> =
        bounds.iter().enumerate().map(|(s, &(_, n))| segment_init(rng, s, &[n, dancers, channels])).collect();
    let end = (bounds.len() - 1) * kappa + steps;
    let mut calls = 0;
    for clock in 0..end {
        let levels: Vec<usize> = (0..bounds.len()).map(|s| clock_level(s, clock, kappa, steps)).collect();
        let frame_levels: Vec<usize> =
            bounds.iter().zip(&levels).flat_map(|(&(_, n), &lv)| std::iter::repeat(lv).take(n)).collect();
        let x = concat_frames(&segs)?;
        let x0_hat = model.predict_x0(&x, &frame_levels, cond, 0)?;
        calls += 1;
        for (s, &(first, n)) in bounds.iter().enumerate() {
            // Only segments whose level drops this clock move.
            if clock_level(s, clock + 1, kappa, steps) == levels[s] {
                continue;
            }
            let shape = segs[s].shape().to_vec();
            let noise = segment_noise(rng, s, levels[s], &shape);
            segs[s] = posterior_step(&segs[s], &frame_block(&x0_hat, first, n), &vec![levels[s]; n], &noise, schedule)?;
        }
    }
    Ok(Sampled { x: concat_frames(&segs)?, elapsed: start.elapsed(), model_calls: calls })
}
