//! Segment-wise triangular noise levels.

use super::schedule::{q_sample_with_alpha_bar, Schedule};
use super::{frame_block, segment_bounds, DiffusionError};
use crate::numerics::{gaussian, RngStream, Tensor};

/// Per-segment diffusion levels for one phase of the staircase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoisePlan {
    pub segments: usize,
    pub segment_len: usize,
    pub phase: usize,
    /// Level offset between neighbouring segments, `ceil(T / S)`.
    pub kappa: usize,
    pub levels: Vec<usize>,
}

/// `ceil(T / S)`.
pub fn tns_kappa(steps: usize, segments: usize) -> usize {
    steps.div_ceil(segments)
}

/// Largest valid phase, at which every segment sits at level `T`.
pub fn max_phase(steps: usize, segments: usize) -> usize {
    steps + (segments - 1) * tns_kappa(steps, segments)
}

/// Levels `clamp(p - (S - 1 - s) * kappa, 0, T)` for `s in 0..S`.
pub fn tns_levels(
    phase: usize,
    segments: usize,
    steps: usize,
    segment_len: usize,
) -> Result<NoisePlan, DiffusionError> {
    if segments == 0 || steps == 0 || segment_len == 0 {
        return Err(DiffusionError::Invalid("segments, steps and segment_len must be at least 1".into()));
    }
    let top = max_phase(steps, segments);
    if phase > top {
        return Err(DiffusionError::Invalid(format!("phase {phase} outside 0..={top}")));
    }
    let kappa = tns_kappa(steps, segments);
    let levels = (0..segments).map(|s| phase.saturating_sub((segments - 1 - s) * kappa).min(steps)).collect();
    Ok(NoisePlan { segments, segment_len, phase, kappa, levels })
}

impl NoisePlan {
    /// Level of every frame in a sequence of `len` frames.
    pub fn frame_levels(&self, len: usize) -> Result<Vec<usize>, DiffusionError> {
        let bounds = self.bounds(len)?;
        Ok(bounds.iter().zip(&self.levels).flat_map(|(&(_, n), &lv)| std::iter::repeat(lv).take(n)).collect())
    }

    fn bounds(&self, len: usize) -> Result<Vec<(usize, usize)>, DiffusionError> {
        let bounds = segment_bounds(len, self.segment_len);
        if bounds.len() != self.segments {
            return Err(DiffusionError::Shape(format!(
                "{len} frames make {} segments of {}, plan has {}",
                bounds.len(),
                self.segment_len,
                self.segments
            )));
        }
        Ok(bounds)
    }
}

/// Noise each segment of `x0: [L, ...]` to its planned level. Segment `s`
/// draws its noise from `rng.derive(s)`; returns the noised tensor and the
/// noise (zero on level-0 segments).
pub fn tns_noise(
    x0: &Tensor,
    plan: &NoisePlan,
    schedule: &Schedule,
    rng: &RngStream,
) -> Result<(Tensor, Tensor), DiffusionError> {
    if plan.levels.iter().any(|&t| t > schedule.steps()) {
        return Err(DiffusionError::Invalid(format!("plan levels exceed T = {}", schedule.steps())));
    }
    let bounds = plan.bounds(x0.shape()[0])?;
    let mut out = Vec::with_capacity(x0.len());
    let mut noise_out = Vec::with_capacity(x0.len());
    for (s, (&(start, len), &level)) in bounds.iter().zip(&plan.levels).enumerate() {
        let seg = frame_block(x0, start, len);
        if level == 0 {
            out.extend_from_slice(seg.data());
            noise_out.extend(std::iter::repeat(0.0).take(seg.len()));
            continue;
        }
        let noise = gaussian(&mut rng.derive(s as u64), seg.shape());
        let noised = q_sample_with_alpha_bar(&seg, schedule.alpha_bar(level), &noise)?;
        out.extend_from_slice(noised.data());
        noise_out.extend_from_slice(noise.data());
    }
    Ok((Tensor::new(x0.shape().to_vec(), out)?, Tensor::new(x0.shape().to_vec(), noise_out)?))
}
