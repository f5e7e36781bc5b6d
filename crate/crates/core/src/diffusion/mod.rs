//! Diffusion schedules, forward noising, triangular segment levels and the
//! reverse samplers (uniform, triangular rollout, streaming).
//!
//! Denoisers predict the clean sample `x0` directly.

mod sampler;
mod schedule;
mod stream;
mod tns;

pub use sampler::{clock_level, ddpm_step, posterior_step, sample_offline, sample_tns, Sampled};
pub use schedule::{make_schedule, q_sample, q_sample_with_alpha_bar, Schedule, ScheduleKind};
pub use stream::{stream_generate, Emitted, StreamConfig, StreamEngine};
pub use tns::{max_phase, tns_kappa, tns_levels, tns_noise, NoisePlan};

use crate::numerics::{NumericsError, Tensor};
use crate::temporal::SwapCode;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffusionError {
    #[error("diffusion: {0}")]
    Invalid(String),
    #[error("diffusion shape: {0}")]
    Shape(String),
    #[error("denoiser: {0}")]
    Model(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Conditioning for the frames handed to a denoiser.
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    /// `[L, d_m]`, aligned with the motion frames.
    pub music: &'a Tensor,
    pub swap: &'a SwapCode,
}

/// Predicts `x0` from `x_t: [L, N, C]` with per-frame levels. `offset` is
/// the absolute index of frame 0 within the whole sequence.
pub trait Denoiser {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cond: &Condition<'_>,
        offset: usize,
    ) -> Result<Tensor, DiffusionError>;
}

/// Returns the stored clean sequence; a perfect predictor for tests and
/// sampler validation.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub x0: Tensor,
}

impl Denoiser for OracleDenoiser {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        _t: &[usize],
        _cond: &Condition<'_>,
        offset: usize,
    ) -> Result<Tensor, DiffusionError> {
        let len = x_t.shape()[0];
        if offset + len > self.x0.shape()[0] || x_t.shape()[1..] != self.x0.shape()[1..] {
            return Err(DiffusionError::Model(format!(
                "oracle holds {:?}, asked for {:?} at frame {offset}",
                self.x0.shape(),
                x_t.shape()
            )));
        }
        Ok(frame_block(&self.x0, offset, len))
    }
}

/// `(start, len)` of each segment; the last one may be short.
pub fn segment_bounds(len: usize, segment_len: usize) -> Vec<(usize, usize)> {
    (0..len).step_by(segment_len.max(1)).map(|s| (s, segment_len.min(len - s))).collect()
}

/// Frames `start..start+len` along axis 0.
pub(crate) fn frame_block(x: &Tensor, start: usize, len: usize) -> Tensor {
    let row = x.len() / x.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Tensor::from_parts(shape, x.data()[start * row..(start + len) * row].to_vec())
}

/// Concatenate along axis 0.
pub(crate) fn concat_frames(parts: &[Tensor]) -> Result<Tensor, DiffusionError> {
    let first = parts.first().ok_or_else(|| DiffusionError::Invalid("no frames to concatenate".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.shape()[1..] != first.shape()[1..] {
            return Err(DiffusionError::Shape(format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        shape[0] += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(shape, data)?)
}
