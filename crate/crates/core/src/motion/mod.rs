//! Pose representation, kinematics and motion/music containers.
//!
//! Coordinates are z-up; the ground plane is (x, y). A pose packs 24 joint
//! rotations in the 6D representation, four foot-contact probabilities and
//! the root translation into 151 channels:
//!
//! | channels  | content                                        |
//! |-----------|------------------------------------------------|
//! | 0..144    | joint `j` rotation at `6j..6j+6` (two columns) |
//! | 144..148  | contacts: left heel, left toe, right heel, right toe |
//! | 148..151  | root translation (x, y, z), meters             |

mod arrange;
pub mod io;
mod rotation;
mod skeleton;
mod synth;

pub use arrange::{apply_permutation, rearrange_dancers};
pub use rotation::{det, matrix_to_rot6d, orthogonality_error, rot6d_to_matrix, Mat3};
pub use skeleton::{forward_kinematics, forward_kinematics_tape, Skeleton, FOOT_JOINTS};
pub use synth::{synth_dataset, SynthConfig, SynthSample};

use crate::numerics::{NumericsError, Tensor};

pub const JOINTS: usize = 24;
pub const ROT_CHANNELS: usize = JOINTS * 6;
pub const CONTACT_CHANNELS: usize = 4;
pub const POSE_DIM: usize = ROT_CHANNELS + CONTACT_CHANNELS + 3;
pub const CONTACT_OFFSET: usize = ROT_CHANNELS;
pub const ROOT_OFFSET: usize = ROT_CHANNELS + CONTACT_CHANNELS;
pub const DEFAULT_FPS: f32 = 30.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MotionError {
    #[error("degenerate 6D rotation: {0} vector collapsed")]
    DegenerateRotation(&'static str),
    #[error("invalid motion: {0}")]
    Invalid(String),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("json: {0}")]
    Json(String),
    #[error("synthetic data: {0}")]
    Synth(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One dancer's pose at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub rot6d: [[f64; 6]; JOINTS],
    pub contacts: [f64; CONTACT_CHANNELS],
    pub root: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self { rot6d: [[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; JOINTS], contacts: [0.0; CONTACT_CHANNELS], root: [0.0; 3] }
    }
}

impl Pose {
    /// Read a packed 151-vector; contact channels are clamped to [0, 1].
    pub fn unpack(v: &[f64]) -> Result<Self, MotionError> {
        if v.len() != POSE_DIM {
            return Err(MotionError::Invalid(format!("pose needs {POSE_DIM} channels, got {}", v.len())));
        }
        let mut pose = Pose::default();
        for (j, r) in pose.rot6d.iter_mut().enumerate() {
            r.copy_from_slice(&v[6 * j..6 * j + 6]);
        }
        for (c, &x) in pose.contacts.iter_mut().zip(&v[CONTACT_OFFSET..ROOT_OFFSET]) {
            *c = x.clamp(0.0, 1.0);
        }
        pose.root.copy_from_slice(&v[ROOT_OFFSET..]);
        Ok(pose)
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(POSE_DIM);
        for r in &self.rot6d {
            v.extend_from_slice(r);
        }
        v.extend_from_slice(&self.contacts);
        v.extend_from_slice(&self.root);
        v
    }
}

/// Frames x dancers x 151 poses, stored as `f32` like the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMotion {
    frames: usize,
    dancers: usize,
    fps: f32,
    data: Vec<f32>,
}

impl GroupMotion {
    pub fn new(frames: usize, dancers: usize, fps: f32, data: Vec<f32>) -> Result<Self, MotionError> {
        if frames < 2 || dancers < 1 {
            return Err(MotionError::Invalid(format!("need at least 2 frames and 1 dancer, got {frames} x {dancers}")));
        }
        if data.len() != frames * dancers * POSE_DIM {
            return Err(MotionError::Invalid(format!("{} values for {frames} x {dancers} x {POSE_DIM}", data.len())));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(MotionError::Invalid(format!("fps must be positive, got {fps}")));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(MotionError::Invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { frames, dancers, fps, data })
    }

    /// Build from an `[L, N, 151]` tensor, clamping contact channels.
    pub fn from_tensor(t: &Tensor, fps: f32) -> Result<Self, MotionError> {
        let [frames, dancers, d] = t.shape() else {
            return Err(MotionError::Invalid(format!("expected [L, N, 151], got {:?}", t.shape())));
        };
        if *d != POSE_DIM {
            return Err(MotionError::Invalid(format!("expected {POSE_DIM} channels, got {d}")));
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = i % POSE_DIM;
                let x = if (CONTACT_OFFSET..ROOT_OFFSET).contains(&c) { x.clamp(0.0, 1.0) } else { x };
                x as f32
            })
            .collect();
        Self::new(*frames, *dancers, fps, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dancers(&self) -> usize {
        self.dancers
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channels(&self, frame: usize, dancer: usize) -> &[f32] {
        &self.data[(frame * self.dancers + dancer) * POSE_DIM..][..POSE_DIM]
    }

    pub fn pose(&self, frame: usize, dancer: usize) -> Pose {
        let v: Vec<f64> = self.channels(frame, dancer).iter().map(|&x| x as f64).collect();
        Pose::unpack(&v).expect("length checked at construction")
    }

    pub fn root(&self, frame: usize, dancer: usize) -> [f64; 3] {
        let c = self.channels(frame, dancer);
        [c[ROOT_OFFSET] as f64, c[ROOT_OFFSET + 1] as f64, c[ROOT_OFFSET + 2] as f64]
    }

    /// `[L, N, 151]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.frames, self.dancers, POSE_DIM], self.data.iter().map(|&x| x as f64).collect())
    }

    /// Ground-plane root positions, `[L, N, 2]`.
    pub fn ground_roots(&self) -> Tensor {
        ground_roots(&self.to_tensor())
    }

    /// Frames `start..start+len` as a new motion.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self, MotionError> {
        if start + len > self.frames {
            return Err(MotionError::Invalid(format!("frames {start}..{} out of {}", start + len, self.frames)));
        }
        let row = self.dancers * POSE_DIM;
        Self::new(len, self.dancers, self.fps, self.data[start * row..(start + len) * row].to_vec())
    }

    /// One dancer's sequence as an `[L, 151]` array of f64 rows.
    pub fn dancer_rows(&self, dancer: usize) -> Vec<Vec<f64>> {
        (0..self.frames).map(|l| self.channels(l, dancer).iter().map(|&x| x as f64).collect()).collect()
    }

    /// Concatenate motions along time (same dancers and fps).
    pub fn concat_frames(parts: &[GroupMotion]) -> Result<Self, MotionError> {
        let first = parts.first().ok_or_else(|| MotionError::Invalid("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.dancers != first.dancers || p.fps != first.fps {
                return Err(MotionError::Invalid("concatenated motions disagree on dancers or fps".into()));
            }
            data.extend_from_slice(&p.data);
            frames += p.frames;
        }
        Self::new(frames, first.dancers, first.fps, data)
    }
}

/// Ground-plane roots `[L, N, 2]` from a pose tensor `[L, N, 151]`.
pub fn ground_roots(x: &Tensor) -> Tensor {
    let (l, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(l * n * 2);
    for row in x.data().chunks(POSE_DIM) {
        out.push(row[ROOT_OFFSET]);
        out.push(row[ROOT_OFFSET + 1]);
    }
    Tensor::from_parts(vec![l, n, 2], out)
}

/// Frames x d_m conditioning features.
#[derive(Clone, Debug, PartialEq)]
pub struct MusicTrack {
    frames: usize,
    dim: usize,
    fps: f32,
    data: Vec<f32>,
}

impl MusicTrack {
    pub fn new(frames: usize, dim: usize, fps: f32, data: Vec<f32>) -> Result<Self, MotionError> {
        if frames < 1 || dim < 1 {
            return Err(MotionError::Invalid(format!("music needs frames and dim >= 1, got {frames} x {dim}")));
        }
        if data.len() != frames * dim {
            return Err(MotionError::Invalid(format!("{} values for {frames} x {dim}", data.len())));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(MotionError::Invalid(format!("fps must be positive, got {fps}")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MotionError::Invalid("non-finite music feature".into()));
        }
        Ok(Self { frames, dim, fps, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, l: usize) -> &[f32] {
        &self.data[l * self.dim..][..self.dim]
    }

    /// `[L, d_m]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.frames, self.dim], self.data.iter().map(|&x| x as f64).collect())
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self, MotionError> {
        if start + len > self.frames || len == 0 {
            return Err(MotionError::Invalid(format!("music frames {start}..{} out of {}", start + len, self.frames)));
        }
        Self::new(len, self.dim, self.fps, self.data[start * self.dim..(start + len) * self.dim].to_vec())
    }

    /// Check that this track can condition `motion`.
    pub fn check_pairs_with(&self, motion: &GroupMotion) -> Result<(), MotionError> {
        if self.frames != motion.frames() {
            return Err(MotionError::HeaderMismatch(format!(
                "music has {} frames, motion has {}",
                self.frames,
                motion.frames()
            )));
        }
        Ok(())
    }
}
