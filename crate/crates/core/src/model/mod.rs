//! Decoder assembly, losses, training and checkpoints.
//!
//! The decoder maps noisy poses `[L, N, 151]` to a clean estimate:
//! input projection, group fusion across dancers, per-frame graph
//! convolution, the per-dancer temporal stack, and an output projection.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use loss::{compute_losses, compute_losses_tape, LossBreakdown, LossWeights, LOSS_NAMES};
pub use train::{loss_csv, train_loop, train_step, TrainConfig, TrainReport, TrainSample};

use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, Denoiser, DiffusionError, ScheduleKind};
use crate::motion::{ground_roots, MotionError, POSE_DIM};
use crate::numerics::{flops, gaussian, BoundParams, Graph, NumericsError, ParamStore, RngStream, Tensor, Var};
use crate::spatial::{self, SpatialConfig, SpatialError};
use crate::temporal::{self, SwapCode, TemporalConfig, TemporalError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { step: usize, component: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent width.
    pub d: usize,
    /// Group size; the fusion weights depend on it.
    pub dancers: usize,
    pub music_dim: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub schedule: ScheduleKind,
    /// Frames per noise segment.
    pub segment_len: usize,
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
    pub weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            dancers: 3,
            music_dim: 35,
            steps: 1000,
            schedule: ScheduleKind::Linear,
            segment_len: 30,
            spatial: SpatialConfig::default(),
            temporal: TemporalConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.dancers == 0 || self.music_dim == 0 || self.steps == 0 || self.segment_len == 0 {
            return Err(ModelError::Config("d, dancers, music_dim, steps and segment_len must be at least 1".into()));
        }
        if self.dancers > temporal::MAX_DANCERS {
            return Err(ModelError::Config(format!("at most {} dancers", temporal::MAX_DANCERS)));
        }
        self.temporal.validate()?;
        self.weights.validate()
    }
}

fn init(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    gaussian(rng, shape).map(|v| v * s)
}

/// Fresh parameters for `cfg`, deterministic in `rng`.
pub fn init_params(cfg: &ModelConfig, rng: &RngStream) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let (d, nd) = (cfg.d, cfg.d * cfg.dancers);
    let mut store = ParamStore::new();
    let mut r = rng.derive(0);
    store.insert("in.w", init(&mut r, &[POSE_DIM, d], POSE_DIM));
    store.insert("in.b", Tensor::zeros(&[d]));
    let mut r = rng.derive(1);
    store.insert("fusion.w1", init(&mut r, &[nd, nd], nd));
    store.insert("fusion.b1", Tensor::zeros(&[nd]));
    store.insert("fusion.w2", init(&mut r, &[nd, nd], nd));
    store.insert("fusion.b2", Tensor::zeros(&[nd]));
    spatial::init_params(&mut store, "spatial", d, &cfg.spatial, &mut rng.derive(2));
    temporal::init_params(&mut store, "temporal", d, cfg.music_dim, &cfg.temporal, &mut rng.derive(3));
    let mut r = rng.derive(4);
    store.insert("out.w", init(&mut r, &[d, POSE_DIM], d));
    store.insert("out.b", Tensor::zeros(&[POSE_DIM]));
    Ok(store)
}

/// Parameters that do not depend on the group size.
pub fn shared_param_count(store: &ParamStore) -> usize {
    store.numel() - store.numel_with_prefix("fusion.")
}

/// Residual two-layer MLP over the concatenated dancers, `[L, N, d]`.
pub fn group_fusion<'g>(x: Var<'g>, params: &BoundParams<'g>) -> Result<Var<'g>, ModelError> {
    let _scope = flops::scope("fusion");
    let shape = x.shape();
    let [l, n, d] = shape[..] else {
        return Err(ModelError::Shape(format!("fusion input must be [L, N, d], got {shape:?}")));
    };
    let w1 = params.get("fusion.w1")?;
    if w1.shape()[0] != n * d {
        return Err(ModelError::Shape(format!(
            "fusion weights are for {} channels, input has {n} dancers x {d}",
            w1.shape()[0]
        )));
    }
    let flat = x.reshape(&[l, n * d])?;
    let h = flat.matmul(w1)?.add(params.get("fusion.b1")?)?.relu()?;
    let h = h.matmul(params.get("fusion.w2")?)?.add(params.get("fusion.b2")?)?;
    Ok(flat.add(h)?.reshape(&[l, n, d])?)
}

/// Pose channels to latents, `[L, N, 151] -> [L, N, d]`.
pub fn input_projection<'g>(params: &BoundParams<'g>, x_t: Var<'g>) -> Result<Var<'g>, ModelError> {
    let _scope = flops::scope("in_proj");
    let shape = x_t.shape();
    let [l, n, POSE_DIM] = shape[..] else {
        return Err(ModelError::Shape(format!("decoder input must be [L, N, {POSE_DIM}], got {shape:?}")));
    };
    let w = params.get("in.w")?;
    Ok(x_t.reshape(&[l * n, POSE_DIM])?.matmul(w)?.add(params.get("in.b")?)?.reshape(&[l, n, w.shape()[1]])?)
}

/// Latents back to pose channels, `[L, N, d] -> [L, N, 151]`.
pub fn output_projection<'g>(params: &BoundParams<'g>, h: Var<'g>) -> Result<Var<'g>, ModelError> {
    let _scope = flops::scope("out_proj");
    let shape = h.shape();
    let [l, n, d] = shape[..] else {
        return Err(ModelError::Shape(format!("output head input must be [L, N, d], got {shape:?}")));
    };
    Ok(h.reshape(&[l * n, d])?.matmul(params.get("out.w")?)?.add(params.get("out.b")?)?.reshape(&[l, n, POSE_DIM])?)
}

/// Inputs of the temporal stack: per-dancer tokens `[N, L, d]`, music
/// tokens `[L, d]` and conditioning `[L, d]`.
#[allow(clippy::too_many_arguments)]
pub fn temporal_inputs<'g>(
    params: &BoundParams<'g>,
    cfg: &ModelConfig,
    x_t: Var<'g>,
    t: &[usize],
    music: Var<'g>,
    swap: &SwapCode,
    roots: &Tensor,
) -> Result<(Var<'g>, Var<'g>, Var<'g>), ModelError> {
    let h = input_projection(params, x_t)?;
    let l = h.shape()[0];
    if t.len() != l || music.shape() != [l, cfg.music_dim] {
        return Err(ModelError::Shape(format!(
            "{l} frames need {l} levels and music [{l}, {}], got {} and {:?}",
            cfg.music_dim,
            t.len(),
            music.shape()
        )));
    }
    let h = group_fusion(h, params)?;
    let h = spatial::spatial_block(h, roots, params, "spatial", &cfg.spatial)?;
    let cond = temporal::conditioning(params, "temporal", t, cfg.steps, swap)?;
    let tokens = temporal::music_tokens(params, "temporal", music)?;
    Ok((h.transpose(0, 1)?, tokens, cond))
}

/// `x_t: [L, N, 151]`, per-frame levels `t`, `music: [L, d_m]`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<'g>(
    params: &BoundParams<'g>,
    cfg: &ModelConfig,
    x_t: Var<'g>,
    t: &[usize],
    music: Var<'g>,
    swap: &SwapCode,
    roots: &Tensor,
) -> Result<Var<'g>, ModelError> {
    let (h, tokens, cond) = temporal_inputs(params, cfg, x_t, t, music, swap, roots)?;
    let h = temporal::temporal_stack(h, tokens, cond, params, "temporal", &cfg.temporal)?;
    output_projection(params, h.transpose(0, 1)?)
}

/// A parameter set plus its config, usable as a sampler denoiser.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Decoder {
    pub fn new(cfg: ModelConfig, rng: &RngStream) -> Result<Self, ModelError> {
        let params = init_params(&cfg, rng)?;
        Ok(Self { cfg, params })
    }

    /// Value-only forward pass.
    pub fn forward(&self, x_t: &Tensor, t: &[usize], music: &Tensor, swap: &SwapCode) -> Result<Tensor, ModelError> {
        let g = Graph::new();
        let params = self.params.bind(&g, false);
        let out = decoder_forward(
            &params,
            &self.cfg,
            g.constant(x_t.clone()),
            t,
            g.constant(music.clone()),
            swap,
            &ground_roots(x_t),
        )?;
        Ok(out.value())
    }
}

impl Denoiser for Decoder {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cond: &Condition<'_>,
        _offset: usize,
    ) -> Result<Tensor, DiffusionError> {
        self.forward(x_t, t, cond.music, cond.swap).map_err(|e| DiffusionError::Model(e.to_string()))
    }
}
