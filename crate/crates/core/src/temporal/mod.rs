//! Per-dancer temporal transformer.
//!
//! Every layer applies, each behind a layer norm and a residual:
//! differential self-attention, music cross-attention restricted to an
//! aligned window, a diagonal SSM, and a feed-forward block. Timestep and
//! swap-mode embeddings are added to the tokens before the first layer.

mod attention;
mod embed;
mod mask;
mod ssm;
mod swap;

use std::sync::Arc;

pub use attention::{
    diff_attention, diff_map, masked_cross_attention, masked_cross_attention_dense, CrossAttnWeights, DiffAttnWeights,
};
pub use embed::{time_features, timestep_embed, TIME_FEATURES};
pub use mask::{build_alignment_mask, window, windows, AlignmentMask, MaskMode};
pub use ssm::{ssm_apply, ssm_discretize, ssm_kernel, ssm_layer, SsmMode, SsmParams, ZOH_LIMIT};
pub use swap::{swap_mode_encode, SwapCode, MAX_DANCERS, SWAP_TABLE_ROWS};

use serde::{Deserialize, Serialize};

use crate::numerics::{flops, gaussian, BoundParams, NumericsError, ParamStore, RngStream, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemporalError {
    #[error("temporal: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub layers: usize,
    /// Music window radius in frames.
    pub window: usize,
    /// Causal mode restricts both self- and cross-attention to the past.
    pub mode: MaskMode,
    /// Self-attention band radius; `None` attends over the whole sequence.
    pub self_span: Option<usize>,
    pub ssm_state: usize,
    pub lambda_init: f64,
    /// Entries of the difference map below this magnitude are zeroed (0 = off).
    pub prune_tau: f64,
    pub ffn_mult: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            window: 30,
            mode: MaskMode::Symmetric,
            self_span: Some(30),
            ssm_state: 16,
            lambda_init: 0.5,
            prune_tau: 0.0,
            ffn_mult: 2,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<(), TemporalError> {
        if self.ssm_state == 0 || self.ffn_mult == 0 {
            return Err(TemporalError::Invalid("ssm_state and ffn_mult must be at least 1".into()));
        }
        if !self.lambda_init.is_finite() || !(self.prune_tau >= 0.0) {
            return Err(TemporalError::Invalid("lambda_init must be finite and prune_tau non-negative".into()));
        }
        Ok(())
    }

    /// Self-attention key windows for a sequence of `len` frames.
    pub fn self_windows(&self, len: usize) -> Arc<[(usize, usize)]> {
        windows(len, self.self_span.unwrap_or(len), self.mode)
    }
}

fn init(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    gaussian(rng, shape).map(|v| v * s)
}

/// Register all temporal weights under `prefix`.
pub fn init_params(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    music_dim: usize,
    cfg: &TemporalConfig,
    rng: &mut RngStream,
) {
    let (s, m) = (cfg.ssm_state, cfg.ffn_mult);
    store.insert(format!("{prefix}.music.w"), init(rng, &[music_dim, d], music_dim));
    store.insert(format!("{prefix}.music.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.time.w1"), init(rng, &[TIME_FEATURES, d], TIME_FEATURES));
    store.insert(format!("{prefix}.time.b1"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.time.w2"), init(rng, &[d, d], d));
    store.insert(format!("{prefix}.time.b2"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.swap.table"), gaussian(rng, &[SWAP_TABLE_ROWS, d]).map(|v| 0.1 * v));
    for i in 0..cfg.layers {
        let p = format!("{prefix}.l{i}");
        store.insert(format!("{p}.attn.wq"), init(rng, &[d, 2 * d], d));
        store.insert(format!("{p}.attn.wk"), init(rng, &[d, 2 * d], d));
        store.insert(format!("{p}.attn.wv"), init(rng, &[d, 2 * d], d));
        store.insert(format!("{p}.attn.wo"), init(rng, &[2 * d, d], 2 * d));
        store.insert(format!("{p}.attn.lambda"), Tensor::from_vec(vec![cfg.lambda_init]));
        for n in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.ca.{n}"), init(rng, &[d, d], d));
        }
        store.insert(format!("{p}.ssm.win"), init(rng, &[d, d], d));
        store.insert(format!("{p}.ssm.a_log"), Tensor::from_fn(&[d, s], |i| ((i % s) as f64 + 1.0).ln()));
        store.insert(
            format!("{p}.ssm.log_delta"),
            Tensor::from_fn(&[d, 1], |_| rng.uniform_range(0.01f64.ln(), 0.3f64.ln())),
        );
        store.insert(format!("{p}.ssm.b"), Tensor::ones(&[d, s]));
        store.insert(format!("{p}.ssm.c"), init(rng, &[d, s], s));
        store.insert(format!("{p}.ssm.skip"), Tensor::ones(&[d]));
        store.insert(format!("{p}.ssm.wout"), init(rng, &[d, d], d));
        store.insert(format!("{p}.ffn.w1"), init(rng, &[d, m * d], d));
        store.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[m * d]));
        store.insert(format!("{p}.ffn.w2"), init(rng, &[m * d, d], m * d));
        store.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
    }
}

/// Timestep plus swap embedding, `[L, d]`.
pub fn conditioning<'g>(
    params: &BoundParams<'g>,
    prefix: &str,
    timesteps: &[usize],
    max_t: usize,
    swap: &SwapCode,
) -> Result<Var<'g>, TemporalError> {
    let _scope = flops::scope("embed");
    let get = |n: &str| params.get(&format!("{prefix}.{n}"));
    let g = get("time.w1")?.graph();
    let feats = g.constant(time_features(timesteps, max_t)?);
    let t = timestep_embed(feats, get("time.w1")?, get("time.b1")?, get("time.w2")?, get("time.b2")?)?;
    Ok(t.add(swap.embed(get("swap.table")?)?)?)
}

/// Project raw music features `[L, d_m]` to tokens `[L, d]`.
pub fn music_tokens<'g>(params: &BoundParams<'g>, prefix: &str, music: Var<'g>) -> Result<Var<'g>, TemporalError> {
    let _scope = flops::scope("music");
    let w = params.get(&format!("{prefix}.music.w"))?;
    if music.shape().len() != 2 || music.shape()[1] != w.shape()[0] {
        return Err(TemporalError::Invalid(format!("music must be [L, {}], got {:?}", w.shape()[0], music.shape())));
    }
    Ok(music.matmul(w)?.add(params.get(&format!("{prefix}.music.b"))?)?)
}

/// One temporal layer over `h: [B, L, d]`.
pub fn temporal_layer<'g>(
    h: Var<'g>,
    music: Var<'g>,
    params: &BoundParams<'g>,
    layer_prefix: &str,
    cfg: &TemporalConfig,
    mask: &AlignmentMask,
) -> Result<Var<'g>, TemporalError> {
    let get = |n: &str| params.get(&format!("{layer_prefix}.{n}"));
    let len = h.shape()[1];

    let a = {
        let _scope = flops::scope("diff_attn");
        let w = DiffAttnWeights {
            wq: get("attn.wq")?,
            wk: get("attn.wk")?,
            wv: get("attn.wv")?,
            wo: get("attn.wo")?,
            lambda: get("attn.lambda")?,
        };
        diff_attention(h.layer_norm(LN_EPS)?, &w, cfg.self_windows(len), cfg.prune_tau)?
    };
    let h = h.add(a)?;

    let c = {
        let _scope = flops::scope("cross_attn");
        let w = CrossAttnWeights { wq: get("ca.wq")?, wk: get("ca.wk")?, wv: get("ca.wv")?, wo: get("ca.wo")? };
        masked_cross_attention(h.layer_norm(LN_EPS)?, music, &w, mask)?
    };
    let h = h.add(c)?;

    let s = {
        let _scope = flops::scope("ssm");
        let u = h.layer_norm(LN_EPS)?.matmul(get("ssm.win")?)?;
        let y = ssm_layer(u, get("ssm.a_log")?, get("ssm.log_delta")?, get("ssm.b")?, get("ssm.c")?)?;
        y.add(u.mul(get("ssm.skip")?)?)?.matmul(get("ssm.wout")?)?
    };
    let h = h.add(s)?;

    let f = {
        let _scope = flops::scope("ffn");
        h.layer_norm(LN_EPS)?
            .matmul(get("ffn.w1")?)?
            .add(get("ffn.b1")?)?
            .silu()?
            .matmul(get("ffn.w2")?)?
            .add(get("ffn.b2")?)?
    };
    Ok(h.add(f)?)
}

/// Full stack over `x: [B, L, d]` given music tokens `[L, d]` and the
/// conditioning `[L, d]` from [`conditioning`].
pub fn temporal_stack<'g>(
    x: Var<'g>,
    music: Var<'g>,
    cond: Var<'g>,
    params: &BoundParams<'g>,
    prefix: &str,
    cfg: &TemporalConfig,
) -> Result<Var<'g>, TemporalError> {
    let shape = x.shape();
    if shape.len() != 3 || cond.shape() != [shape[1], shape[2]] || music.shape() != [shape[1], shape[2]] {
        return Err(TemporalError::Invalid(format!(
            "stack input {shape:?} needs music and conditioning of shape [L, d], got {:?} and {:?}",
            music.shape(),
            cond.shape()
        )));
    }
    let mask = build_alignment_mask(shape[1], cfg.window as i64, cfg.mode)?;
    let mut h = x.add(cond)?;
    for i in 0..cfg.layers {
        h = temporal_layer(h, music, params, &format!("{prefix}.l{i}"), cfg, &mask)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests;
