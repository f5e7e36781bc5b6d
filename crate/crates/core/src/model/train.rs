use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::loss::{compute_losses_tape, LossBreakdown, LOSS_NAMES};
use super::{decoder_forward, ModelConfig, ModelError};
use crate::diffusion::{make_schedule, max_phase, q_sample, segment_bounds, tns_levels, tns_noise, Schedule};
use crate::motion::{ground_roots, rearrange_dancers, GroupMotion, MusicTrack, Skeleton};
use crate::numerics::{gaussian, Adam, Graph, ParamStore, RngStream, Tensor};
use crate::temporal::{swap_mode_encode, SwapCode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Triangular segment levels; `false` uses one uniform level per sequence.
    pub tns: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 5e-5, tns: true }
    }
}

/// One training sequence with dancers in canonical order.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `[L, N, 151]`.
    pub x0: Tensor,
    /// `[L, d_m]`.
    pub music: Tensor,
    pub swap: SwapCode,
}

impl TrainSample {
    pub fn prepare(motion: &GroupMotion, music: &MusicTrack) -> Result<Self, ModelError> {
        music.check_pairs_with(motion)?;
        let (motion, _) = rearrange_dancers(motion);
        let l = motion.frames();
        let roots = |f: usize| -> Vec<[f64; 2]> {
            (0..motion.dancers())
                .map(|n| {
                    let r = motion.root(f, n);
                    [r[0], r[1]]
                })
                .collect()
        };
        Ok(Self { x0: motion.to_tensor(), music: music.to_tensor(), swap: swap_mode_encode(&roots(0), &roots(l - 1))? })
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ParamStore,
    pub losses: Vec<LossBreakdown>,
    pub elapsed: Duration,
}

impl TrainReport {
    /// Mean total over the first `k` steps.
    pub fn head_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[..k].iter().map(|l| l.total).sum::<f64>() / k as f64
    }

    /// Mean total over the last `k` steps.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - k..].iter().map(|l| l.total).sum::<f64>() / k as f64
    }
}

/// Noised input and per-frame levels for one step.
fn noised_input(
    sample: &TrainSample,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    schedule: &Schedule,
    rng: &RngStream,
) -> Result<(Tensor, Vec<usize>), ModelError> {
    let l = sample.x0.shape()[0];
    if tcfg.tns {
        let segments = segment_bounds(l, cfg.segment_len).len();
        let phase = rng.derive(1).below(max_phase(cfg.steps, segments) as u64 + 1) as usize;
        let plan = tns_levels(phase, segments, cfg.steps, cfg.segment_len)?;
        let (x, _) = tns_noise(&sample.x0, &plan, schedule, &rng.derive(2))?;
        Ok((x, plan.frame_levels(l)?))
    } else {
        let t = 1 + rng.derive(1).below(cfg.steps as u64) as usize;
        let noise = gaussian(&mut rng.derive(2), sample.x0.shape());
        Ok((q_sample(&sample.x0, t, &noise, schedule)?, vec![t; l]))
    }
}

/// Loss (and gradients when `adam` is given) for one sample at one step.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ParamStore,
    adam: Option<&mut Adam>,
    sample: &TrainSample,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    schedule: &Schedule,
    skeleton: &Skeleton,
    step: usize,
    rng: &RngStream,
) -> Result<LossBreakdown, ModelError> {
    let (x_t, levels) = noised_input(sample, cfg, tcfg, schedule, rng)?;
    let g = Graph::new();
    let bound = params.bind(&g, adam.is_some());
    let x_hat = decoder_forward(
        &bound,
        cfg,
        g.constant(x_t.clone()),
        &levels,
        g.constant(sample.music.clone()),
        &sample.swap,
        &ground_roots(&x_t),
    )?;
    let (total, report) = compute_losses_tape(x_hat, &sample.x0, skeleton, &cfg.weights)?;
    for (v, name) in report.components().iter().chain([&report.total]).zip(LOSS_NAMES.iter().chain(&["total"])) {
        if !v.is_finite() {
            return Err(ModelError::NonFinite { step, component: name });
        }
    }
    if let Some(adam) = adam {
        let grads = g.backward(total)?;
        let grads = bound.grads(&grads);
        adam.step(params, &grads)?;
    }
    Ok(report)
}

/// Adam over `data`, one sequence per step. Step `s` (1-based) picks its
/// sequence, phase and noise from `rng.derive(s)`.
pub fn train_loop(
    data: &[TrainSample],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: ParamStore,
    rng: &RngStream,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    if !(tcfg.lr.is_finite() && tcfg.lr > 0.0) {
        return Err(ModelError::Config(format!("learning rate must be positive, got {}", tcfg.lr)));
    }
    let start = Instant::now();
    let schedule = make_schedule(cfg.steps, cfg.schedule)?;
    let skeleton = Skeleton::default();
    let mut params = init;
    let mut adam = Adam::new(tcfg.lr);
    let mut losses = Vec::with_capacity(tcfg.steps);
    for step in 1..=tcfg.steps {
        let r = rng.derive(step as u64);
        let sample = &data[r.derive(0).below(data.len() as u64) as usize];
        let report = train_step(&mut params, Some(&mut adam), sample, cfg, tcfg, &schedule, &skeleton, step, &r)?;
        on_step(step, &report);
        losses.push(report);
    }
    Ok(TrainReport { params, losses, elapsed: start.elapsed() })
}

/// `step,simple,vel,fk,contact,dist,total` rows, steps counted from 1.
pub fn loss_csv(losses: &[LossBreakdown]) -> String {
    let mut out = String::from("step,simple,vel,fk,contact,dist,total\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", i + 1, l.simple, l.vel, l.fk, l.contact, l.dist, l.total);
    }
    out
}
