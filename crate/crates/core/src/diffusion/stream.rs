//! Segment-by-segment generation from an ordered music feed.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::sampler::{clock_level, posterior_step, segment_init, segment_noise};
use super::schedule::Schedule;
use super::tns::tns_kappa;
use super::{concat_frames, frame_block, Condition, Denoiser, DiffusionError};
use crate::numerics::{RngStream, Tensor};
use crate::temporal::SwapCode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Segments that can be mid-chain at once.
    pub window: usize,
    /// Clean emitted segments fed back as context.
    pub context_segments: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { window: 4, context_segments: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct Emitted {
    pub index: usize,
    pub start_frame: usize,
    /// `[len, N, 151]`.
    pub x: Tensor,
    /// Engine ticks between admission and emission.
    pub ticks_resident: usize,
    pub latency: Duration,
}

struct Live {
    index: usize,
    start_frame: usize,
    x: Tensor,
    music: Tensor,
    admitted_tick: usize,
    admitted_at: Instant,
}

/// Single-owner streaming state machine. Feed music segments with
/// [`push_music`](Self::push_music), call [`close`](Self::close) when the
/// source ends, and drive it with [`tick`](Self::tick).
pub struct StreamEngine<'m, M: Denoiser + ?Sized> {
    model: &'m M,
    schedule: &'m Schedule,
    swap: SwapCode,
    dancers: usize,
    channels: usize,
    cfg: StreamConfig,
    rng: RngStream,
    kappa: usize,
    clock: usize,
    ticks: usize,
    next_index: usize,
    next_frame: usize,
    pending: VecDeque<Tensor>,
    closed: bool,
    live: VecDeque<Live>,
    history: VecDeque<(Tensor, Tensor)>,
}

impl<'m, M: Denoiser + ?Sized> StreamEngine<'m, M> {
    pub fn new(
        model: &'m M,
        schedule: &'m Schedule,
        swap: SwapCode,
        dancers: usize,
        channels: usize,
        cfg: StreamConfig,
        rng: RngStream,
    ) -> Result<Self, DiffusionError> {
        if cfg.window == 0 {
            return Err(DiffusionError::Invalid("stream window must be at least 1".into()));
        }
        Ok(Self {
            model,
            schedule,
            swap,
            dancers,
            channels,
            kappa: tns_kappa(schedule.steps(), cfg.window),
            cfg,
            rng,
            clock: 0,
            ticks: 0,
            next_index: 0,
            next_frame: 0,
            pending: VecDeque::new(),
            closed: false,
            live: VecDeque::new(),
            history: VecDeque::new(),
        })
    }

    /// Queue one music segment `[len, d_m]`.
    pub fn push_music(&mut self, music: Tensor) -> Result<(), DiffusionError> {
        if self.closed {
            return Err(DiffusionError::Invalid("music pushed after close".into()));
        }
        if music.rank() != 2 {
            return Err(DiffusionError::Shape(format!("music segment must be [len, d_m], got {:?}", music.shape())));
        }
        self.pending.push_back(music);
        Ok(())
    }

    /// Mark the source exhausted; remaining segments are flushed.
    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn ticks(&self) -> usize {
        self.ticks
    }

    pub fn is_done(&self) -> bool {
        self.closed && self.pending.is_empty() && self.live.is_empty()
    }

    /// Whether the next tick has all the music it needs.
    pub fn ready(&self) -> bool {
        if self.is_done() {
            return false;
        }
        let needed = self.admissions_before(self.clock + self.kappa);
        self.closed || self.pending.len() >= needed
    }

    fn admissions_before(&self, clock: usize) -> usize {
        // Segment s starts descending at clock s * kappa.
        (clock.saturating_sub(1) / self.kappa + 1).saturating_sub(self.next_index)
    }

    fn admit(&mut self) {
        while self.next_index * self.kappa <= self.clock {
            let Some(music) = self.pending.pop_front() else { break };
            let len = music.shape()[0];
            self.live.push_back(Live {
                index: self.next_index,
                start_frame: self.next_frame,
                x: segment_init(&self.rng, self.next_index, &[len, self.dancers, self.channels]),
                music,
                admitted_tick: self.ticks,
                admitted_at: Instant::now(),
            });
            self.next_index += 1;
            self.next_frame += len;
        }
    }

    /// Advance the clock by `kappa` unit steps, denoising every live
    /// segment, and return the segments that reached level 0.
    pub fn tick(&mut self) -> Result<Vec<Emitted>, DiffusionError> {
        if !self.ready() {
            return Err(DiffusionError::Invalid("tick needs more music or close()".into()));
        }
        let steps = self.schedule.steps();
        let mut emitted = Vec::new();
        for _ in 0..self.kappa {
            self.admit();
            if self.live.is_empty() {
                break;
            }
            let levels: Vec<usize> =
                self.live.iter().map(|s| clock_level(s.index, self.clock, self.kappa, steps)).collect();
            let mut xs: Vec<Tensor> = self.history.iter().map(|(x, _)| x.clone()).collect();
            let mut music: Vec<Tensor> = self.history.iter().map(|(_, m)| m.clone()).collect();
            let mut frame_levels: Vec<usize> = self.history.iter().flat_map(|(x, _)| vec![0; x.shape()[0]]).collect();
            let ctx_frames = frame_levels.len();
            for (s, &lv) in self.live.iter().zip(&levels) {
                xs.push(s.x.clone());
                music.push(s.music.clone());
                frame_levels.extend(std::iter::repeat(lv).take(s.x.shape()[0]));
            }
            let offset = self.live[0].start_frame - ctx_frames;
            let music = concat_frames(&music)?;
            let cond = Condition { music: &music, swap: &self.swap };
            let x0_hat = self.model.predict_x0(&concat_frames(&xs)?, &frame_levels, &cond, offset)?;
            let mut first = ctx_frames;
            for (s, &lv) in self.live.iter_mut().zip(&levels) {
                let n = s.x.shape()[0];
                if lv > 0 {
                    let noise = segment_noise(&self.rng, s.index, lv, s.x.shape());
                    s.x = posterior_step(&s.x, &frame_block(&x0_hat, first, n), &vec![lv; n], &noise, self.schedule)?;
                }
                first += n;
            }
            self.clock += 1;
            while let Some(front) = self.live.front() {
                if clock_level(front.index, self.clock, self.kappa, steps) > 0 {
                    break;
                }
                let done = self.live.pop_front().expect("front exists");
                if self.cfg.context_segments > 0 {
                    self.history.push_back((done.x.clone(), done.music.clone()));
                    while self.history.len() > self.cfg.context_segments {
                        self.history.pop_front();
                    }
                }
                emitted.push(Emitted {
                    index: done.index,
                    start_frame: done.start_frame,
                    x: done.x,
                    ticks_resident: self.ticks + 1 - done.admitted_tick,
                    latency: done.admitted_at.elapsed(),
                });
            }
        }
        self.ticks += 1;
        Ok(emitted)
    }
}

/// Drive an engine over an ordered source, handing each emitted segment to
/// `sink` as soon as it is ready.
pub fn stream_generate<M, I, F>(
    model: &M,
    source: I,
    swap: SwapCode,
    dancers: usize,
    channels: usize,
    schedule: &Schedule,
    cfg: StreamConfig,
    rng: RngStream,
    mut sink: F,
) -> Result<usize, DiffusionError>
where
    M: Denoiser + ?Sized,
    I: IntoIterator<Item = Result<Tensor, DiffusionError>>,
    F: FnMut(Emitted) -> Result<(), DiffusionError>,
{
    let mut engine = StreamEngine::new(model, schedule, swap, dancers, channels, cfg, rng)?;
    let mut source = source.into_iter();
    let mut count = 0;
    loop {
        while !engine.closed && !engine.ready() {
            match source.next() {
                Some(music) => engine.push_music(music?)?,
                None => engine.close(),
            }
        }
        if engine.is_done() {
            return Ok(count);
        }
        for e in engine.tick()? {
            count += 1;
            sink(e)?;
        }
    }
}
