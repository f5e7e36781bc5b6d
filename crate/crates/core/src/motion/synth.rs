//! Procedural group dances paired with beat-locked music features.
//!
//! Each joint swings about a fixed axis as `base + A sin(pi (t - o) / P)`, so
//! its angular speed peaks exactly on the beat frames `o + kP`. Roots follow
//! a shared circle or side-by-side lemniscates, which keeps every pair of
//! dancers apart by construction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::rotation::{axis_angle, mat_mul, matrix_to_rot6d, Mat3};
use super::skeleton::{forward_kinematics, FOOT_JOINTS};
use super::{GroupMotion, MotionError, MusicTrack, Pose, Skeleton, DEFAULT_FPS, JOINTS};
use crate::numerics::RngStream;

const BEAT_PERIODS: [usize; 3] = [12, 15, 18];
const ROOT_HEIGHT: f64 = 0.92;
/// Foot speed (m/s) at which the contact label reaches zero.
const CONTACT_SPEED: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dancers: usize,
    pub frames: usize,
    pub fps: f32,
    pub count: usize,
    pub music_dim: usize,
    /// Circle formation radius (m).
    pub radius: f64,
    /// Distance between lemniscate centers (m).
    pub spacing: f64,
    /// Half-width of each lemniscate (m).
    pub amplitude: f64,
    /// Smallest allowed distance between two dancers (m).
    pub min_separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dancers: 3,
            frames: 120,
            fps: DEFAULT_FPS,
            count: 8,
            music_dim: 35,
            radius: 1.5,
            spacing: 1.6,
            amplitude: 0.5,
            min_separation: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), MotionError> {
        let bad = |m: String| Err(MotionError::Synth(m));
        if !(2..=5).contains(&self.dancers) {
            return bad(format!("dancers must be in 2..=5, got {}", self.dancers));
        }
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.fps != DEFAULT_FPS {
            return bad(format!("fps must be {DEFAULT_FPS}, got {}", self.fps));
        }
        if self.music_dim < 2 {
            return bad(format!("music_dim must be at least 2, got {}", self.music_dim));
        }
        if !(self.radius > 0.0 && self.spacing > 0.0 && self.amplitude >= 0.0 && self.min_separation >= 0.0) {
            return bad("formation sizes must be positive".into());
        }
        let chord = 2.0 * self.radius * (PI / self.dancers as f64).sin();
        if chord <= self.min_separation {
            return bad(format!(
                "circle of radius {} puts {} dancers {chord:.3} m apart, below {}",
                self.radius, self.dancers, self.min_separation
            ));
        }
        let gap = self.spacing - 2.0 * self.amplitude;
        if gap <= self.min_separation {
            return bad(format!(
                "lemniscates {} m apart with half-width {} overlap (gap {gap:.3} m)",
                self.spacing, self.amplitude
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub motion: GroupMotion,
    pub music: MusicTrack,
    /// Frames carrying a beat impulse.
    pub beat_frames: Vec<usize>,
    pub beat_period: usize,
}

struct JointSwing {
    axis: [f64; 3],
    base: f64,
    amp: f64,
}

fn unit(rng: &mut RngStream) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// `count` samples; sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(config: &SynthConfig, seed: u64) -> Result<Vec<SynthSample>, MotionError> {
    config.validate()?;
    let skeleton = Skeleton::default();
    let root = RngStream::new(seed);
    (0..config.count).map(|i| synth_one(config, &skeleton, &mut root.derive(i as u64))).collect()
}

fn synth_one(cfg: &SynthConfig, skeleton: &Skeleton, rng: &mut RngStream) -> Result<SynthSample, MotionError> {
    let (l, n) = (cfg.frames, cfg.dancers);
    let period = BEAT_PERIODS[rng.below(BEAT_PERIODS.len() as u64) as usize];
    let offset = rng.below(period as u64) as f64;
    let circle = rng.uniform() < 0.5;
    // one revolution (or figure eight) every 8 to 16 seconds
    let omega = 2.0 * PI / (cfg.fps as f64 * rng.uniform_range(8.0, 16.0));
    let phase0 = rng.uniform_range(0.0, 2.0 * PI);
    let lem_phase: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0 * PI)).collect();

    let swings: Vec<Vec<JointSwing>> = (0..n)
        .map(|_| {
            (0..JOINTS)
                .map(|j| JointSwing {
                    axis: unit(rng),
                    base: rng.uniform_range(-0.2, 0.2),
                    amp: if j == 0 { rng.uniform_range(0.05, 0.12) } else { rng.uniform_range(0.1, 0.35) },
                })
                .collect()
        })
        .collect();
    let yaw: Vec<f64> = (0..n).map(|_| rng.uniform_range(-PI, PI)).collect();

    let beat_wave = |t: f64| (PI * (t - offset) / period as f64).sin();
    let root_at = |i: usize, t: f64| -> [f64; 3] {
        let bob = 0.02 * (2.0 * PI * (t - offset) / period as f64).cos();
        let (x, y) = if circle {
            let a = phase0 + 2.0 * PI * i as f64 / n as f64 + omega * t;
            (cfg.radius * a.cos(), cfg.radius * a.sin())
        } else {
            let s = lem_phase[i] + omega * t;
            let cx = (i as f64 - (n as f64 - 1.0) / 2.0) * cfg.spacing;
            (cx + cfg.amplitude * s.sin(), cfg.amplitude * s.sin() * s.cos())
        };
        [x, y, ROOT_HEIGHT + bob]
    };

    let mut poses: Vec<Pose> = Vec::with_capacity(l * n);
    for t in 0..l {
        let w = beat_wave(t as f64);
        for i in 0..n {
            let mut pose = Pose::default();
            for (j, s) in swings[i].iter().enumerate() {
                let mut r: Mat3 = axis_angle(s.axis, s.base + s.amp * w);
                if j == 0 {
                    r = mat_mul(&axis_angle([0.0, 0.0, 1.0], yaw[i]), &r);
                }
                pose.rot6d[j] = matrix_to_rot6d(&r);
            }
            pose.root = root_at(i, t as f64);
            poses.push(pose);
        }
    }

    // contacts from foot speed, one-sided at the ends
    let feet: Vec<[[f64; 3]; JOINTS]> =
        poses.iter().map(|p| forward_kinematics(p, skeleton)).collect::<Result<_, _>>()?;
    let dt = 1.0 / cfg.fps as f64;
    for t in 0..l {
        let (a, b) = if t + 1 < l { (t, t + 1) } else { (t - 1, t) };
        for i in 0..n {
            for (c, &joint) in FOOT_JOINTS.iter().enumerate() {
                let (p, q) = (feet[a * n + i][joint], feet[b * n + i][joint]);
                let v = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt() / dt;
                poses[t * n + i].contacts[c] = (1.0 - v / CONTACT_SPEED).clamp(0.0, 1.0);
            }
        }
    }

    let data: Vec<f32> = poses.iter().flat_map(|p| p.pack()).map(|x| x as f32).collect();
    let motion = GroupMotion::new(l, n, cfg.fps, data)?;

    let beat_frames: Vec<usize> =
        (0..l).filter(|&t| (t as f64 - offset) as i64 % period as i64 == 0 && t as f64 >= offset).collect();
    let gains: Vec<f64> = (0..cfg.music_dim).map(|_| rng.uniform_range(0.5, 1.0)).collect();
    let mut feats = Vec::with_capacity(l * cfg.music_dim);
    for t in 0..l {
        let since = (t as f64 - offset).rem_euclid(period as f64);
        let u = (t as f64 - offset) / period as f64;
        for k in 0..cfg.music_dim {
            let v = match k {
                0 => f64::from(u8::from(beat_frames.binary_search(&t).is_ok())),
                1 => (-since / 3.0).exp(),
                _ => {
                    let j = k - 2;
                    let h = 0.5 * (j / 2 + 1) as f64;
                    let arg = 2.0 * PI * h * u;
                    gains[k] * if j % 2 == 0 { arg.cos() } else { arg.sin() }
                }
            };
            feats.push(v as f32);
        }
    }
    let music = MusicTrack::new(l, cfg.music_dim, cfg.fps, feats)?;
    Ok(SynthSample { motion, music, beat_frames, beat_period: period })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rot6d_to_matrix;

    fn geodesic(a: &Mat3, b: &Mat3) -> f64 {
        // trace(a^T b)
        let tr: f64 = (0..3).map(|i| (0..3).map(|k| a[k][i] * b[k][i]).sum::<f64>()).sum();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Summed local angular speed per frame, central differences.
    fn angular_speed(m: &GroupMotion, dancer: usize) -> Vec<f64> {
        let l = m.frames();
        (0..l)
            .map(|t| {
                let (a, b) = (t.saturating_sub(1), (t + 1).min(l - 1));
                let (pa, pb) = (m.pose(a, dancer), m.pose(b, dancer));
                (0..JOINTS)
                    .map(|j| {
                        let ra = rot6d_to_matrix(&pa.rot6d[j]).unwrap();
                        let rb = rot6d_to_matrix(&pb.rot6d[j]).unwrap();
                        geodesic(&ra, &rb) / (b - a) as f64
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig { count: 3, frames: 40, ..Default::default() };
        assert_eq!(synth_dataset(&cfg, 7).unwrap(), synth_dataset(&cfg, 7).unwrap());
        assert_ne!(synth_dataset(&cfg, 7).unwrap(), synth_dataset(&cfg, 8).unwrap());
    }

    #[test]
    fn dancers_never_collide() {
        for n in 2..=5 {
            let cfg = SynthConfig { dancers: n, frames: 60, count: 6, ..Default::default() };
            for s in synth_dataset(&cfg, 11).unwrap() {
                for t in 0..60 {
                    for i in 0..n {
                        for j in i + 1..n {
                            let (a, b) = (s.motion.root(t, i), s.motion.root(t, j));
                            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                            assert!(d > 0.3, "dancers {i},{j} at frame {t}: {d}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn beats_sit_on_angular_speed_peaks() {
        let cfg = SynthConfig { frames: 90, count: 6, ..Default::default() };
        for s in synth_dataset(&cfg, 3).unwrap() {
            assert!(!s.beat_frames.is_empty());
            for i in 0..cfg.dancers {
                let w = angular_speed(&s.motion, i);
                for &b in &s.beat_frames {
                    if b == 0 || b + 1 >= w.len() {
                        continue;
                    }
                    let lo = b.saturating_sub(2);
                    let hi = (b + 2).min(w.len() - 1);
                    let peak = (lo..=hi).max_by(|&x, &y| w[x].total_cmp(&w[y])).unwrap();
                    assert!(peak.abs_diff(b) <= 1, "beat {b} but peak at {peak}");
                }
            }
            for (t, row) in (0..s.music.frames()).map(|t| (t, s.music.frame(t))) {
                assert_eq!(row[0] == 1.0, s.beat_frames.contains(&t));
            }
        }
    }

    #[test]
    fn overlapping_starts_are_rejected() {
        let tight_circle = SynthConfig { dancers: 5, radius: 0.2, ..Default::default() };
        assert!(matches!(synth_dataset(&tight_circle, 1), Err(MotionError::Synth(_))));
        let wide_paths = SynthConfig { spacing: 1.0, amplitude: 0.4, ..Default::default() };
        assert!(matches!(synth_dataset(&wide_paths, 1), Err(MotionError::Synth(_))));
        let bad_fps = SynthConfig { fps: 24.0, ..Default::default() };
        assert!(synth_dataset(&bad_fps, 1).is_err());
    }

    #[test]
    fn contacts_stay_in_unit_interval() {
        let s = &synth_dataset(&SynthConfig { count: 1, ..Default::default() }, 2).unwrap()[0];
        for t in 0..s.motion.frames() {
            for c in s.motion.pose(t, 0).contacts {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
