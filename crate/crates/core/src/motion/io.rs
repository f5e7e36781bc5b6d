//! Binary motion (`GDM1`) and music (`GDMU`) files plus JSON mirrors.
//!
//! Both binary formats are little-endian: a 4-byte magic, a small header of
//! `u32` sizes and an `f32` fps, then row-major `f32` payload.
//!
//! | format | header                      | payload          |
//! |--------|-----------------------------|------------------|
//! | GDM1   | L: u32, N: u32, D: u32, fps | L * N * D floats |
//! | GDMU   | L: u32, d_m: u32, fps       | L * d_m floats   |
//!
//! A music file may hold several GDMU records back to back; [`read_music_stream`]
//! returns them in order.
//!
//! JSON mirrors use the keys `format`, `frames`, `dancers`, `channels`, `fps`,
//! `poses` (nested `[L][N][151]`) for motion and `format`, `frames`, `dim`,
//! `fps`, `features` (nested `[L][d_m]`) for music.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroupMotion, MotionError, MusicTrack, POSE_DIM};

pub const MOTION_MAGIC: [u8; 4] = *b"GDM1";
pub const MUSIC_MAGIC: [u8; 4] = *b"GDMU";
const MOTION_HEADER: usize = 20;
const MUSIC_HEADER: usize = 16;

fn io_err(path: &Path, e: std::io::Error) -> MotionError {
    MotionError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn check_magic(b: &[u8], expected: [u8; 4]) -> Result<(), MotionError> {
    if b.len() < 4 {
        return Err(MotionError::Truncated { expected: 4, found: b.len() });
    }
    let found: [u8; 4] = b[..4].try_into().unwrap();
    if found != expected {
        return Err(MotionError::BadMagic { expected, found });
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32, MotionError> {
    u32::try_from(v).map_err(|_| MotionError::Invalid(format!("{what} = {v} does not fit in u32")))
}

fn floats(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn encode_motion(m: &GroupMotion) -> Result<Vec<u8>, MotionError> {
    let mut out = Vec::with_capacity(MOTION_HEADER + 4 * m.data().len());
    out.extend_from_slice(&MOTION_MAGIC);
    out.extend_from_slice(&to_u32(m.frames(), "L")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m.dancers(), "N")?.to_le_bytes());
    out.extend_from_slice(&(POSE_DIM as u32).to_le_bytes());
    out.extend_from_slice(&m.fps().to_le_bytes());
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_motion(b: &[u8]) -> Result<GroupMotion, MotionError> {
    check_magic(b, MOTION_MAGIC)?;
    if b.len() < MOTION_HEADER {
        return Err(MotionError::Truncated { expected: MOTION_HEADER, found: b.len() });
    }
    let (l, n, d) = (u32_at(b, 4) as usize, u32_at(b, 8) as usize, u32_at(b, 12) as usize);
    let fps = f32_at(b, 16);
    if d != POSE_DIM {
        return Err(MotionError::HeaderMismatch(format!("channel count {d}, expected {POSE_DIM}")));
    }
    let expected = l
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d * 4))
        .and_then(|x| x.checked_add(MOTION_HEADER))
        .ok_or_else(|| MotionError::HeaderMismatch(format!("header sizes overflow: {l} x {n}")))?;
    if b.len() < expected {
        return Err(MotionError::Truncated { expected, found: b.len() });
    }
    if b.len() > expected {
        return Err(MotionError::HeaderMismatch(format!(
            "{} trailing bytes after {l} x {n} frames",
            b.len() - expected
        )));
    }
    GroupMotion::new(l, n, fps, floats(&b[MOTION_HEADER..]))
}

pub fn encode_music(m: &MusicTrack) -> Result<Vec<u8>, MotionError> {
    let mut out = Vec::with_capacity(MUSIC_HEADER + 4 * m.data().len());
    out.extend_from_slice(&MUSIC_MAGIC);
    out.extend_from_slice(&to_u32(m.frames(), "L")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m.dim(), "d_m")?.to_le_bytes());
    out.extend_from_slice(&m.fps().to_le_bytes());
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Decode one GDMU record at the start of `b`; returns it and the bytes used.
fn decode_music_record(b: &[u8]) -> Result<(MusicTrack, usize), MotionError> {
    check_magic(b, MUSIC_MAGIC)?;
    if b.len() < MUSIC_HEADER {
        return Err(MotionError::Truncated { expected: MUSIC_HEADER, found: b.len() });
    }
    let (l, dm) = (u32_at(b, 4) as usize, u32_at(b, 8) as usize);
    let fps = f32_at(b, 12);
    let expected = l
        .checked_mul(dm)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(MUSIC_HEADER))
        .ok_or_else(|| MotionError::HeaderMismatch(format!("header sizes overflow: {l} x {dm}")))?;
    if b.len() < expected {
        return Err(MotionError::Truncated { expected, found: b.len() });
    }
    let track = MusicTrack::new(l, dm, fps, floats(&b[MUSIC_HEADER..expected]))?;
    Ok((track, expected))
}

pub fn decode_music(b: &[u8]) -> Result<MusicTrack, MotionError> {
    let (track, used) = decode_music_record(b)?;
    if used != b.len() {
        return Err(MotionError::HeaderMismatch(format!("{} trailing bytes after music record", b.len() - used)));
    }
    Ok(track)
}

/// Decode a sequence of concatenated GDMU records.
pub fn decode_music_stream(mut b: &[u8]) -> Result<Vec<MusicTrack>, MotionError> {
    let mut out = Vec::new();
    while !b.is_empty() {
        let (track, used) = decode_music_record(b)?;
        if let Some(first) = out.first().map(|t: &MusicTrack| (t.dim(), t.fps())) {
            if first != (track.dim(), track.fps()) {
                return Err(MotionError::HeaderMismatch("music records disagree on dim or fps".into()));
            }
        }
        out.push(track);
        b = &b[used..];
    }
    if out.is_empty() {
        return Err(MotionError::Truncated { expected: MUSIC_HEADER, found: 0 });
    }
    Ok(out)
}

pub fn write_motion(path: &Path, m: &GroupMotion) -> Result<(), MotionError> {
    fs::write(path, encode_motion(m)?).map_err(|e| io_err(path, e))
}

pub fn read_motion(path: &Path) -> Result<GroupMotion, MotionError> {
    decode_motion(&fs::read(path).map_err(|e| io_err(path, e))?)
}

pub fn write_music(path: &Path, m: &MusicTrack) -> Result<(), MotionError> {
    fs::write(path, encode_music(m)?).map_err(|e| io_err(path, e))
}

pub fn read_music(path: &Path) -> Result<MusicTrack, MotionError> {
    decode_music(&fs::read(path).map_err(|e| io_err(path, e))?)
}

pub fn read_music_stream(path: &Path) -> Result<Vec<MusicTrack>, MotionError> {
    decode_music_stream(&fs::read(path).map_err(|e| io_err(path, e))?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionJson {
    format: String,
    frames: usize,
    dancers: usize,
    channels: usize,
    fps: f32,
    poses: Vec<Vec<Vec<f32>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MusicJson {
    format: String,
    frames: usize,
    dim: usize,
    fps: f32,
    features: Vec<Vec<f32>>,
}

pub fn motion_to_json(m: &GroupMotion) -> String {
    let poses = (0..m.frames()).map(|l| (0..m.dancers()).map(|n| m.channels(l, n).to_vec()).collect()).collect();
    let j = MotionJson {
        format: "GDM1".into(),
        frames: m.frames(),
        dancers: m.dancers(),
        channels: POSE_DIM,
        fps: m.fps(),
        poses,
    };
    serde_json::to_string_pretty(&j).expect("motion serializes")
}

pub fn motion_from_json(text: &str) -> Result<GroupMotion, MotionError> {
    let j: MotionJson = serde_json::from_str(text).map_err(|e| MotionError::Json(e.to_string()))?;
    if j.format != "GDM1" {
        return Err(MotionError::Json(format!("format {:?}, expected \"GDM1\"", j.format)));
    }
    if j.channels != POSE_DIM {
        return Err(MotionError::HeaderMismatch(format!("channel count {}, expected {POSE_DIM}", j.channels)));
    }
    if j.poses.len() != j.frames
        || j.poses.iter().any(|f| f.len() != j.dancers || f.iter().any(|p| p.len() != POSE_DIM))
    {
        return Err(MotionError::HeaderMismatch("pose array does not match frames x dancers x channels".into()));
    }
    let data = j.poses.into_iter().flatten().flatten().collect();
    GroupMotion::new(j.frames, j.dancers, j.fps, data)
}

pub fn music_to_json(m: &MusicTrack) -> String {
    let j = MusicJson {
        format: "GDMU".into(),
        frames: m.frames(),
        dim: m.dim(),
        fps: m.fps(),
        features: (0..m.frames()).map(|l| m.frame(l).to_vec()).collect(),
    };
    serde_json::to_string_pretty(&j).expect("music serializes")
}

pub fn music_from_json(text: &str) -> Result<MusicTrack, MotionError> {
    let j: MusicJson = serde_json::from_str(text).map_err(|e| MotionError::Json(e.to_string()))?;
    if j.format != "GDMU" {
        return Err(MotionError::Json(format!("format {:?}, expected \"GDMU\"", j.format)));
    }
    if j.features.len() != j.frames || j.features.iter().any(|f| f.len() != j.dim) {
        return Err(MotionError::HeaderMismatch("feature array does not match frames x dim".into()));
    }
    MusicTrack::new(j.frames, j.dim, j.fps, j.features.into_iter().flatten().collect())
}
