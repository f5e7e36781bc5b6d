use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use gdance::bench::run_scaling;
use gdance::diffusion::{make_schedule, sample_offline, sample_tns, stream_generate, Condition, Emitted};
use gdance::metrics::evaluate;
use gdance::model::{
    init_params, loss_csv, read_checkpoint, train_loop, write_checkpoint, Decoder, ModelConfig, TrainSample,
};
use gdance::motion::io::{read_motion, read_music, write_motion, write_music};
use gdance::motion::{forward_kinematics, synth_dataset, GroupMotion, MusicTrack, Skeleton, POSE_DIM};
use gdance::numerics::{ParamStore, RngStream, Tensor};
use gdance::temporal::SwapCode;

use crate::config::{RunConfig, SampleMode};
use crate::error::CliError;

pub const MOTION_EXT: &str = "gdm";
pub const MUSIC_EXT: &str = "gdmu";
/// Model config written next to a checkpoint.
pub const MODEL_JSON: &str = "model.json";

/// Print to stdout; a closed pipe (`gdance config | head`) is not an error.
pub fn print_stdout(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

pub fn synth(cfg: &RunConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    let samples = synth_dataset(&cfg.synth, seed)?;
    create_dir(out)?;
    samples.par_iter().enumerate().try_for_each(|(i, s)| -> Result<(), CliError> {
        write_motion(&out.join(format!("seq_{i:04}.{MOTION_EXT}")), &s.motion)?;
        write_music(&out.join(format!("seq_{i:04}.{MUSIC_EXT}")), &s.music)?;
        Ok(())
    })?;
    eprintln!(
        "wrote {} sequences ({} dancers x {} frames) to {}",
        samples.len(),
        cfg.synth.dancers,
        cfg.synth.frames,
        out.display()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<(GroupMotion, MusicTrack)>, CliError> {
    let motions = files_with_ext(dir, MOTION_EXT)?;
    if motions.is_empty() {
        return Err(CliError::Io(format!("{}: no .{MOTION_EXT} files", dir.display())));
    }
    motions
        .par_iter()
        .map(|p| {
            let music = p.with_extension(MUSIC_EXT);
            if !music.exists() {
                return Err(CliError::Io(format!("{}: missing paired music file", music.display())));
            }
            Ok((read_motion(p)?, read_music(&music)?))
        })
        .collect()
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let pairs = load_dataset(data)?;
    let samples = pairs
        .iter()
        .map(|(m, s)| {
            if m.dancers() != cfg.model.dancers {
                return Err(CliError::Config(format!(
                    "data has {} dancers but model.dancers is {}",
                    m.dancers(),
                    cfg.model.dancers
                )));
            }
            if s.dim() != cfg.model.music_dim {
                return Err(CliError::Config(format!(
                    "music has {} features but model.music_dim is {}",
                    s.dim(),
                    cfg.model.music_dim
                )));
            }
            Ok(TrainSample::prepare(m, s)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let rng = RngStream::new(seed);
    let init = init_params(&cfg.model, &rng.derive(0))?;
    eprintln!("training {} parameters on {} sequences for {} steps", init.numel(), samples.len(), cfg.train.steps);
    let every = (cfg.train.steps / 20).max(1);
    let report = train_loop(&samples, &cfg.model, &cfg.train, init, &rng.derive(1), |step, l| {
        if step % every == 0 || step == 1 {
            eprintln!("step {step:>6}  total {:.5}  simple {:.5}  contact {:.5}", l.total, l.simple, l.contact);
        }
    })?;
    create_dir(out)?;
    write_checkpoint(&out.join("checkpoint.gdck"), &report.params)?;
    write_text(&out.join("losses.csv"), &loss_csv(&report.losses))?;
    write_text(&out.join(MODEL_JSON), &serde_json::to_string_pretty(&cfg.model).expect("model config serializes"))?;
    eprintln!(
        "done in {:.1} s; mean total loss {:.5} (first 10) -> {:.5} (last 10)",
        report.elapsed.as_secs_f64(),
        report.head_mean(10),
        report.tail_mean(10)
    );
    Ok(())
}

/// Model config stored beside `checkpoint`, if any.
pub fn sibling_model_config(checkpoint: &Path) -> Result<Option<ModelConfig>, CliError> {
    let path = checkpoint.with_file_name(MODEL_JSON);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_decoder(cfg: &RunConfig, checkpoint: &Path) -> Result<Decoder, CliError> {
    let params = read_checkpoint(checkpoint)?;
    let expected = init_params(&cfg.model, &RngStream::new(0))?;
    check_params(&expected, &params).map_err(|m| CliError::Config(format!("{}: {m}", checkpoint.display())))?;
    Ok(Decoder { cfg: cfg.model.clone(), params })
}

fn check_params(expected: &ParamStore, got: &ParamStore) -> Result<(), String> {
    for (name, t) in expected.iter() {
        match got.get(name) {
            None => return Err(format!("checkpoint lacks parameter {name}")),
            Some(g) if g.shape() != t.shape() => {
                return Err(format!("parameter {name} has shape {:?}, model config expects {:?}", g.shape(), t.shape()))
            }
            _ => {}
        }
    }
    if got.len() != expected.len() {
        return Err(format!("checkpoint has {} parameters, model config expects {}", got.len(), expected.len()));
    }
    Ok(())
}

fn load_music(cfg: &RunConfig, path: &Path) -> Result<MusicTrack, CliError> {
    let music = read_music(path)?;
    if music.dim() != cfg.model.music_dim {
        return Err(CliError::Config(format!(
            "{}: {} features, model.music_dim is {}",
            path.display(),
            music.dim(),
            cfg.model.music_dim
        )));
    }
    match cfg.sample.frames {
        Some(f) if f < music.frames() => Ok(music.slice_frames(0, f)?),
        _ => Ok(music),
    }
}

pub fn sample(cfg: &RunConfig, checkpoint: &Path, music: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let decoder = load_decoder(cfg, checkpoint)?;
    let track = load_music(cfg, music)?;
    let schedule = make_schedule(cfg.model.steps, cfg.model.schedule)?;
    let (music_t, swap) = (track.to_tensor(), SwapCode::identity(cfg.model.dancers));
    let cond = Condition { music: &music_t, swap: &swap };
    let rng = RngStream::new(seed);
    let n = cfg.model.dancers;
    let result = match cfg.sample.mode {
        SampleMode::Offline => sample_offline(&decoder, &cond, n, POSE_DIM, &schedule, &rng)?,
        SampleMode::Streaming => {
            sample_tns(&decoder, &cond, n, POSE_DIM, cfg.model.segment_len, cfg.stream.window, &schedule, &rng)?
        }
    };
    write_motion(out, &GroupMotion::from_tensor(&result.x, track.fps())?)?;
    eprintln!(
        "sampled {} frames x {n} dancers in {:.2} s ({} model calls) -> {}",
        track.frames(),
        result.elapsed.as_secs_f64(),
        result.model_calls,
        out.display()
    );
    Ok(())
}

pub fn stream(cfg: &RunConfig, checkpoint: &Path, music: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let decoder = load_decoder(cfg, checkpoint)?;
    let track = load_music(cfg, music)?;
    let schedule = make_schedule(cfg.model.steps, cfg.model.schedule)?;
    create_dir(out)?;
    let seg = cfg.model.segment_len;
    let source: Vec<Tensor> = (0..track.frames())
        .step_by(seg)
        .map(|start| track.slice_frames(start, seg.min(track.frames() - start)).map(|m| m.to_tensor()))
        .collect::<Result<_, _>>()?;
    let mut emitted: Vec<Emitted> = Vec::new();
    let mut write_err = None;
    let fps = track.fps();
    stream_generate(
        &decoder,
        source.into_iter().map(Ok),
        SwapCode::identity(cfg.model.dancers),
        cfg.model.dancers,
        POSE_DIM,
        &schedule,
        cfg.stream.clone(),
        RngStream::new(seed),
        |e| {
            eprintln!(
                "segment {:>3}  frames {:>5}..{:<5}  resident {} ticks  latency {:.1} ms",
                e.index,
                e.start_frame,
                e.start_frame + e.x.shape()[0],
                e.ticks_resident,
                e.latency.as_secs_f64() * 1e3
            );
            let path = out.join(format!("segment_{:04}.{MOTION_EXT}", e.index));
            if let Err(err) =
                GroupMotion::from_tensor(&e.x, fps).map_err(CliError::from).and_then(|m| Ok(write_motion(&path, &m)?))
            {
                write_err.get_or_insert(err);
            }
            emitted.push(e);
            Ok(())
        },
    )?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut log = String::from("index,start_frame,frames,ticks_resident\n");
    let mut parts = Vec::with_capacity(emitted.len());
    for e in &emitted {
        log.push_str(&format!("{},{},{},{}\n", e.index, e.start_frame, e.x.shape()[0], e.ticks_resident));
        parts.push(GroupMotion::from_tensor(&e.x, fps)?);
    }
    write_text(&out.join("segments.csv"), &log)?;
    write_motion(&out.join(format!("full.{MOTION_EXT}")), &GroupMotion::concat_frames(&parts)?)?;
    eprintln!("streamed {} segments to {}", emitted.len(), out.display());
    Ok(())
}

fn load_motions(path: &Path) -> Result<Vec<GroupMotion>, CliError> {
    let files = if path.is_dir() { files_with_ext(path, MOTION_EXT)? } else { vec![path.to_path_buf()] };
    if files.is_empty() {
        return Err(CliError::Io(format!("{}: no .{MOTION_EXT} files", path.display())));
    }
    files.par_iter().map(|p| Ok(read_motion(p)?)).collect()
}

pub fn eval(generated: &Path, reference: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let (gen, reference) = (load_motions(generated)?, load_motions(reference)?);
    let report = evaluate(&gen, &reference, &Skeleton::default())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    eprint!("{}", report.table());
    match out {
        Some(p) => write_text(p, &json),
        None => {
            print_stdout(&json);
            Ok(())
        }
    }
}

pub fn bench(cfg: &RunConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    create_dir(out)?;
    let sizes = cfg.bench.sizes.clone();
    let report = run_scaling(&cfg.model, &cfg.bench, &RngStream::new(seed), |i| {
        eprintln!("size {} done", sizes[i]);
    })?;
    write_text(&out.join("scaling.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write_text(&out.join("scaling.csv"), &report.csv())?;
    write_text(&out.join("scaling.dat"), &report.plot_data())?;
    for a in &report.advisories {
        eprintln!("advisory: {a}");
    }
    eprintln!(
        "growth exponent vs {:?}: decoupled {:.3}, dense {}",
        report.axis,
        report.decoupled_exponent,
        report.dense_exponent.map_or("skipped".into(), |e| format!("{e:.3}"))
    );
    Ok(())
}

#[derive(Serialize)]
struct JointExport {
    fps: f32,
    frames: usize,
    dancers: usize,
    joint_names: Vec<String>,
    /// `[frame][dancer][joint] = [x, y, z]`, z up.
    positions: Vec<Vec<Vec<[f64; 3]>>>,
}

pub fn export_json(motion: &Path, out: &Path) -> Result<(), CliError> {
    let m = read_motion(motion)?;
    let sk = Skeleton::default();
    let positions = (0..m.frames())
        .map(|l| {
            (0..m.dancers())
                .map(|n| Ok(forward_kinematics(&m.pose(l, n), &sk)?.to_vec()))
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let export = JointExport {
        fps: m.fps(),
        frames: m.frames(),
        dancers: m.dancers(),
        joint_names: (0..gdance::motion::JOINTS).map(|j| sk.joint_name(j).to_string()).collect(),
        positions,
    };
    write_text(out, &serde_json::to_string(&export).expect("export serializes"))
}
