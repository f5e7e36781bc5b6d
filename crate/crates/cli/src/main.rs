mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, SampleMode};
use error::CliError;

/// Group dance generation: synthetic data, training, offline and streaming
/// sampling, evaluation and scaling benchmarks.
///
/// Every command reads an optional JSON config (`--config`); keys it omits
/// keep built-in defaults, and the flags below override both. Exit codes:
/// 2 bad config or arguments, 3 file errors, 4 numeric failures.
/// GDANCE_THREADS sets the worker pool size.
#[derive(Parser)]
#[command(name = "gdance", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config layered over the defaults (print them with `gdance config`)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Random seed; required by synth, train, sample and stream unless the config sets one
    #[arg(long)]
    seed: Option<u64>,
    /// Group size, overrides model.dancers and synth.dancers [default: 3]
    #[arg(long)]
    dancers: Option<usize>,
    /// Sequence length in frames, overrides synth.frames and sample.frames [default: 60]
    #[arg(long)]
    frames: Option<usize>,
    /// Music attention half-width, overrides model.temporal.window [default: 30]
    #[arg(long)]
    window: Option<usize>,
    /// Segments in flight while streaming, overrides stream.window [default: 4]
    #[arg(long)]
    segments: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as JSON
    Config {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic dataset of paired motion (.gdm) and music (.gdmu) files
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.gdck, losses.csv and model.json
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth`
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate one group motion for a music file
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        music: PathBuf,
        /// Output motion file
        #[arg(long, short)]
        out: PathBuf,
        /// Noise schedule across the sequence, overrides sample.mode [default: streaming]
        #[arg(long)]
        mode: Option<SampleMode>,
    },
    /// Stream a music file segment by segment; writes one file per segment
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        music: PathBuf,
        /// Output directory
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score generated motions against references
    Eval {
        /// Motion file or directory of .gdm files
        #[arg(long)]
        generated: PathBuf,
        /// Motion file or directory of .gdm files
        #[arg(long)]
        reference: PathBuf,
        /// JSON report path [default: stdout]
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Time the model against a dense joint-attention baseline over growing sizes
    Bench {
        #[command(flatten)]
        common: Common,
        /// Output directory for scaling.json, scaling.csv and scaling.dat
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write forward-kinematics joint positions of a motion file as JSON
    ExportJson {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn resolve(common: &Common, checkpoint: Option<&std::path::Path>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(model) = checkpoint.map(commands::sibling_model_config).transpose()?.flatten() {
        cfg.model = model;
    }
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(n) = common.dancers {
        cfg.model.dancers = n;
        cfg.synth.dancers = n;
    }
    if let Some(f) = common.frames {
        cfg.synth.frames = f;
        cfg.sample.frames = Some(f);
    }
    if let Some(w) = common.window {
        cfg.model.temporal.window = w;
    }
    if let Some(w) = common.segments {
        cfg.stream.window = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed(cfg: &RunConfig) -> Result<u64, CliError> {
    cfg.seed.ok_or_else(|| CliError::Config("a seed is required: pass --seed or set \"seed\" in the config".into()))
}

fn init_threads(default: usize) -> Result<(), CliError> {
    let threads = match std::env::var("GDANCE_THREADS") {
        Ok(v) => {
            v.parse::<usize>().map_err(|_| CliError::Config(format!("GDANCE_THREADS must be a number, got {v:?}")))?
        }
        Err(_) => default,
    };
    // A second init in the same process is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Config { common } => {
            commands::print_stdout(&resolve(&common, None)?.to_json());
            Ok(())
        }
        Command::Synth { common, out } => {
            init_threads(0)?;
            let cfg = resolve(&common, None)?;
            commands::synth(&cfg, &out, seed(&cfg)?)
        }
        Command::Train { common, data, out } => {
            init_threads(0)?;
            let cfg = resolve(&common, None)?;
            commands::train(&cfg, &data, &out, seed(&cfg)?)
        }
        Command::Sample { common, checkpoint, music, out, mode } => {
            let mut cfg = resolve(&common, Some(&checkpoint))?;
            if let Some(m) = mode {
                cfg.sample.mode = m;
            }
            commands::sample(&cfg, &checkpoint, &music, &out, seed(&cfg)?)
        }
        Command::Stream { common, checkpoint, music, out } => {
            let cfg = resolve(&common, Some(&checkpoint))?;
            commands::stream(&cfg, &checkpoint, &music, &out, seed(&cfg)?)
        }
        Command::Eval { generated, reference, out } => {
            init_threads(0)?;
            commands::eval(&generated, &reference, out.as_deref())
        }
        Command::Bench { common, out } => {
            init_threads(1)?;
            let cfg = resolve(&common, None)?;
            commands::bench(&cfg, &out, cfg.seed.unwrap_or(0))
        }
        Command::ExportJson { motion, out } => commands::export_json(&motion, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gdance: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
