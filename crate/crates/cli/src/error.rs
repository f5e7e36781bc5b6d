use std::fmt;

use gdance::bench::BenchError;
use gdance::diffusion::DiffusionError;
use gdance::metrics::MetricsError;
use gdance::model::ModelError;
use gdance::motion::MotionError;

/// Error classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<MotionError> for CliError {
    fn from(e: MotionError) -> Self {
        let m = e.to_string();
        match e {
            MotionError::Invalid(_) | MotionError::Synth(_) => CliError::Config(m),
            MotionError::DegenerateRotation(_) | MotionError::Numerics(_) => CliError::Numeric(m),
            _ => CliError::Io(m),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let m = e.to_string();
        match e {
            ModelError::Config(_) | ModelError::Shape(_) | ModelError::Temporal(_) | ModelError::Spatial(_) => {
                CliError::Config(m)
            }
            ModelError::Checkpoint(_) => CliError::Io(m),
            ModelError::Motion(e) => e.into(),
            ModelError::Diffusion(e) => e.into(),
            ModelError::NonFinite { .. } | ModelError::Numerics(_) => CliError::Numeric(m),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        let m = e.to_string();
        match e {
            DiffusionError::Invalid(_) | DiffusionError::Shape(_) => CliError::Config(m),
            _ => CliError::Numeric(m),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Motion(e) => e.into(),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Model(e) => e.into(),
            e => CliError::Config(e.to_string()),
        }
    }
}
