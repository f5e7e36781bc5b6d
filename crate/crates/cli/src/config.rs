//! Run configuration: one JSON document layered over built-in defaults.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use gdance::bench::ScalingConfig;
use gdance::diffusion::StreamConfig;
use gdance::model::{ModelConfig, TrainConfig};
use gdance::motion::SynthConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// One noise level for the whole sequence.
    Offline,
    /// Staggered segment levels, the schedule the stream engine runs.
    #[default]
    Streaming,
}

impl FromStr for SampleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "offline" => Ok(SampleMode::Offline),
            "streaming" => Ok(SampleMode::Streaming),
            other => Err(format!("unknown mode {other:?} (expected offline or streaming)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub mode: SampleMode,
    /// Truncate the music to this many frames.
    pub frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub sample: SampleConfig,
    pub stream: StreamConfig,
    pub bench: ScalingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig { d: 32, segment_len: 15, ..ModelConfig::default() };
        model.temporal.layers = 2;
        Self {
            seed: None,
            model,
            train: TrainConfig { steps: 2000, lr: 5e-4, tns: true },
            synth: SynthConfig { frames: 60, ..SynthConfig::default() },
            sample: SampleConfig::default(),
            stream: StreamConfig::default(),
            bench: ScalingConfig::default(),
        }
    }
}

/// Recursively overlay `over` onto `base`. Objects merge key by key; any
/// other value replaces. A one-key object overridden by a different single
/// key is replaced outright, which is how enum variants such as
/// `{"fraction": 0.5}` -> `{"count": 2}` switch.
fn merge(base: &mut Value, over: Value) {
    let switch = matches!((&*base, &over), (Value::Object(b), Value::Object(o))
        if b.len() == 1 && o.len() == 1 && b.keys().next() != o.keys().next());
    if switch {
        *base = over;
        return;
    }
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    /// Parse a JSON document; keys it omits keep their defaults.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let over: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        if !over.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, over);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_json(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    e => e,
                })
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.synth.validate().map_err(|e| CliError::Config(format!("synth: {e}")))?;
        if self.synth.music_dim != self.model.music_dim {
            return Err(CliError::Config(format!(
                "synth.music_dim ({}) must equal model.music_dim ({})",
                self.synth.music_dim, self.model.music_dim
            )));
        }
        if self.stream.window == 0 {
            return Err(CliError::Config("stream.window must be at least 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(CliError::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        if self.sample.frames == Some(0) {
            return Err(CliError::Config("sample.frames must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
