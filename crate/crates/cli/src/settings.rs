use std::path::Path;

use aec_core::harness::{load_key_values, EngineConfig};
use aec_core::train::{OptimizerConfig, OptimizerKind};
use aec_core::unet::{NetTopology, ResidualConfig};
use aec_core::FREQ_BINS;

use crate::UsageError;

/// Training knobs shared by `train` and `search`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub encoders: usize,
    pub base_filters: usize,
    pub residual: ResidualConfig,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub frames_per_sample: usize,
    pub freq_bins: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = NetTopology::paper();
        Self {
            encoders: t.num_encoders,
            base_filters: t.base_filters,
            residual: t.residual,
            depth: t.depth,
            epochs: 20,
            batch_size: 16,
            frames_per_sample: 8,
            freq_bins: FREQ_BINS,
        }
    }
}

impl TrainSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, UsageError> {
        fn num(key: &str, value: &str) -> Result<usize, UsageError> {
            value
                .parse()
                .map_err(|_| UsageError(format!("bad value '{value}' for '{key}'")))
        }
        match key {
            "encoders" => self.encoders = num(key, value)?,
            "base_filters" => self.base_filters = num(key, value)?,
            "residual" => self.residual = value.parse().map_err(|e| UsageError(format!("{e}")))?,
            "depth" => self.depth = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "frames_per_sample" => self.frames_per_sample = num(key, value)?,
            "freq_bins" => self.freq_bins = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything a config file can set. Flags given on the command line are
/// applied afterwards and win.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub engine: EngineConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
    pub seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            optimizer: OptimizerConfig::new(OptimizerKind::Nadam, 1e-4),
            train: TrainSettings::default(),
            seed: 0,
        }
    }
}

impl Settings {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let wrap = |e: aec_core::Error| UsageError(e.to_string());
        if key == "seed" {
            self.seed = value
                .parse()
                .map_err(|_| UsageError(format!("bad value '{value}' for 'seed'")))?;
            return Ok(());
        }
        if self.engine.set(key, value).map_err(wrap)?
            || self.optimizer.set(key, value).map_err(wrap)?
            || self.train.set(key, value)?
        {
            return Ok(());
        }
        Err(UsageError(format!("unknown config key '{key}'")))
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut s = Self::default();
        if let Some(path) = path {
            let pairs = load_key_values(path).map_err(|e| match e {
                aec_core::Error::Format(msg) => anyhow::Error::new(UsageError(msg)),
                other => other.into(),
            })?;
            for (k, v) in pairs {
                s.apply(&k, &v)
                    .map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))?;
            }
        }
        Ok(s)
    }
}
