use std::path::Path;

use serde::{Deserialize, Serialize};
use speech_swin::dsp::DspConfig;
use speech_swin::model::ModelConfig;
use speech_swin::train::TrainConfig;

use crate::CliError;

/// Everything a run depends on, loaded from a TOML file. Missing sections
/// and fields take the paper defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub dsp: DspConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            dsp: DspConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.dsp.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.n_mels != self.dsp.n_mels || self.model.frames != self.dsp.segment_frames {
            return Err(CliError::Config(format!(
                "model expects {}x{} inputs but the front end produces {}x{}",
                self.model.n_mels, self.model.frames, self.dsp.n_mels, self.dsp.segment_frames
            )));
        }
        if self.model.in_channels != 1 {
            return Err(CliError::Config("the front end produces single-channel input".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
