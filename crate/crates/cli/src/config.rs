use std::path::{Path, PathBuf};

use freqmrn::data::SynthKind;
use freqmrn::losses::LossConfig;
use freqmrn::model::ModelConfig;
use freqmrn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs, resolved from defaults, the config file and
/// command-line flags (later wins).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory for `train`.
    pub train_dir: Option<PathBuf>,
    /// Separate validation directory; otherwise `train.val_fraction` of
    /// the training sequences is held out.
    pub val_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub frames_ms: Vec<f64>,
    pub stride: usize,
    /// History length for evaluation windows; defaults to `model.history`.
    pub history: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            frames_ms: vec![80.0, 400.0, 560.0, 1000.0],
            stride: 10,
            history: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub kind: SynthKind,
    pub amplitude: f64,
    pub frequency: f64,
    pub frames: usize,
    pub frame_rate: f64,
    pub count: usize,
    /// `"synthetic"` (star skeleton below) or `"h36m"` (bundled 22-joint
    /// layout).
    pub skeleton: String,
    pub chains: usize,
    pub joints_per_chain: usize,
    pub bone_length: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            kind: SynthKind::Sinusoid,
            amplitude: 100.0,
            frequency: 1.0,
            frames: 60,
            frame_rate: 25.0,
            count: 8,
            skeleton: "synthetic".into(),
            chains: 1,
            joints_per_chain: 4,
            bone_length: 100.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> freqmrn::Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.eval.stride == 0 {
            return Err(freqmrn::Error::Config("eval.stride must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.model.blocks(), 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nlatent = 8\nwidth = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
        let c: RunConfig = toml::from_str("seed = 4\n[train]\nepochs = 2\n").unwrap();
        assert_eq!((c.seed, c.train.epochs, c.train.lr), (4, 2, 0.005));
    }
}
