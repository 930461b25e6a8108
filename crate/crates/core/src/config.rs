//! Run configuration read from TOML; every section has defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{CropParams, PairRule, SynthParams};
use crate::error::{Error, Result};
use crate::metrics::DiceConvention;
use crate::roi_mask::MaskParams;
use crate::training::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub params: SynthParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { train_pairs: 64, test_pairs: 32, params: SynthParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub crop: CropParams,
    pub pairs: PairRule,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { crop: CropParams::default(), pairs: PairRule::default(), train_pairs: 300, test_pairs: 900 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct MaskSection {
    pub moving: MaskParams,
    pub fixed: MaskParams,
}


#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub dice_convention: DiceConvention,
}

/// Inputs of a command. Relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Raw dataset root for `build-dataset`.
    pub src: Option<PathBuf>,
    /// Dataset root holding the manifests.
    pub data: Option<PathBuf>,
    /// Manifest file name inside `data`.
    pub manifest: Option<String>,
    /// Stage 1 checkpoint.
    pub agnet: Option<PathBuf>,
    /// Stage 2 checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub fixed: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub device: String,
    pub synth: SynthSection,
    pub dataset: DatasetSection,
    pub masks: MaskSection,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 3407,
            device: "cpu".into(),
            synth: SynthSection::default(),
            dataset: DatasetSection::default(),
            masks: MaskSection::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Propagates the top-level seed into both training sections.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("device {:?} is not available; only \"cpu\" is supported", self.device)));
        }
        self.synth.params.check()?;
        self.masks.moving.check()?;
        self.masks.fixed.check()?;
        self.pretrain.check()?;
        self.train.check()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::MambaMode;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default().with_seed(11);
        c.train.ablation.m3rm = MambaMode::Uni;
        c.masks.fixed.kernel = (3, 7);
        c.paths.data = Some("runs/data".into());
        c.paths.manifest = Some("test.tsv".into());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_and_errors() {
        let c = RunConfig::parse("[train]\nepochs = 3\n[train.ablation]\nmdfe = \"none\"\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.ablation.mdfe, MambaMode::None);
        assert!(c.train.ablation.roi_mask);
        assert!(RunConfig::parse("[train]\nepochs = 0\n").is_err());
        assert!(RunConfig::parse("bogus = 1\n").is_err());
        assert!(RunConfig::parse("device = \"cuda\"\n").is_err());
        assert!(RunConfig::parse("[train\n").is_err());
    }
}
