//! Run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datastore::{AvailabilityMask, Splits, VariableUniverse};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::pipeline::SynthConfig;
use crate::trainer::{SubsetPolicy, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 512,
            val: 64,
            test: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub synth: SynthConfig,
    pub splits: SplitSizes,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            synth: SynthConfig::default(),
            splits: SplitSizes::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Subsets in sweep order, as `SSH+U+V` labels.
    pub masks: Vec<String>,
    pub variants: Vec<Variant>,
    /// Number of test samples whose fields `--dump-fields` writes out.
    pub dump_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            masks: vec!["SSH".into(), "SSH+U+V".into(), "SSH+U+V+B".into()],
            variants: vec![Variant::Full, Variant::NoScp],
            dump_samples: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: PathBuf,
    pub runs: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data: PathBuf::from("data"),
            runs: PathBuf::from("runs"),
        }
    }
}

/// Top-level configuration. The top-level `seed` is authoritative: it is
/// copied into the generator, policy, and training seeds by [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub policy: SubsetPolicy,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            dataset: DatasetSection::default(),
            model: ModelConfig::default(),
            policy: SubsetPolicy::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        };
        cfg.resolve();
        cfg
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.resolve();
    }

    pub fn resolve(&mut self) {
        self.dataset.synth.seed = self.seed;
        self.policy.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn splits(&self) -> Splits {
        let s = &self.dataset.splits;
        Splits::contiguous(s.train, s.val, s.test)
    }

    pub fn eval_masks(&self, universe: &VariableUniverse) -> Result<Vec<AvailabilityMask>> {
        self.eval.masks.iter().map(|m| AvailabilityMask::parse(universe, m)).collect()
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        let synth = &self.dataset.synth;
        synth.validate()?;
        let factor = 1usize << self.model.stages;
        if synth.height % factor != 0 || synth.width % factor != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} must be divisible by 2^stages = {factor} (stages = {})",
                synth.height, synth.width, self.model.stages
            )));
        }
        let s = &self.dataset.splits;
        if s.train == 0 || s.test == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        if s.train + s.val + s.test != synth.steps {
            return Err(Error::Config(format!(
                "splits {}+{}+{} do not add up to the {} generated steps",
                s.train, s.val, s.test, synth.steps
            )));
        }
        let universe = VariableUniverse::default();
        self.policy.validate(&universe)?;
        self.train.validate()?;
        self.eval_masks(&universe)?;
        crate::model::Model::new(&self.model, universe.len()).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"base_chanels": 8}}"#).is_err());
    }

    #[test]
    fn top_level_seed_wins() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "train": {"seed": 3}}"#).unwrap();
        assert_eq!((cfg.train.seed, cfg.policy.seed, cfg.dataset.synth.seed), (7, 7, 7));
    }

    #[test]
    fn indivisible_grid_names_the_constraint() {
        let cfg = RunConfig::from_json(r#"{"dataset": {"synth": {"height": 50}}}"#).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible by 2^stages"), "{msg}");
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
