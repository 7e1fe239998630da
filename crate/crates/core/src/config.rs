//! Run configuration: one nested TOML document with `section.key = value`
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DecodeConfig;
use crate::objective::LossConfig;
use crate::perturb::PerturbConfig;
use crate::reward::DEFAULT_GAMMA;
use crate::sift::FilterConfig;
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Size of the image-free biased corpus.
    pub n_biased: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            n_biased: 4000,
            epochs: 150,
            lr: 2.0,
        }
    }
}

/// Which policy serves as reference for the image-free reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextReference {
    /// Same reference as the image-conditioned reward.
    Scoring,
    /// The warm-up checkpoint.
    Warmup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub gamma: f64,
    pub text_reference: TextReference,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            gamma: DEFAULT_GAMMA,
            text_reference: TextReference::Scoring,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiftConfig {
    /// Candidates sampled per (image, prompt).
    pub k: usize,
    pub temperature: f64,
    pub filter: FilterConfig,
}

impl Default for SiftConfig {
    fn default() -> Self {
        SiftConfig {
            k: 5,
            temperature: 0.7,
            filter: FilterConfig::default(),
        }
    }
}

/// Where preference pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// Sampled from the current policy and sifted each round.
    SelfGenerated,
    /// Built once from grounded captions and reused every round.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub rounds: usize,
    pub epochs_per_round: usize,
    /// Preference minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub lr: f64,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub warmup: bool,
    pub pair_source: PairSource,
    /// Fraction of training (image, prompt) items used for preference data.
    pub data_fraction: f64,
    /// Backtracking halvings allowed per step.
    pub max_halvings: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            rounds: 2,
            epochs_per_round: 2,
            batch_size: 16,
            lr: 1.0,
            sft_epochs: 20,
            sft_lr: 5.0,
            warmup: true,
            pair_source: PairSource::SelfGenerated,
            data_fraction: 1.0,
            max_halvings: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub reward: RewardConfig,
    pub sift: SiftConfig,
    pub perturb: PerturbConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: DecodeConfig,
    /// Worker threads for sampling and decoding; 0 lets the runtime decide.
    /// Outputs do not depend on it.
    pub threads: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.rounds == 0 || t.epochs_per_round == 0 {
            return Err(Error::Config("rounds and epochs_per_round must be >= 1".into()));
        }
        if !(t.lr > 0.0 && t.sft_lr > 0.0 && self.pretrain.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(t.data_fraction > 0.0 && t.data_fraction <= 1.0) {
            return Err(Error::Config("data_fraction must lie in (0, 1]".into()));
        }
        if self.sift.k < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", self.sift.k)));
        }
        if !(self.sift.temperature > 0.0) || !(self.eval.temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.reward.gamma >= 0.0) {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if self.pretrain.n_biased == 0 {
            return Err(Error::Config("n_biased must be >= 1".into()));
        }
        if self.train.seed > i64::MAX as u64 || self.eval.seed > i64::MAX as u64 {
            return Err(Error::Config("seeds must fit in a signed 64-bit integer".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `"default"` selects the built-in configuration; anything else is a path.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == "default" {
            return Ok(RunConfig::default());
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    /// Applies a `section.key=value` override; the value is parsed as a TOML
    /// literal, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key:?} does not name a config field")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
                table.insert((*part).to_string(), value.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config section in {key:?}")))?;
        }
        let updated: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}
