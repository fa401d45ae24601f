//! Versioned experiment configuration.

use std::fs;
use std::path::Path;

use georewrite_core::datasets::DataConfig;
use georewrite_core::embedder::{EncoderConfig, TrainSchedule};
use georewrite_core::policy::{PolicyConfig, SftConfig};
use georewrite_core::ppo::PpoConfig;
use georewrite_core::reward::RewardConfig;
use georewrite_core::rng::derive_seed;
use georewrite_core::world::WorldParams;
use georewrite_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// World shape. Its seed comes from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub world_size_m: f64,
    pub branching: Vec<usize>,
    pub alias_rate: f64,
    pub stations_per_axis: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        let p = WorldParams::default();
        WorldSection {
            world_size_m: p.world_size_m,
            branching: p.branching,
            alias_rate: p.alias_rate,
            stations_per_axis: p.stations_per_axis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub top_k: usize,
    /// Fixed in-context rewriting exemplars placed in every prompt.
    pub exemplars: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            top_k: 10,
            exemplars: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Address pairs in the embedding-distance scatter.
    pub correlation_pairs: usize,
    /// Evaluate only the first n samples of each test set; 0 means all.
    pub limit: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            correlation_pairs: 2000,
            limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub world: WorldSection,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub embedder: TrainSchedule,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            world: WorldSection::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            embedder: TrainSchedule::default(),
            retrieval: RetrievalSection::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            ppo: PpoConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        // Check the version first so an old file fails with a clear message
        // rather than a field-level complaint.
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match raw.get("schema_version").and_then(toml::Value::as_integer) {
            Some(v) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Config("missing integer `schema_version`".into())),
        }
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world_params().validate()?;
        self.data.validate()?;
        self.policy.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        let e = &self.encoder;
        if e.dim == 0 || e.heads == 0 || !e.dim.is_multiple_of(e.heads) || e.max_positions == 0 {
            return Err(Error::Config(
                "encoder needs dim > 0 divisible by heads and max_positions > 0".into(),
            ));
        }
        let s = &self.embedder;
        if s.batch_size == 0
            || s.phase1_epochs + s.phase2_epochs == 0
            || !(s.lr_phase1 > 0.0 && s.lr_phase2 > 0.0)
        {
            return Err(Error::Config(
                "embedder schedule needs batch_size, epochs and learning rates > 0".into(),
            ));
        }
        if self.sft.batch_size == 0 || !(self.sft.lr > 0.0) {
            return Err(Error::Config("sft needs batch_size > 0 and lr > 0".into()));
        }
        if self.retrieval.top_k == 0 {
            return Err(Error::Config("retrieval.top_k must be >= 1".into()));
        }
        if self.eval.correlation_pairs < 2 {
            return Err(Error::Config("eval.correlation_pairs must be >= 2".into()));
        }
        Ok(())
    }

    pub fn world_params(&self) -> WorldParams {
        WorldParams {
            world_size_m: self.world.world_size_m,
            branching: self.world.branching.clone(),
            alias_rate: self.world.alias_rate,
            stations_per_axis: self.world.stations_per_axis,
            seed: self.stage_seed("world"),
        }
    }

    /// Seed of one stochastic stage, derived from the master seed.
    pub fn stage_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }
}
