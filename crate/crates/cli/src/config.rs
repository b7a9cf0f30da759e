//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lkmerge::{
    CurriculumConfig, EnvConfig, InitialSceneParams, NetworkConfig, RewardWeights, RoadGeometry,
    SimConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Other cars in every evaluation scene.
    pub n_cars: u32,
    pub threads: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_cars: 50,
            threads: 1,
        }
    }
}

/// Everything a run depends on. Top-level scalars come first so the TOML
/// encoding stays valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub max_level: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub sim: SimConfig,
    pub scene: InitialSceneParams,
    pub road: RoadGeometry,
    pub reward: RewardWeights,
    pub train: TrainConfig,
    /// Per-level replacements of `[train]`, keyed by level number.
    pub level_train: BTreeMap<String, TrainConfig>,
    pub network: NetworkConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = CurriculumConfig::default();
        Self {
            seed: c.seed,
            max_level: c.max_level,
            out_dir: None,
            sim: c.env.sim,
            scene: c.env.scene,
            road: c.env.road,
            reward: c.env.reward,
            train: c.train,
            level_train: BTreeMap::new(),
            network: c.network,
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config encodes as TOML")
    }

    fn level_overrides(&self) -> Result<BTreeMap<u8, TrainConfig>, ConfigError> {
        self.level_train
            .iter()
            .map(|(k, t)| {
                let level = k.parse::<u8>().ok().filter(|&l| l >= 1).ok_or_else(|| ConfigError::Invalid {
                    key: format!("level_train.{k}"),
                    message: "expected a level number >= 1".into(),
                })?;
                Ok((level, *t))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: &str| ConfigError::Invalid {
            key: key.to_string(),
            message: message.to_string(),
        };
        self.train
            .validate()
            .map_err(|e| invalid("train", &e.to_string()))?;
        for (level, t) in self.level_overrides()? {
            t.validate()
                .map_err(|e| invalid(&format!("level_train.{level}"), &e.to_string()))?;
        }
        if !(self.sim.dt > 0.0) {
            return Err(invalid("sim.dt", "must be positive"));
        }
        if self.sim.decision_period == 0 {
            return Err(invalid("sim.decision_period", "must be positive"));
        }
        if self.scene.n_cars.0 > self.scene.n_cars.1 {
            return Err(invalid("scene.n_cars", "lower bound exceeds upper bound"));
        }
        if self.eval.n_cars == 0 {
            return Err(invalid("eval.n_cars", "must be positive"));
        }
        Ok(())
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            scene: self.scene,
            road: self.road,
            sim: self.sim,
            reward: self.reward,
        }
    }

    pub fn curriculum(&self) -> Result<CurriculumConfig, ConfigError> {
        Ok(CurriculumConfig {
            max_level: self.max_level,
            seed: self.seed,
            train: self.train,
            level_train: self.level_overrides()?,
            env: self.env(),
            network: self.network,
        })
    }

    /// Dotted keys of fixed scenario constants that differ from their
    /// defaults.
    pub fn overridden_constants(&self) -> Vec<String> {
        let defaults = RunConfig::default();
        let mut keys = Vec::new();
        for (section, ours, theirs) in [
            ("sim", to_value(&self.sim), to_value(&defaults.sim)),
            ("scene", to_value(&self.scene), to_value(&defaults.scene)),
            ("road", to_value(&self.road), to_value(&defaults.road)),
            ("reward", to_value(&self.reward), to_value(&defaults.reward)),
        ] {
            diff_keys(section, &ours, &theirs, &mut keys);
        }
        if self.train.total_steps != defaults.train.total_steps {
            keys.push("train.total_steps".into());
        }
        keys
    }
}

fn to_value<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("config section encodes as TOML")
}

fn diff_keys(prefix: &str, ours: &toml::Value, theirs: &toml::Value, out: &mut Vec<String>) {
    match (ours, theirs) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, va) in a {
                match b.get(k) {
                    Some(vb) => diff_keys(&format!("{prefix}.{k}"), va, vb, out),
                    None => out.push(format!("{prefix}.{k}")),
                }
            }
        }
        (a, b) if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}
