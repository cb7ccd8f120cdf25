//! Run configuration files.
//!
//! A config is a versioned TOML document with optional `[synthetic]`,
//! `[model]`, `[train]` and `[ablation]` tables. Unknown keys anywhere are
//! rejected.

use std::fs;
use std::path::Path;

use mtda_core::training::AblationConfig;
use mtda_core::{ModelConfig, SyntheticConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::{CliResult, Failure};

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "MTDA_SEED";

/// Architecture settings. Input width and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub num_filters: usize,
    pub kernel_size: usize,
    pub da_stages: Vec<usize>,
    pub domain_hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            num_stages: m.num_stages,
            layers_per_stage: m.layers_per_stage,
            num_filters: m.num_filters,
            kernel_size: m.kernel_size,
            da_stages: m.da_stages,
            domain_hidden_dim: m.domain_hidden_dim,
        }
    }
}

impl ModelSection {
    pub fn for_data(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_stages: self.num_stages,
            layers_per_stage: self.layers_per_stage,
            num_filters: self.num_filters,
            kernel_size: self.kernel_size,
            input_dim,
            num_classes,
            da_stages: self.da_stages.clone(),
            domain_hidden_dim: self.domain_hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            synthetic: SyntheticConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Where the effective seed came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Config,
    Environment,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Failure::input(format!("{}: {}", origin.display(), e.message())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Failure::input(format!(
                "{}: unsupported config version {} (expected {CONFIG_VERSION})",
                origin.display(),
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Replaces every seed with `seed`. Ablations collapse to that one seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.train.seed = seed;
        self.ablation.seeds = vec![seed];
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> CliResult<SeedSource> {
        self.apply_seed_var(std::env::var(SEED_ENV).ok().as_deref())
    }

    fn apply_seed_var(&mut self, value: Option<&str>) -> CliResult<SeedSource> {
        match value {
            None => Ok(SeedSource::Config),
            Some(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Failure::input(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
                self.override_seed(seed);
                Ok(SeedSource::Environment)
            }
        }
    }
}
