//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use odp_core::model::load_checkpoint;
use odp_core::trainer::{OptimizerConfig, PretrainConfig, RunOptions, SpeakerShift, SyntheticTaskSpec, TrialConfig};
use odp_core::{CacheConfig, GroupName, ModelConfig, RnntModel, ScheduleOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable that replaces the configured seed list with one seed.
pub const SEED_ENV: &str = "ODP_SEED";

/// A training or benchmark run. Relative paths resolve against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model architecture JSON file. Takes precedence over `model_preset`.
    #[serde(default)]
    pub model_config: Option<PathBuf>,
    #[serde(default = "default_preset")]
    pub model_preset: String,
    pub cache: CacheConfig,
    pub group: String,
    #[serde(default)]
    pub split_boundary: Option<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Start personalization from this checkpoint instead of pretraining.
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub feature_cache: bool,
    #[serde(default)]
    pub quantize_cache: bool,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    #[serde(default)]
    pub shift: Option<SpeakerShift>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub pretrain_examples: Option<usize>,
    #[serde(default)]
    pub personal_examples: Option<usize>,
    #[serde(default)]
    pub eval_examples: Option<usize>,
}

fn default_preset() -> String {
    "tiny".into()
}

/// A parsed and checked run config.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    /// Paths made absolute.
    pub config: RunConfig,
    pub model: ModelConfig,
    pub group: GroupName,
    pub base: Option<RnntModel>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<LoadedRun> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid run config {}: {e}", path.display())))?;
        let base_dir = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base_dir);
        config.check()
    }

    fn resolve_paths(&mut self, base_dir: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        if let Some(p) = self.model_config.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.base_checkpoint.as_mut() {
            resolve(p);
        }
        resolve(&mut self.output_dir);
    }

    /// Validate everything that can be checked without running.
    pub fn check(self) -> CliResult<LoadedRun> {
        let model = match &self.model_config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("model config {}: {e}", path.display())))?;
                serde_json::from_str::<ModelConfig>(&text)
                    .map_err(|e| CliError::Config(format!("invalid model config {}: {e}", path.display())))?
            }
            None => ModelConfig::preset(&self.model_preset)?,
        };
        model.validate()?;
        self.cache.validate()?;
        let group = GroupName::parse(&self.group, &model)?;
        if let Some(b) = self.split_boundary {
            if b > model.enc_layers {
                return Err(CliError::Config(format!(
                    "split_boundary {b} exceeds {} encoder layers",
                    model.enc_layers
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        if self.quantize_cache && !self.feature_cache {
            return Err(CliError::Config("quantize_cache requires feature_cache".into()));
        }
        if self.feature_cache && group.frozen_prefix().is_none() {
            return Err(CliError::Config(format!(
                "feature_cache needs a group that freezes an encoder prefix, got `{}`",
                self.group
            )));
        }
        let base = match &self.base_checkpoint {
            Some(path) => {
                if !path.is_file() {
                    return Err(CliError::Config(format!(
                        "base checkpoint {} not found",
                        path.display()
                    )));
                }
                let m = load_checkpoint(path)
                    .map_err(|e| CliError::Config(format!("base checkpoint {}: {e}", path.display())))?;
                if *m.config() != model {
                    return Err(CliError::Config(format!(
                        "base checkpoint {} does not match the model config",
                        path.display()
                    )));
                }
                Some(m)
            }
            None => None,
        };
        Ok(LoadedRun {
            config: self,
            model,
            group,
            base,
        })
    }
}

impl LoadedRun {
    /// Trial parameters: the desk-scale defaults overridden by this config.
    pub fn trial_config(&self) -> TrialConfig {
        let c = &self.config;
        let defaults = TrialConfig::tiny();
        let shift = c.shift.unwrap_or(defaults.task.shift);
        TrialConfig {
            task: SyntheticTaskSpec::for_model(&self.model, 0, shift),
            model: self.model.clone(),
            pretrain: c.pretrain.clone().unwrap_or(defaults.pretrain),
            pretrain_examples: c.pretrain_examples.unwrap_or(defaults.pretrain_examples),
            personal_examples: c.personal_examples.unwrap_or(defaults.personal_examples),
            eval_examples: c.eval_examples.unwrap_or(defaults.eval_examples),
            cache: c.cache,
            schedule: ScheduleOptions {
                shuffle_seed: c.shuffle_seed,
                allow_partial: false,
            },
            group: c.group.clone(),
            run: RunOptions {
                optimizer: c.optimizer.unwrap_or(defaults.run.optimizer),
                split_boundary: c.split_boundary,
                feature_cache: c.feature_cache,
                quantize_cache: c.quantize_cache,
            },
        }
    }

    /// Configured seeds, or the single seed from `ODP_SEED` when set.
    pub fn seeds(&self) -> CliResult<Vec<u64>> {
        Ok(seed_override()?.map_or_else(|| self.config.seeds.clone(), |s| vec![s]))
    }
}

pub fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// Create `dir` if needed and make sure files can be written into it.
pub fn ensure_writable(dir: &Path) -> CliResult<()> {
    let unwritable = |e: std::io::Error| CliError::Config(format!("output dir {} is not writable: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(unwritable)?;
    let probe = dir.join(".odp-write-probe");
    fs::write(&probe, b"").map_err(unwritable)?;
    fs::remove_file(&probe).map_err(unwritable)?;
    Ok(())
}
