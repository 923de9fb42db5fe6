//! One personalization experiment: pretrain a base model on the unshifted
//! synthetic task, then personalize it on a shifted speaker.

use serde::{Deserialize, Serialize};

use super::run::{evaluate, pretrain, run_personalization, EvalMetrics, PretrainConfig, RunOptions, RunResult};
use super::synth::{synth_generate, SpeakerShift, SyntheticTaskSpec};
use super::OptimizerConfig;
use crate::cache::{generate_schedule, CacheConfig, ScheduleOptions};
use crate::error::Result;
use crate::model::{GroupName, ModelConfig, RnntModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub model: ModelConfig,
    /// Task shape; `seed` is replaced per trial.
    pub task: SyntheticTaskSpec,
    pub pretrain: PretrainConfig,
    pub pretrain_examples: usize,
    pub personal_examples: usize,
    pub eval_examples: usize,
    pub cache: CacheConfig,
    #[serde(default)]
    pub schedule: ScheduleOptions,
    pub group: String,
    #[serde(default)]
    pub run: RunOptions,
}

impl TrialConfig {
    /// Desk-scale setup on the tiny model.
    pub fn tiny() -> Self {
        let model = ModelConfig::tiny();
        let shift = SpeakerShift {
            scale: 1.5,
            offset: 0.6,
            noise: 0.3,
        };
        Self {
            task: SyntheticTaskSpec::for_model(&model, 0, shift),
            model,
            pretrain: PretrainConfig {
                epochs: 40,
                batch_size: 4,
                optimizer: OptimizerConfig {
                    lr: 0.03,
                    momentum: 0.9,
                },
                shuffle_seed: 0,
                clip_norm: Some(1.0),
            },
            pretrain_examples: 300,
            personal_examples: 100,
            eval_examples: 30,
            cache: CacheConfig {
                window: 50,
                shift: 10,
                batch_size: 5,
                epochs_per_session: 1,
            },
            schedule: ScheduleOptions::default(),
            group: "Encoder 1-end".into(),
            run: RunOptions {
                optimizer: OptimizerConfig {
                    lr: 0.002,
                    momentum: 0.9,
                },
                ..RunOptions::default()
            },
        }
    }
}

/// Seeds derived from one trial seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TrialSeeds {
    pub init: u64,
    pub base_data: u64,
    pub personal_data: u64,
    pub eval_data: u64,
}

impl TrialSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            init: seed,
            base_data: 1000 + seed,
            personal_data: 2000 + seed,
            eval_data: 3000 + seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub seed: u64,
    pub base: RnntModel,
    pub personalized: RnntModel,
    pub pretrain_curve: Vec<f64>,
    /// Base model on unshifted held-out data.
    pub base_eval: EvalMetrics,
    pub result: RunResult,
}

/// Base model trained on the unshifted task for `seed`.
pub fn pretrained_base(cfg: &TrialConfig, seed: u64) -> Result<(RnntModel, Vec<f64>)> {
    let seeds = TrialSeeds::from_seed(seed);
    let mut model = RnntModel::init(cfg.model.clone(), seeds.init)?;
    let base_spec = SyntheticTaskSpec {
        seed: seeds.base_data,
        shift: SpeakerShift::IDENTITY,
        ..cfg.task.clone()
    };
    let data = synth_generate(&base_spec, cfg.pretrain_examples)?;
    let pc = PretrainConfig {
        shuffle_seed: seeds.init,
        ..cfg.pretrain.clone()
    };
    let curve = pretrain(&mut model, &data, &pc)?;
    Ok((model, curve))
}

/// Personalize `base` on the shifted speaker of `seed`.
pub fn personalize(cfg: &TrialConfig, base: &RnntModel, seed: u64) -> Result<(RnntModel, RunResult)> {
    let seeds = TrialSeeds::from_seed(seed);
    let group = GroupName::parse(&cfg.group, &cfg.model)?;
    let personal = synth_generate(&cfg.task.with_seed(seeds.personal_data), cfg.personal_examples)?;
    let eval = synth_generate(&cfg.task.with_seed(seeds.eval_data), cfg.eval_examples)?;
    let schedule = generate_schedule(cfg.personal_examples, &cfg.cache, cfg.schedule)?;
    let mut model = base.clone();
    let result = run_personalization(&mut model, &personal, &schedule, group, &eval, &cfg.run)?;
    Ok((model, result))
}

pub fn run_trial(cfg: &TrialConfig, seed: u64) -> Result<TrialOutcome> {
    let (base, pretrain_curve) = pretrained_base(cfg, seed)?;
    let seeds = TrialSeeds::from_seed(seed);
    let base_eval_set = synth_generate(
        &SyntheticTaskSpec {
            seed: seeds.eval_data,
            shift: SpeakerShift::IDENTITY,
            ..cfg.task.clone()
        },
        cfg.eval_examples,
    )?;
    let base_eval = evaluate(&base, &base_eval_set)?;
    let (personalized, result) = personalize(cfg, &base, seed)?;
    Ok(TrialOutcome {
        seed,
        base,
        personalized,
        pretrain_curve,
        base_eval,
        result,
    })
}
