//! Session-driven personalization.

mod feature_cache;
mod optim;
mod run;
mod synth;
mod trial;
mod wer;

pub use feature_cache::{frozen_feature_cache, quantized_prefix, FeatureCache};
pub use optim::{momentum_step, OptimizerConfig, OptimizerState, DEFAULT_LR, DEFAULT_MOMENTUM};
pub use run::{
    clip_global_norm, evaluate, pretrain, run_personalization, EvalMetrics, PretrainConfig, RunOptions, RunResult,
    SessionMetrics,
};
pub use synth::{synth_generate, SpeakerShift, SyntheticTaskSpec, Utterance};
pub use trial::{personalize, pretrained_base, run_trial, TrialConfig, TrialOutcome, TrialSeeds};
pub use wer::{corpus_wer, edit_distance, wer};
