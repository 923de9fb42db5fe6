use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::feature_cache::FeatureCache;
use super::optim::{momentum_step, OptimizerConfig, OptimizerState};
use super::wer::corpus_wer;
use super::Utterance;
use crate::cache::Schedule;
use crate::error::{Error, Result};
use crate::memory::Ledger;
use crate::model::{greedy_decode, select_trainable, GroupName, RnntModel};
use crate::split::{combined_backward_items, split_backward_items, Item, Source, SplitOptions, SplitPlan, StepOutput};
use crate::tape::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Compute gradients in two phases split at this encoder layer.
    #[serde(default)]
    pub split_boundary: Option<usize>,
    /// Reuse frozen encoder-prefix activations across epochs and sessions.
    #[serde(default)]
    pub feature_cache: bool,
    /// Compute cached activations through int8 weights.
    #[serde(default)]
    pub quantize_cache: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub heldout_loss: f64,
    pub heldout_wer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    pub examples_seen: usize,
    pub mean_train_loss: f64,
    pub heldout_loss: f64,
    pub heldout_wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub initial: EvalMetrics,
    pub sessions: Vec<SessionMetrics>,
    pub optimizer_steps: usize,
    pub peak_bytes: usize,
    /// Per-utterance cache hits when the feature cache was on.
    pub cache_hits: Option<BTreeMap<u64, usize>>,
}

impl RunResult {
    pub fn final_eval(&self) -> EvalMetrics {
        self.sessions.last().map_or(self.initial, |s| EvalMetrics {
            heldout_loss: s.heldout_loss,
            heldout_wer: s.heldout_wer,
        })
    }

    /// One JSON object per session.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.sessions {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.sessions {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean per-utterance loss and corpus-level greedy WER.
pub fn evaluate(model: &RnntModel, eval: &[Utterance]) -> Result<EvalMetrics> {
    if eval.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut loss = 0.0;
    let mut hyps = Vec::with_capacity(eval.len());
    for u in eval {
        loss += model.utterance_nll(&u.features, &u.labels)?;
        hyps.push(greedy_decode(model, &u.features)?);
    }
    let pairs: Vec<(&[usize], &[usize])> = eval.iter().zip(&hyps).map(|(u, h)| (&u.labels[..], &h[..])).collect();
    Ok(EvalMetrics {
        heldout_loss: loss / eval.len() as f64,
        heldout_wer: corpus_wer(&pairs)?,
    })
}

struct Stepper<'a> {
    plan: Option<SplitPlan>,
    trainable: std::collections::BTreeSet<ParamId>,
    cache: Option<FeatureCache>,
    ledger: &'a Ledger,
}

impl Stepper<'_> {
    fn step(&mut self, model: &RnntModel, batch: &[&Utterance]) -> Result<StepOutput> {
        if let Some(cache) = self.cache.as_mut() {
            for u in batch {
                cache.ensure(model, u)?;
            }
        }
        let items: Vec<Item> = batch
            .iter()
            .map(|u| match &self.cache {
                Some(cache) => Item {
                    source: Source::Activation {
                        layer: cache.layer(),
                        value: cache.get(u.id).expect("ensured above"),
                    },
                    labels: &u.labels,
                },
                None => Item::from_utterance(u),
            })
            .collect();
        match &self.plan {
            Some(plan) => split_backward_items(model, &items, plan, self.ledger, &SplitOptions::default()),
            None => combined_backward_items(model, &items, &self.trainable, self.ledger),
        }
    }
}

/// Train `group` over every session of `schedule`, evaluating on `eval`
/// before the first session and after each one.
pub fn run_personalization(
    model: &mut RnntModel,
    data: &[Utterance],
    schedule: &Schedule,
    group: GroupName,
    eval: &[Utterance],
    opts: &RunOptions,
) -> Result<RunResult> {
    if schedule.total_examples > data.len() {
        return Err(Error::CacheConfig(format!(
            "schedule needs {} examples, {} available",
            schedule.total_examples,
            data.len()
        )));
    }
    let trainable = select_trainable(model, group)?.ids;
    let plan = opts
        .split_boundary
        .map(|b| SplitPlan::new(model, b, &trainable))
        .transpose()?;
    let cache = if opts.feature_cache {
        Some(FeatureCache::new(model, group, opts.quantize_cache)?)
    } else {
        None
    };
    let ledger = Ledger::new();
    let mut optim = OptimizerState::new(model, &trainable, opts.optimizer)?;
    let mut stepper = Stepper {
        plan,
        trainable,
        cache,
        ledger: &ledger,
    };

    let initial = evaluate(model, eval)?;
    let mut sessions = Vec::with_capacity(schedule.sessions.len());
    let mut steps = 0;
    for session in &schedule.sessions {
        if let Some(cache) = stepper.cache.as_mut() {
            cache.evict_below(session.start as u64);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for epoch in &session.epochs {
            for batch_ids in epoch {
                let batch: Vec<&Utterance> = batch_ids.iter().map(|&i| &data[i]).collect();
                let out = stepper.step(model, &batch)?;
                momentum_step(model, &out.grads, &mut optim)?;
                loss_sum += out.loss * batch.len() as f64;
                seen += batch.len();
                steps += 1;
            }
        }
        let eval_now = evaluate(model, eval)?;
        sessions.push(SessionMetrics {
            session: session.index,
            examples_seen: session.end,
            mean_train_loss: loss_sum / seen as f64,
            heldout_loss: eval_now.heldout_loss,
            heldout_wer: eval_now.heldout_wer,
        });
    }
    Ok(RunResult {
        initial,
        sessions,
        optimizer_steps: steps,
        peak_bytes: ledger.peak_bytes(),
        cache_hits: stepper.cache.map(|c| c.hit_counts().clone()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub shuffle_seed: u64,
    /// Rescale each step's gradients to at most this global L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 4,
            optimizer: OptimizerConfig {
                lr: 0.05,
                momentum: 0.9,
            },
            shuffle_seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

/// Train every parameter on `data` for a fixed number of shuffled epochs.
/// Returns the mean training loss of each epoch.
pub fn pretrain(model: &mut RnntModel, data: &[Utterance], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::CacheConfig(
            "pretraining needs data and a positive batch size".into(),
        ));
    }
    let all = select_trainable(model, GroupName::All)?.ids;
    let mut optim = OptimizerState::new(model, &all, cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let ledger = Ledger::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<Item> = chunk.iter().map(|&i| Item::from_utterance(&data[i])).collect();
            let mut out = combined_backward_items(model, &items, &all, &ledger)?;
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut out.grads, max);
            }
            momentum_step(model, &out.grads, &mut optim)?;
            sum += out.loss * chunk.len() as f64;
        }
        curve.push(sum / data.len() as f64);
    }
    Ok(curve)
}

/// Scale `grads` down so their joint L2 norm is at most `max`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max && norm > 0.0 {
        let k = max / norm;
        for g in grads.values_mut() {
            let dtype = g.dtype();
            g.data_mut().iter_mut().for_each(|x| *x = dtype.round(*x * k));
        }
    }
    norm
}
