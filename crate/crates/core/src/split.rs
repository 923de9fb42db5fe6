//! Two-phase gradient computation.
//!
//! The encoder is cut at a boundary layer. Sub-graph 1 is the stack below
//! the boundary and sub-graph 2 is everything above it plus the decoder and
//! loss; the boundary activation `h1` is the only tensor that crosses. The
//! split pass runs in three phases:
//!
//! 1. forward sub-graph 1 without recording and keep only `h1`;
//! 2. forward and backward sub-graph 2 from `h1`, giving the upper gradients
//!    and the gradient with respect to `h1`;
//! 3. recompute sub-graph 1 with recording and backpropagate the `h1`
//!    gradient into the lower parameters.
//!
//! Each phase's peak is tracked on the ledger, so the result can be compared
//! with a single-tape pass over the same batch.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::PathBuf;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory::{Ledger, MemoryLedger};
use crate::model::{Binding, RnntModel};
use crate::tape::{Gradients, Mode, ParamId, Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::Utterance;

pub const PHASE_COMBINED: &str = "combined";
pub const PHASE_FORWARD: &str = "split-1";
pub const PHASE_UPPER: &str = "split-2";
pub const PHASE_RECOMPUTE: &str = "split-3";

/// Where the forward pass of one utterance starts.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    /// Raw `[T, feature_dim]` frames.
    Features(&'a Tensor),
    /// Activation entering encoder layer `layer`, e.g. from a feature cache.
    Activation { layer: usize, value: &'a Tensor },
}

impl Source<'_> {
    fn layer(&self) -> usize {
        match self {
            Source::Features(_) => 0,
            Source::Activation { layer, .. } => *layer,
        }
    }

    fn enter<'t>(&self, model: &RnntModel, tape: &'t Tape) -> Result<Var<'t>> {
        match self {
            Source::Features(f) => model.input_activation(tape, f),
            Source::Activation { value, .. } => tape.constant((*value).clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Item<'a> {
    pub source: Source<'a>,
    pub labels: &'a [usize],
}

impl<'a> Item<'a> {
    pub fn from_utterance(u: &'a Utterance) -> Self {
        Self {
            source: Source::Features(&u.features),
            labels: &u.labels,
        }
    }
}

/// Result of one gradient computation over a batch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Mean per-utterance loss.
    pub loss: f64,
    /// Gradient of the mean loss for every trainable parameter.
    pub grads: BTreeMap<ParamId, Tensor>,
    /// Forward operations executed in each phase.
    pub phase_ops: BTreeMap<String, usize>,
}

impl StepOutput {
    pub fn total_ops(&self) -> usize {
        self.phase_ops.values().sum()
    }
}

/// Partition of the trainable parameters at an encoder boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitPlan {
    /// Sub-graph 1 is encoder layers `0..boundary`.
    pub boundary: usize,
    pub theta1: BTreeSet<ParamId>,
    pub theta2: BTreeSet<ParamId>,
}

impl SplitPlan {
    pub fn new(model: &RnntModel, boundary: usize, trainable: &BTreeSet<ParamId>) -> Result<Self> {
        let layers = model.config().enc_layers;
        if boundary > layers {
            return Err(Error::SplitPlan(format!(
                "boundary {boundary} beyond {layers} encoder layers"
            )));
        }
        if let Some(id) = trainable.iter().find(|id| id.0 >= model.num_params()) {
            return Err(Error::SplitPlan(format!("parameter {} not in model", id.0)));
        }
        let lower = model.encoder_param_ids(0..boundary);
        let theta1 = trainable.intersection(&lower).copied().collect();
        let theta2 = trainable.difference(&lower).copied().collect();
        Ok(Self {
            boundary,
            theta1,
            theta2,
        })
    }

    pub fn trainable(&self) -> BTreeSet<ParamId> {
        self.theta1.union(&self.theta2).copied().collect()
    }

    /// Width of the boundary activation. Its length is the frame count at
    /// that depth, which depends on the utterance.
    pub fn h1_width(&self, model: &RnntModel) -> usize {
        let cfg = model.config();
        if self.boundary < cfg.enc_layers {
            cfg.enc_layer_input(self.boundary)
        } else {
            cfg.lstm_proj
        }
    }

    fn check(&self, model: &RnntModel) -> Result<()> {
        let again = Self::new(model, self.boundary, &self.trainable())?;
        if again != *self {
            return Err(Error::SplitPlan(
                "parameter sets do not match the model's boundary partition".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct SplitOptions {
    /// Write boundary activations to this directory between phases 1 and 2
    /// instead of keeping them resident.
    pub spill_dir: Option<PathBuf>,
}

fn loss_seeds(losses: &[Var<'_>], n: usize) -> Vec<(usize, Tensor)> {
    losses
        .iter()
        .map(|l| {
            let dtype = l.value().dtype();
            (l.id(), Tensor::full(&[1, 1], 1.0 / n as f64, dtype))
        })
        .collect()
}

fn nonempty(items: &[Item<'_>]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Shape {
            op: "backward",
            detail: "empty batch".into(),
        });
    }
    Ok(())
}

/// Single-tape forward and backward over `batch`, in ledger phase
/// `combined`.
pub fn combined_backward(
    model: &RnntModel,
    batch: &[Utterance],
    trainable: &BTreeSet<ParamId>,
    ledger: &Ledger,
) -> Result<StepOutput> {
    let items: Vec<Item> = batch.iter().map(Item::from_utterance).collect();
    combined_backward_items(model, &items, trainable, ledger)
}

pub fn combined_backward_items(
    model: &RnntModel,
    items: &[Item<'_>],
    trainable: &BTreeSet<ParamId>,
    ledger: &Ledger,
) -> Result<StepOutput> {
    nonempty(items)?;
    let layers = model.config().enc_layers;
    ledger.set_param_bytes(model.param_bytes());
    ledger.begin_phase(PHASE_COMBINED);
    let tape = Tape::new(ledger.clone(), Mode::Record);
    let (seeds, total) = {
        let bind = Binding::all(&tape, model, trainable)?;
        let mut losses = Vec::with_capacity(items.len());
        let mut total = 0.0;
        for item in items {
            let x = item.source.enter(model, &tape)?;
            let enc = model.encode_range(&tape, &bind, x, item.source.layer()..layers)?;
            let loss = model.decoder_loss(&tape, &bind, &enc, item.labels)?;
            total += loss.item();
            losses.push(loss);
        }
        (loss_seeds(&losses, items.len()), total)
    };
    let ops = tape.forward_ops();
    let grads = tape.backward_multi(seeds)?;
    ledger.end_phase();
    Ok(StepOutput {
        loss: total / items.len() as f64,
        grads: grads.detach(),
        phase_ops: BTreeMap::from([(PHASE_COMBINED.to_string(), ops)]),
    })
}

/// Boundary activations held between phases, either resident (and charged)
/// or spilled to disk.
enum Held {
    Resident(Tensor),
    Spilled {
        path: PathBuf,
        shape: Vec<usize>,
        dtype: crate::tensor::DType,
    },
}

fn spill(dir: &std::path::Path, index: usize, t: &Tensor) -> Result<Held> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("h1-{index}.bin"));
    let mut f = fs::File::create(&path)?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(Held::Spilled {
        path,
        shape: t.shape().to_vec(),
        dtype: t.dtype(),
    })
}

fn unspill(held: Held, ledger: &Ledger) -> Result<Tensor> {
    match held {
        Held::Resident(t) => {
            ledger.free(t.nbytes());
            Ok(t)
        }
        Held::Spilled { path, shape, dtype } => {
            let mut buf = Vec::new();
            fs::File::open(&path)?.read_to_end(&mut buf)?;
            fs::remove_file(&path)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::new(shape, data, dtype)
        }
    }
}

/// Three-phase split gradient computation. Produces the same gradients as
/// [`combined_backward`] with `plan.trainable()`.
pub fn split_backward(
    model: &RnntModel,
    batch: &[Utterance],
    plan: &SplitPlan,
    ledger: &Ledger,
    opts: &SplitOptions,
) -> Result<StepOutput> {
    let items: Vec<Item> = batch.iter().map(Item::from_utterance).collect();
    split_backward_items(model, &items, plan, ledger, opts)
}

pub fn split_backward_items(
    model: &RnntModel,
    items: &[Item<'_>],
    plan: &SplitPlan,
    ledger: &Ledger,
    opts: &SplitOptions,
) -> Result<StepOutput> {
    nonempty(items)?;
    plan.check(model)?;
    let layers = model.config().enc_layers;
    let b = plan.boundary;
    if let Some(item) = items.iter().find(|i| i.source.layer() > layers) {
        return Err(Error::SplitPlan(format!(
            "source layer {} beyond the encoder",
            item.source.layer()
        )));
    }
    // Utterances starting at or above the boundary have no sub-graph 1.
    let lower: Vec<bool> = items.iter().map(|i| i.source.layer() < b).collect();
    let any_lower = lower.iter().any(|&l| l);
    let lower_ids = model.encoder_param_ids(0..b);
    let upper_ids: BTreeSet<ParamId> = model.param_ids().filter(|id| !lower_ids.contains(id)).collect();
    let bytes_of = |ids: &BTreeSet<ParamId>| ids.iter().map(|id| model.param(*id).nbytes()).sum::<usize>();
    let need_h1_grad = any_lower && !plan.theta1.is_empty();

    ledger.set_param_bytes(model.param_bytes());
    let mut phase_ops = BTreeMap::new();

    // Phase 1: boundary activations, intermediates discarded.
    let mut held: Vec<Option<Held>> = Vec::with_capacity(items.len());
    if any_lower {
        ledger.begin_phase(PHASE_FORWARD);
        ledger.record_param_swap(bytes_of(&lower_ids));
        let tape = Tape::new(ledger.clone(), Mode::NoGrad);
        {
            let bind = Binding::new(&tape, model, lower_ids.iter().copied(), &BTreeSet::new())?;
            for (i, item) in items.iter().enumerate() {
                if !lower[i] {
                    held.push(None);
                    continue;
                }
                let x = item.source.enter(model, &tape)?;
                let h1 = model.encode_range(&tape, &bind, x, item.source.layer()..b)?;
                let value = h1.value();
                drop(h1);
                let h = match &opts.spill_dir {
                    Some(dir) => spill(dir, i, &value)?,
                    None => {
                        ledger.alloc(value.nbytes());
                        Held::Resident(value)
                    }
                };
                held.push(Some(h));
            }
        }
        phase_ops.insert(PHASE_FORWARD.to_string(), tape.forward_ops());
        drop(tape);
        ledger.end_phase();
    } else {
        held.resize_with(items.len(), || None);
    }

    // Phase 2: upper sub-graph forward and backward.
    ledger.begin_phase(PHASE_UPPER);
    ledger.record_param_swap(bytes_of(&upper_ids));
    let tape = Tape::new(ledger.clone(), Mode::Record);
    let (seeds, h1_nodes, total) = {
        let bind = Binding::new(&tape, model, upper_ids.iter().copied(), &plan.theta2)?;
        let mut losses = Vec::with_capacity(items.len());
        let mut h1_nodes = Vec::with_capacity(items.len());
        let mut total = 0.0;
        for (item, h) in items.iter().zip(held.iter_mut()) {
            let (x, from) = match h.take() {
                Some(h) => {
                    let x = tape.input(unspill(h, ledger)?, need_h1_grad)?;
                    h1_nodes.push(Some(x.id()));
                    (x, b)
                }
                None => {
                    h1_nodes.push(None);
                    (item.source.enter(model, &tape)?, item.source.layer())
                }
            };
            let enc = model.encode_range(&tape, &bind, x, from..layers)?;
            let loss = model.decoder_loss(&tape, &bind, &enc, item.labels)?;
            total += loss.item();
            losses.push(loss);
        }
        (loss_seeds(&losses, items.len()), h1_nodes, total)
    };
    phase_ops.insert(PHASE_UPPER.to_string(), tape.forward_ops());
    let mut upper = tape.backward_multi(seeds)?;
    // Keep the boundary gradients charged until phase 3 consumes them.
    let mut h1_grads = Vec::with_capacity(items.len());
    for node in &h1_nodes {
        let g = match node {
            Some(n) if need_h1_grad => {
                let g = upper.take_input(*n).ok_or_else(|| Error::Shape {
                    op: "split_backward",
                    detail: "boundary activation received no gradient".into(),
                })?;
                ledger.alloc(g.nbytes());
                Some(g)
            }
            _ => None,
        };
        h1_grads.push(g);
    }
    // Sub-graph 2 gradients are saved out with its parameters before
    // sub-graph 1 is brought back in.
    let mut grads = BTreeMap::new();
    if need_h1_grad {
        let upper_bytes: usize = upper.params().values().map(Tensor::nbytes).sum();
        ledger.record_param_swap(upper_bytes);
        grads = std::mem::replace(&mut upper, Gradients::empty(ledger.clone())).detach();
    }
    ledger.end_phase();

    // Phase 3: recompute sub-graph 1 with recording, then backpropagate.
    if need_h1_grad {
        ledger.begin_phase(PHASE_RECOMPUTE);
        ledger.record_param_swap(bytes_of(&lower_ids));
        let tape = Tape::new(ledger.clone(), Mode::Record);
        let seeds = {
            let bind = Binding::new(&tape, model, lower_ids.iter().copied(), &plan.theta1)?;
            let mut seeds = Vec::new();
            for (item, g) in items.iter().zip(h1_grads) {
                let Some(g) = g else { continue };
                let x = item.source.enter(model, &tape)?;
                let h1 = model.encode_range(&tape, &bind, x, item.source.layer()..b)?;
                seeds.push((h1.id(), g));
            }
            seeds
        };
        phase_ops.insert(PHASE_RECOMPUTE.to_string(), tape.forward_ops());
        for (_, g) in &seeds {
            ledger.free(g.nbytes());
        }
        let lower_grads = tape.backward_multi(seeds)?;
        upper.absorb(lower_grads);
        ledger.end_phase();
    }
    grads.extend(upper.detach());

    Ok(StepOutput {
        loss: total / items.len() as f64,
        grads,
        phase_ops,
    })
}

/// Peak-memory comparison between a combined pass and a split pass over the
/// same model and batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub combined_peak_bytes: usize,
    pub split_phase_peaks: BTreeMap<String, usize>,
    /// `1 - max(split phase peaks) / combined peak`.
    pub reduction_ratio: f64,
    /// Forward ops run again during recomputation.
    pub extra_forward_ops: usize,
    pub combined_forward_ops: usize,
    /// `extra_forward_ops / combined_forward_ops`.
    pub recompute_overhead: f64,
    pub param_bytes: usize,
    pub param_swap_events: usize,
    pub param_swap_bytes: usize,
}

impl MemoryReport {
    pub fn max_split_peak(&self) -> usize {
        self.split_phase_peaks.values().copied().max().unwrap_or(0)
    }
}

pub fn memory_report(
    combined: &MemoryLedger,
    combined_out: &StepOutput,
    split: &MemoryLedger,
    split_out: &StepOutput,
) -> Result<MemoryReport> {
    if combined.param_bytes != split.param_bytes {
        return Err(Error::LedgerMismatch(format!(
            "parameter bytes differ ({} vs {})",
            combined.param_bytes, split.param_bytes
        )));
    }
    let combined_peak_bytes = *combined
        .phase_peaks
        .get(PHASE_COMBINED)
        .ok_or_else(|| Error::UnknownPhase(PHASE_COMBINED.into()))?;
    let split_phase_peaks: BTreeMap<String, usize> = split
        .phase_peaks
        .iter()
        .filter(|(k, _)| k.starts_with("split-"))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    if split_phase_peaks.is_empty() {
        return Err(Error::UnknownPhase(PHASE_UPPER.into()));
    }
    let max_split = split_phase_peaks.values().copied().max().unwrap_or(0);
    let reduction_ratio = if combined_peak_bytes == 0 {
        0.0
    } else {
        1.0 - max_split as f64 / combined_peak_bytes as f64
    };
    let extra_forward_ops = split_out.phase_ops.get(PHASE_RECOMPUTE).copied().unwrap_or(0);
    let combined_forward_ops = combined_out.total_ops();
    let recompute_overhead = if combined_forward_ops == 0 {
        0.0
    } else {
        extra_forward_ops as f64 / combined_forward_ops as f64
    };
    Ok(MemoryReport {
        combined_peak_bytes,
        split_phase_peaks,
        reduction_ratio,
        extra_forward_ops,
        combined_forward_ops,
        recompute_overhead,
        param_bytes: split.param_bytes,
        param_swap_events: split.param_swap_events,
        param_swap_bytes: split.param_swap_bytes,
    })
}

/// Largest element-wise relative difference between two gradient sets,
/// with denominators floored at `1e-12`. Missing keys count as infinite.
pub fn max_rel_diff(a: &BTreeMap<ParamId, Tensor>, b: &BTreeMap<ParamId, Tensor>) -> f64 {
    if a.keys().ne(b.keys()) {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (id, x) in a {
        let y = &b[id];
        if x.shape() != y.shape() {
            return f64::INFINITY;
        }
        for (p, q) in x.data().iter().zip(y.data()) {
            let d = (p - q).abs();
            if d > 0.0 {
                worst = worst.max(d / p.abs().max(q.abs()).max(1e-12));
            }
        }
    }
    worst
}

/// Run both passes on fresh ledgers and compare them.
pub fn compare(
    model: &RnntModel,
    batch: &[Utterance],
    plan: &SplitPlan,
) -> Result<(StepOutput, StepOutput, MemoryReport)> {
    let combined_ledger = Ledger::new();
    let combined = combined_backward(model, batch, &plan.trainable(), &combined_ledger)?;
    let split_ledger = Ledger::new();
    let split = split_backward(model, batch, plan, &split_ledger, &SplitOptions::default())?;
    let report = memory_report(&combined_ledger.snapshot(), &combined, &split_ledger.snapshot(), &split)?;
    Ok((combined, split, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{select_trainable, GroupName, ModelConfig};
    use crate::trainer::{synth_generate, SpeakerShift, SyntheticTaskSpec};

    fn setup(cfg: ModelConfig, n: usize) -> (RnntModel, Vec<Utterance>) {
        let model = RnntModel::init(cfg.clone(), 5).unwrap();
        let spec = SyntheticTaskSpec::for_model(&cfg, 9, SpeakerShift::IDENTITY);
        (model, synth_generate(&spec, n).unwrap())
    }

    fn assert_bit_equal(a: &StepOutput, b: &StepOutput) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads.len(), b.grads.len());
        for (id, g) in &a.grads {
            assert!(g.bit_eq(&b.grads[id]), "param {} differs", id.0);
        }
    }

    #[test]
    fn every_boundary_and_group_matches_combined() {
        let cfg = ModelConfig::tiny();
        let (model, batch) = setup(cfg.clone(), 2);
        for group in GroupName::table_rows(&cfg) {
            let trainable = select_trainable(&model, group).unwrap().ids;
            for b in 0..=cfg.enc_layers {
                let plan = SplitPlan::new(&model, b, &trainable).unwrap();
                let (combined, split, _) = compare(&model, &batch, &plan).unwrap();
                assert_bit_equal(&combined, &split);
            }
        }
    }

    #[test]
    fn boundary_zero_is_the_combined_pass() {
        let (model, batch) = setup(ModelConfig::tiny(), 2);
        let all: BTreeSet<_> = model.param_ids().collect();
        let plan = SplitPlan::new(&model, 0, &all).unwrap();
        let (_, split, report) = compare(&model, &batch, &plan).unwrap();
        assert_eq!(report.reduction_ratio, 0.0);
        assert_eq!(report.extra_forward_ops, 0);
        assert_eq!(split.phase_ops.keys().collect::<Vec<_>>(), vec![PHASE_UPPER]);
    }

    #[test]
    fn recompute_repeats_phase_one_exactly_once() {
        let (model, batch) = setup(ModelConfig::tiny(), 3);
        let all: BTreeSet<_> = model.param_ids().collect();
        for b in 1..=4 {
            let plan = SplitPlan::new(&model, b, &all).unwrap();
            let (combined, split, report) = compare(&model, &batch, &plan).unwrap();
            assert_eq!(split.phase_ops[PHASE_FORWARD], split.phase_ops[PHASE_RECOMPUTE]);
            assert_eq!(report.extra_forward_ops, split.phase_ops[PHASE_FORWARD]);
            assert_eq!(
                split.phase_ops[PHASE_FORWARD] + split.phase_ops[PHASE_UPPER],
                combined.phase_ops[PHASE_COMBINED]
            );
            assert_eq!(report.param_swap_events, 4);
        }
    }

    #[test]
    fn frozen_lower_half_skips_recompute() {
        let cfg = ModelConfig::tiny();
        let (model, batch) = setup(cfg.clone(), 2);
        let trainable = select_trainable(&model, GroupName::Encoder { from: 2 }).unwrap().ids;
        let plan = SplitPlan::new(&model, 2, &trainable).unwrap();
        assert!(plan.theta1.is_empty());
        let (combined, split, report) = compare(&model, &batch, &plan).unwrap();
        assert!(!split.phase_ops.contains_key(PHASE_RECOMPUTE));
        assert_eq!(report.extra_forward_ops, 0);
        assert_bit_equal(&combined, &split);
    }

    #[test]
    fn split_peak_is_lower_for_nontrivial_boundaries() {
        let (model, batch) = setup(ModelConfig::tiny(), 2);
        let all: BTreeSet<_> = model.param_ids().collect();
        for b in 1..4 {
            let plan = SplitPlan::new(&model, b, &all).unwrap();
            let (_, _, report) = compare(&model, &batch, &plan).unwrap();
            assert!(
                report.max_split_peak() < report.combined_peak_bytes,
                "boundary {b}: {report:?}"
            );
            assert!(report.combined_peak_bytes > 0);
        }
    }

    #[test]
    fn ledger_returns_to_zero() {
        let (model, batch) = setup(ModelConfig::tiny(), 2);
        let all: BTreeSet<_> = model.param_ids().collect();
        let ledger = Ledger::new();
        combined_backward(&model, &batch, &all, &ledger).unwrap();
        assert_eq!(ledger.current_bytes(), 0);
        let plan = SplitPlan::new(&model, 2, &all).unwrap();
        split_backward(&model, &batch, &plan, &ledger, &SplitOptions::default()).unwrap();
        assert_eq!(ledger.current_bytes(), 0);
    }

    #[test]
    fn spilled_boundary_gives_same_gradients() {
        let (model, batch) = setup(ModelConfig::tiny(), 2);
        let all: BTreeSet<_> = model.param_ids().collect();
        let plan = SplitPlan::new(&model, 2, &all).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = SplitOptions {
            spill_dir: Some(dir.path().to_path_buf()),
        };
        let spilled = split_backward(&model, &batch, &plan, &Ledger::new(), &opts).unwrap();
        let resident = split_backward(&model, &batch, &plan, &Ledger::new(), &SplitOptions::default()).unwrap();
        assert_bit_equal(&spilled, &resident);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn plan_validation() {
        let (model, _) = setup(ModelConfig::tiny(), 1);
        let all: BTreeSet<_> = model.param_ids().collect();
        assert!(SplitPlan::new(&model, 5, &all).is_err());
        assert!(SplitPlan::new(&model, 1, &BTreeSet::from([ParamId(10_000)])).is_err());
        let mut plan = SplitPlan::new(&model, 2, &all).unwrap();
        let moved = *plan.theta1.iter().next().unwrap();
        plan.theta1.remove(&moved);
        plan.theta2.insert(moved);
        let batch = setup(ModelConfig::tiny(), 1).1;
        assert!(matches!(
            split_backward(&model, &batch, &plan, &Ledger::new(), &SplitOptions::default()),
            Err(Error::SplitPlan(_))
        ));
    }

    #[test]
    fn wide_model_balanced_boundary_report() {
        let (model, batch) = setup(ModelConfig::tiny_wide(), 2);
        let all: BTreeSet<_> = model.param_ids().collect();
        let plan = SplitPlan::new(&model, 4, &all).unwrap();
        let (_, _, report) = compare(&model, &batch, &plan).unwrap();
        eprintln!("{}", serde_json::to_string_pretty(&report).unwrap());
        assert!(report.reduction_ratio >= 0.25, "{}", report.reduction_ratio);
    }
}
