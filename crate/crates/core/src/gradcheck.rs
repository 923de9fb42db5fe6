//! Finite-difference and brute-force oracles for the gradient machinery.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{brute_force_loss, rnnt_loss};
use crate::memory::Ledger;
use crate::model::{ModelConfig, RnntModel};
use crate::split::combined_backward;
use crate::tape::{Mode, OpKind, ParamId, Tape};
use crate::tensor::{DType, Tensor};
use crate::trainer::{synth_generate, SpeakerShift, SyntheticTaskSpec};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, instances: usize, max_rel_err: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            max_rel_err,
            tolerance,
            passed: max_rel_err <= tolerance,
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, DType::F64, |_| rng.sample(StandardNormal))
}

/// Every op kind with a random instance generator: returns the op and the
/// shapes of its inputs.
fn random_instance(kind: &str, rng: &mut ChaCha8Rng) -> (OpKind, Vec<Vec<usize>>) {
    let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, n, k) = (d(1, 4), d(1, 4), d(1, 4));
    match kind {
        "matmul" => (OpKind::MatMul, vec![vec![m, k], vec![k, n]]),
        "add" => (OpKind::Add, vec![vec![m, n], vec![m, n]]),
        "add_row" => (OpKind::Add, vec![vec![m, n], vec![1, n]]),
        "mul" => (OpKind::Mul, vec![vec![m, n], vec![m, n]]),
        "concat0" => (OpKind::Concat { axis: 0 }, vec![vec![m, n], vec![k, n]]),
        "concat1" => (OpKind::Concat { axis: 1 }, vec![vec![m, n], vec![m, k], vec![m, 2]]),
        "slice" => {
            let axis = d(0, 1);
            let ext = n + 1;
            let start = d(0, ext - 1);
            let len = d(1, ext - start);
            let shape = if axis == 0 { vec![ext, m] } else { vec![m, ext] };
            (OpKind::Slice { axis, start, len }, vec![shape])
        }
        "sigmoid" => (OpKind::Sigmoid, vec![vec![m, n]]),
        "tanh" => (OpKind::Tanh, vec![vec![m, n]]),
        "log_softmax" => (OpKind::LogSoftmax, vec![vec![m, n + 1]]),
        "stack_frames" => (OpKind::StackFrames { k: d(1, 3) }, vec![vec![d(1, 7), n]]),
        "sum" => (OpKind::Sum, vec![vec![m, n]]),
        "scale" => (OpKind::Scale(0.5 + m as f64 * 0.75), vec![vec![m, n]]),
        "outer_add" => (OpKind::OuterAdd, vec![vec![m, n], vec![k, n]]),
        other => unreachable!("no generator for {other}"),
    }
}

pub const OP_KINDS: [&str; 14] = [
    "matmul",
    "add",
    "add_row",
    "mul",
    "concat0",
    "concat1",
    "slice",
    "sigmoid",
    "tanh",
    "log_softmax",
    "stack_frames",
    "sum",
    "scale",
    "outer_add",
];

/// `sum(op(inputs) * weights)` evaluated without recording.
fn probe(kind: &OpKind, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let tape = Tape::new(Ledger::new(), Mode::NoGrad);
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = vars.iter().collect();
    let y = tape.apply(kind, &refs)?;
    let w = tape.constant(weights.clone())?;
    let s = tape.sum(&tape.mul(&y, &w)?)?.item();
    Ok(s)
}

/// Largest relative error between tape gradients and central differences
/// over one random instance of `kind`.
pub fn check_op_instance(kind_name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (kind, shapes) = random_instance(kind_name, rng);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| normal_tensor(rng, s)).collect();

    let tape = Tape::new(Ledger::new(), Mode::Record);
    let (loss, ids, weights) = {
        let vars = inputs
            .iter()
            .map(|t| tape.input(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = vars.iter().collect();
        let y = tape.apply(&kind, &refs)?;
        let weights = normal_tensor(rng, &y.shape());
        let w = tape.constant(weights.clone())?;
        let loss = tape.sum(&tape.mul(&y, &w)?)?;
        (loss.id(), vars.iter().map(|v| v.id()).collect::<Vec<_>>(), weights)
    };
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.input(*id).expect("input requires grad");
        for e in 0..inputs[which].numel() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[which].data_mut()[e] += FD_STEP;
            minus[which].data_mut()[e] -= FD_STEP;
            let fd = (probe(&kind, &plus, &weights)? - probe(&kind, &minus, &weights)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[e], fd));
        }
    }
    Ok(worst)
}

pub fn check_ops(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OP_KINDS
        .iter()
        .map(|&kind| {
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                worst = worst.max(check_op_instance(kind, &mut rng)?);
            }
            Ok(CheckResult::new(format!("op {kind}"), instances, worst, GRAD_TOLERANCE))
        })
        .collect()
}

/// Random lattice: normalized log-probabilities `[T, U+1, V+1]` and labels.
pub fn random_lattice(rng: &mut ChaCha8Rng, max_t: usize, max_u: usize, max_v: usize) -> (Tensor, Vec<usize>) {
    let t = rng.random_range(1..=max_t);
    let u = rng.random_range(0..=max_u);
    let v = rng.random_range(1..=max_v);
    let labels: Vec<usize> = (0..u).map(|_| rng.random_range(0..v)).collect();
    let logits: Vec<f64> = (0..t * (u + 1) * (v + 1)).map(|_| rng.sample(StandardNormal)).collect();
    let mut data = logits;
    for row in data.chunks_mut(v + 1) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    let lp = Tensor::new(vec![t, u + 1, v + 1], data, DType::F64).expect("consistent shape");
    (lp, labels)
}

/// Transducer loss against path enumeration, and its gradient against
/// central differences.
pub fn check_rnnt(instances: usize, seed: u64) -> Result<[CheckResult; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss_err: f64 = 0.0;
    let mut grad_err: f64 = 0.0;
    for _ in 0..instances {
        let (lp, labels) = random_lattice(&mut rng, 4, 3, 5);
        let (nll, grad) = rnnt_loss(&lp, &labels)?;
        let brute = brute_force_loss(&lp, &labels)?;
        loss_err = loss_err.max((nll - brute).abs() / brute.abs().max(1e-12));
        for e in 0..lp.numel() {
            let mut plus = lp.clone();
            let mut minus = lp.clone();
            plus.data_mut()[e] += FD_STEP;
            minus.data_mut()[e] -= FD_STEP;
            let fd = (rnnt_loss(&plus, &labels)?.0 - rnnt_loss(&minus, &labels)?.0) / (2.0 * FD_STEP);
            grad_err = grad_err.max(rel_err(grad.data()[e], fd));
        }
    }
    Ok([
        CheckResult::new("rnnt loss vs enumeration", instances, loss_err, LOSS_TOLERANCE),
        CheckResult::new(
            "rnnt gradient vs finite differences",
            instances,
            grad_err,
            GRAD_TOLERANCE,
        ),
    ])
}

/// End-to-end model gradients against central differences on sampled
/// parameter entries, in double precision.
pub fn check_model(per_param: usize, seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig {
        dtype: DType::F64,
        ..ModelConfig::tiny()
    };
    let model = RnntModel::init(cfg.clone(), seed)?;
    let spec = SyntheticTaskSpec {
        mean_labels: 2,
        ..SyntheticTaskSpec::for_model(&cfg, seed, SpeakerShift::IDENTITY)
    };
    let batch = synth_generate(&spec, 2)?;
    let all: BTreeSet<ParamId> = model.param_ids().collect();
    let out = combined_backward(&model, &batch, &all, &Ledger::new())?;
    let mean_loss = |m: &RnntModel| -> Result<f64> {
        let mut s = 0.0;
        for u in &batch {
            s += m.utterance_nll(&u.features, &u.labels)?;
        }
        Ok(s / batch.len() as f64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in model.param_ids() {
        let p = model.param(id);
        for _ in 0..per_param {
            let e = rng.random_range(0..p.numel());
            let shifted = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let mut t = p.clone();
                t.data_mut()[e] += delta;
                m.set_param(id, t)?;
                mean_loss(&m)
            };
            let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(out.grads[&id].data()[e], fd));
            checked += 1;
        }
    }
    Ok(CheckResult::new(
        "model gradient vs finite differences",
        checked,
        worst,
        GRAD_TOLERANCE,
    ))
}

/// The whole suite: every op kind, the transducer loss and the model.
pub fn run_all(op_instances: usize, rnnt_instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = check_ops(op_instances, seed)?;
    out.extend(check_rnnt(rnnt_instances, seed)?);
    out.push(check_model(3, seed)?);
    Ok(out)
}
