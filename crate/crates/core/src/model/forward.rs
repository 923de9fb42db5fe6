use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use super::{LstmIds, RnntModel};
use crate::error::{Error, Result};
use crate::memory::Ledger;
use crate::tape::{Mode, ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Parameters registered on a tape for one forward computation.
pub struct Binding<'t> {
    vars: BTreeMap<ParamId, Var<'t>>,
}

impl<'t> Binding<'t> {
    pub fn new(
        tape: &'t Tape,
        model: &RnntModel,
        ids: impl IntoIterator<Item = ParamId>,
        trainable: &BTreeSet<ParamId>,
    ) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for id in ids {
            let var = tape.param(id, model.param(id), trainable.contains(&id))?;
            vars.insert(id, var);
        }
        Ok(Self { vars })
    }

    /// Every model parameter.
    pub fn all(tape: &'t Tape, model: &RnntModel, trainable: &BTreeSet<ParamId>) -> Result<Self> {
        Self::new(tape, model, model.param_ids(), trainable)
    }

    pub fn get(&self, id: ParamId) -> Result<&Var<'t>> {
        self.vars.get(&id).ok_or_else(|| Error::Shape {
            op: "binding",
            detail: format!("parameter {} not bound on this tape", id.0),
        })
    }

    pub fn bytes(&self, model: &RnntModel) -> usize {
        self.vars.keys().map(|id| model.param(*id).nbytes()).sum()
    }
}

/// Concatenate groups of `k` consecutive frames, repeating the final frame
/// to fill a short tail.
pub fn stack_frames(features: &Tensor, k: usize) -> Result<Tensor> {
    let tape = Tape::new(Ledger::new(), Mode::NoGrad);
    let x = tape.constant(features.clone())?;
    let y = tape.stack_frames(&x, k)?;
    Ok(y.value())
}

/// One LSTM cell step from precomputed input-gate pre-activations.
fn lstm_cell<'t>(
    tape: &'t Tape,
    bind: &Binding<'t>,
    ids: LstmIds,
    hidden: usize,
    gates_x: &Var<'t>,
    state: Option<&(Var<'t>, Var<'t>)>,
) -> Result<(Var<'t>, Var<'t>)> {
    let gates = match state {
        Some((h, _)) => {
            let rec = tape.matmul(h, bind.get(ids.w_h)?)?;
            tape.add(gates_x, &rec)?
        }
        None => gates_x.clone(),
    };
    let input = tape.sigmoid(&tape.slice(&gates, 1, 0, hidden)?)?;
    let cand = tape.tanh(&tape.slice(&gates, 1, 2 * hidden, hidden)?)?;
    let output = tape.sigmoid(&tape.slice(&gates, 1, 3 * hidden, hidden)?)?;
    let mut cell = tape.mul(&input, &cand)?;
    if let Some((_, c_prev)) = state {
        let forget = tape.sigmoid(&tape.slice(&gates, 1, hidden, hidden)?)?;
        let kept = tape.mul(&forget, c_prev)?;
        cell = tape.add(&kept, &cell)?;
    }
    let m = tape.mul(&output, &tape.tanh(&cell)?)?;
    let h = tape.matmul(&m, bind.get(ids.w_proj)?)?;
    Ok((h, cell))
}

fn input_gates<'t>(tape: &'t Tape, bind: &Binding<'t>, ids: LstmIds, x: &Var<'t>) -> Result<Var<'t>> {
    let gx = tape.matmul(x, bind.get(ids.w_x)?)?;
    tape.add(&gx, bind.get(ids.bias)?)
}

/// Projected LSTM over a `[T, in]` sequence, returning `[T, proj]`.
fn lstm_sequence<'t>(tape: &'t Tape, bind: &Binding<'t>, ids: LstmIds, hidden: usize, x: &Var<'t>) -> Result<Var<'t>> {
    let gx = input_gates(tape, bind, ids, x)?;
    let frames = gx.shape()[0];
    let mut state: Option<(Var<'t>, Var<'t>)> = None;
    let mut outputs = Vec::with_capacity(frames);
    for t in 0..frames {
        let row = tape.slice(&gx, 0, t, 1)?;
        let next = lstm_cell(tape, bind, ids, hidden, &row, state.as_ref())?;
        outputs.push(next.0.clone());
        state = Some(next);
    }
    drop(state);
    drop(gx);
    let refs: Vec<&Var<'t>> = outputs.iter().collect();
    tape.concat(&refs, 0)
}

/// Recurrent state of a label-encoder stack: `(h, c)` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelState {
    pub(crate) layers: Vec<(Tensor, Tensor)>,
    /// Output of the top layer, `[1, proj]`.
    pub(crate) output: Tensor,
}

impl RnntModel {
    fn one_hot(&self, rows: &[usize]) -> Tensor {
        let classes = self.config().output_dim();
        Tensor::from_fn(&[rows.len(), classes], self.config().dtype, |i| {
            if rows[i / classes] == i % classes {
                1.0
            } else {
                0.0
            }
        })
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let vocab = self.config().vocab;
        match labels.iter().find(|&&l| l >= vocab) {
            Some(&label) => Err(Error::LabelOutOfRange { label, vocab }),
            None => Ok(()),
        }
    }

    /// Stacked network input for raw `[T, feature_dim]` features: the
    /// activation entering encoder layer 0.
    pub fn input_activation<'t>(&self, tape: &'t Tape, features: &Tensor) -> Result<Var<'t>> {
        let cfg = self.config();
        match features.dims2() {
            Some((_, d)) if d == cfg.feature_dim() && features.shape().len() == 2 => {}
            _ => {
                return Err(Error::Shape {
                    op: "input_activation",
                    detail: format!("features {:?}, expected [T, {}]", features.shape(), cfg.feature_dim()),
                })
            }
        }
        let x = tape.constant(features.to_dtype(cfg.dtype))?;
        let mut x = tape.stack_frames(&x, cfg.frame_stack)?;
        if cfg.mid_stack_after_layer == 0 {
            x = tape.stack_frames(&x, cfg.mid_stack_stride)?;
        }
        Ok(x)
    }

    /// Run encoder `layers` on the activation entering `layers.start`,
    /// returning the activation entering `layers.end` (frame stacking for
    /// that layer included).
    pub fn encode_range<'t>(
        &self,
        tape: &'t Tape,
        bind: &Binding<'t>,
        x: Var<'t>,
        layers: Range<usize>,
    ) -> Result<Var<'t>> {
        let cfg = self.config();
        if layers.end > cfg.enc_layers {
            return Err(Error::Shape {
                op: "encode_range",
                detail: format!("layers {layers:?} beyond {} encoder layers", cfg.enc_layers),
            });
        }
        if let Some(first) = layers.clone().next() {
            let width = x.shape().get(1).copied().unwrap_or(0);
            if width != cfg.enc_layer_input(first) {
                return Err(Error::Shape {
                    op: "encode_range",
                    detail: format!(
                        "layer {first} expects width {}, got {width}",
                        cfg.enc_layer_input(first)
                    ),
                });
            }
        }
        let mut x = x;
        for l in layers {
            x = lstm_sequence(tape, bind, self.enc_layer(l), cfg.lstm_hidden, &x)?;
            if l + 1 == cfg.mid_stack_after_layer {
                x = tape.stack_frames(&x, cfg.mid_stack_stride)?;
            }
        }
        Ok(x)
    }

    /// Label-encoder states `[U+1, proj]` for the blank start symbol followed by `labels`.
    pub fn encode_labels<'t>(&self, tape: &'t Tape, bind: &Binding<'t>, labels: &[usize]) -> Result<Var<'t>> {
        self.check_labels(labels)?;
        let cfg = self.config();
        let rows: Vec<usize> = std::iter::once(cfg.blank()).chain(labels.iter().copied()).collect();
        let mut x = tape.constant(self.one_hot(&rows))?;
        for l in 0..cfg.lm_layers {
            x = lstm_sequence(tape, bind, self.lm_layer(l), cfg.lstm_hidden, &x)?;
        }
        Ok(x)
    }

    /// Joint-network log-probabilities `[T*(U+1), V+1]` for encoder states
    /// `[T, proj]` and label states `[U+1, proj]`.
    pub fn joint<'t>(&self, tape: &'t Tape, bind: &Binding<'t>, enc: &Var<'t>, lm: &Var<'t>) -> Result<Var<'t>> {
        let ids = self.joint_ids();
        let proj = self.config().lstm_proj;
        for (name, v) in [("encoder", enc), ("label", lm)] {
            if v.shape().get(1) != Some(&proj) {
                return Err(Error::Shape {
                    op: "joint",
                    detail: format!("{name} states {:?}, expected width {proj}", v.shape()),
                });
            }
        }
        let e = tape.matmul(enc, bind.get(ids.w_enc)?)?;
        let p = tape.matmul(lm, bind.get(ids.w_lm)?)?;
        let grid = tape.outer_add(&e, &p)?;
        drop((e, p));
        let hidden = tape.tanh(&tape.add(&grid, bind.get(ids.b_hidden)?)?)?;
        drop(grid);
        let logits = tape.add(&tape.matmul(&hidden, bind.get(ids.w_out)?)?, bind.get(ids.b_out)?)?;
        tape.log_softmax(&logits)
    }

    /// Decoder and loss on top of encoder output `[T, proj]`.
    pub fn decoder_loss<'t>(
        &self,
        tape: &'t Tape,
        bind: &Binding<'t>,
        enc: &Var<'t>,
        labels: &[usize],
    ) -> Result<Var<'t>> {
        let frames = enc.shape()[0];
        let lm = self.encode_labels(tape, bind, labels)?;
        let log_probs = self.joint(tape, bind, enc, &lm)?;
        drop(lm);
        tape.rnnt_loss(&log_probs, labels, frames)
    }

    /// Encoder output `[T'', proj]` for raw features, without recording.
    pub fn encode_acoustic(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new(Ledger::new(), Mode::NoGrad);
        let bind = Binding::all(&tape, self, &BTreeSet::new())?;
        let x = self.input_activation(&tape, features)?;
        let out = self.encode_range(&tape, &bind, x, 0..self.config().enc_layers)?;
        Ok(out.value())
    }

    /// Label-encoder states without recording.
    pub fn label_states(&self, labels: &[usize]) -> Result<Tensor> {
        let tape = Tape::new(Ledger::new(), Mode::NoGrad);
        let bind = Binding::new(&tape, self, self.lm_param_ids(), &BTreeSet::new())?;
        let states = self.encode_labels(&tape, &bind, labels)?.value();
        Ok(states)
    }

    /// Joint log-probabilities for one encoder state and one label state, each `[proj]` or `[1, proj]`.
    pub fn joint_log_probs(&self, enc_state: &Tensor, lm_state: &Tensor) -> Result<Tensor> {
        let tape = Tape::new(Ledger::new(), Mode::NoGrad);
        let bind = Binding::new(&tape, self, self.joint_param_ids(), &BTreeSet::new())?;
        let as_row = |t: &Tensor| t.clone().reshape(vec![1, t.numel()]);
        let e = tape.constant(as_row(enc_state)?)?;
        let l = tape.constant(as_row(lm_state)?)?;
        let log_probs = self.joint(&tape, &bind, &e, &l)?.value();
        Ok(log_probs)
    }

    /// Per-utterance negative log-likelihood, without recording.
    pub fn utterance_nll(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let tape = Tape::new(Ledger::new(), Mode::NoGrad);
        let bind = Binding::all(&tape, self, &BTreeSet::new())?;
        let x = self.input_activation(&tape, features)?;
        let enc = self.encode_range(&tape, &bind, x, 0..self.config().enc_layers)?;
        let nll = self.decoder_loss(&tape, &bind, &enc, labels)?.item();
        Ok(nll)
    }

    /// Label-encoder state after consuming only the start symbol.
    pub fn label_start(&self) -> Result<LabelState> {
        self.label_step(None, self.config().blank())
    }

    /// Advance the label encoder by one symbol.
    pub fn label_step(&self, state: Option<&LabelState>, symbol: usize) -> Result<LabelState> {
        let cfg = self.config();
        let tape = Tape::new(Ledger::new(), Mode::NoGrad);
        let bind = Binding::new(&tape, self, self.lm_param_ids(), &BTreeSet::new())?;
        let mut x = tape.constant(self.one_hot(&[symbol]))?;
        let mut layers = Vec::with_capacity(cfg.lm_layers);
        for l in 0..cfg.lm_layers {
            let ids = self.lm_layer(l);
            let prev = match state {
                Some(s) => {
                    let (h, c) = &s.layers[l];
                    Some((tape.constant(h.clone())?, tape.constant(c.clone())?))
                }
                None => None,
            };
            let gx = input_gates(&tape, &bind, ids, &x)?;
            let (h, c) = lstm_cell(&tape, &bind, ids, cfg.lstm_hidden, &gx, prev.as_ref())?;
            layers.push((h.value(), c.value()));
            x = h;
        }
        Ok(LabelState {
            layers,
            output: x.value(),
        })
    }
}
