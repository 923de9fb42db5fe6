use super::forward::LabelState;
use super::RnntModel;
use crate::error::Result;
use crate::tensor::Tensor;

/// Emission cap per encoder frame.
pub const DEFAULT_MAX_SYMBOLS: usize = 10;

/// Anything that scores the next output symbol given an encoder frame and a
/// label-history state.
pub trait Transducer {
    type State: Clone;

    fn frames(&self) -> usize;
    /// Number of output classes; the last one is blank.
    fn classes(&self) -> usize;
    fn start(&mut self) -> Result<Self::State>;
    fn log_probs(&mut self, frame: usize, state: &Self::State) -> Result<Vec<f64>>;
    fn advance(&mut self, state: &Self::State, label: usize) -> Result<Self::State>;
}

/// Greedy transducer search: at each frame emit the argmax symbol until blank
/// wins or `max_symbols` labels were emitted, then move to the next frame.
pub fn greedy_search<M: Transducer>(model: &mut M, max_symbols: usize) -> Result<Vec<usize>> {
    let blank = model.classes() - 1;
    let mut state = model.start()?;
    let mut hyp = Vec::new();
    for t in 0..model.frames() {
        for _ in 0..max_symbols {
            let lp = model.log_probs(t, &state)?;
            let best = argmax(&lp);
            if best == blank {
                break;
            }
            hyp.push(best);
            state = model.advance(&state, best)?;
        }
    }
    Ok(hyp)
}

/// First index of the maximum value.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A model paired with one utterance's encoder output.
pub struct ModelTransducer<'m> {
    model: &'m RnntModel,
    encoded: Tensor,
}

impl<'m> ModelTransducer<'m> {
    pub fn new(model: &'m RnntModel, features: &Tensor) -> Result<Self> {
        Ok(Self {
            model,
            encoded: model.encode_acoustic(features)?,
        })
    }
}

impl Transducer for ModelTransducer<'_> {
    type State = LabelState;

    fn frames(&self) -> usize {
        self.encoded.shape()[0]
    }

    fn classes(&self) -> usize {
        self.model.config().output_dim()
    }

    fn start(&mut self) -> Result<LabelState> {
        self.model.label_start()
    }

    fn log_probs(&mut self, frame: usize, state: &LabelState) -> Result<Vec<f64>> {
        let proj = self.model.config().lstm_proj;
        let row = &self.encoded.data()[frame * proj..(frame + 1) * proj];
        let enc = Tensor::from_parts(vec![1, proj], row.to_vec(), self.encoded.dtype());
        Ok(self.model.joint_log_probs(&enc, &state.output)?.into_data())
    }

    fn advance(&mut self, state: &LabelState, label: usize) -> Result<LabelState> {
        self.model.label_step(Some(state), label)
    }
}

/// Greedy decoding of raw `[T, feature_dim]` features into grapheme ids.
pub fn greedy_decode(model: &RnntModel, features: &Tensor) -> Result<Vec<usize>> {
    greedy_search(&mut ModelTransducer::new(model, features)?, DEFAULT_MAX_SYMBOLS)
}
