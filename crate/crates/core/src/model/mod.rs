//! RNN-T acoustic encoder, label encoder and joint network at configurable scale.

mod checkpoint;
mod decode;
mod forward;
mod groups;
mod quant;

use std::collections::BTreeSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::ParamId;
use crate::tensor::{DType, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use decode::{greedy_decode, greedy_search, ModelTransducer, Transducer, DEFAULT_MAX_SYMBOLS};
pub use forward::{stack_frames, Binding};
pub use groups::{count_params, select_trainable, GroupName, ParamGroup};
pub use quant::{dequantize_int8, quantize_int8, QuantizedTensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension after input frame stacking.
    pub input_dim: usize,
    /// Consecutive input frames concatenated into one network frame.
    #[serde(default = "default_frame_stack")]
    pub frame_stack: usize,
    pub enc_layers: usize,
    pub lm_layers: usize,
    pub lstm_hidden: usize,
    pub lstm_proj: usize,
    /// The input of encoder layer `mid_stack_after_layer` is stacked, i.e.
    /// stacking happens after that many layers have run.
    pub mid_stack_after_layer: usize,
    pub mid_stack_stride: usize,
    /// Grapheme count, excluding blank.
    pub vocab: usize,
    pub joint_hidden: usize,
    #[serde(default)]
    pub dtype: DType,
}

fn default_frame_stack() -> usize {
    3
}

impl ModelConfig {
    /// The full-size on-device architecture. Used for analytic parameter
    /// counting only.
    pub fn full_size() -> Self {
        Self {
            input_dim: 240,
            frame_stack: 3,
            enc_layers: 8,
            lm_layers: 2,
            lstm_hidden: 2048,
            lstm_proj: 640,
            mid_stack_after_layer: 2,
            mid_stack_stride: 2,
            vocab: 75,
            joint_hidden: 640,
            dtype: DType::F32,
        }
    }

    /// Desk-scale default, small enough for exhaustive oracles.
    pub fn tiny() -> Self {
        Self {
            input_dim: 12,
            frame_stack: 3,
            enc_layers: 4,
            lm_layers: 2,
            lstm_hidden: 32,
            lstm_proj: 16,
            mid_stack_after_layer: 1,
            mid_stack_stride: 2,
            vocab: 8,
            joint_hidden: 16,
            dtype: DType::F32,
        }
    }

    /// Eight encoder layers with wide LSTMs, used for memory measurements.
    pub fn tiny_wide() -> Self {
        Self {
            enc_layers: 8,
            mid_stack_after_layer: 2,
            lstm_hidden: 64,
            lstm_proj: 32,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full_size()),
            "tiny" => Ok(Self::tiny()),
            "tiny-wide" | "tiny_wide" => Ok(Self::tiny_wide()),
            other => Err(Error::ModelConfig(format!(
                "unknown preset `{other}` (expected full, tiny or tiny-wide)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("input_dim", self.input_dim),
            ("frame_stack", self.frame_stack),
            ("enc_layers", self.enc_layers),
            ("lm_layers", self.lm_layers),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_proj", self.lstm_proj),
            ("mid_stack_stride", self.mid_stack_stride),
            ("vocab", self.vocab),
            ("joint_hidden", self.joint_hidden),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be at least 1")));
        }
        if self.mid_stack_after_layer >= self.enc_layers {
            return Err(Error::ModelConfig(format!(
                "mid_stack_after_layer {} must be below enc_layers {}",
                self.mid_stack_after_layer, self.enc_layers
            )));
        }
        if !self.input_dim.is_multiple_of(self.frame_stack) {
            return Err(Error::ModelConfig(format!(
                "input_dim {} is not a multiple of frame_stack {}",
                self.input_dim, self.frame_stack
            )));
        }
        Ok(())
    }

    /// Raw per-frame feature dimension before input stacking.
    pub fn feature_dim(&self) -> usize {
        self.input_dim / self.frame_stack
    }

    /// Graphemes plus blank.
    pub fn output_dim(&self) -> usize {
        self.vocab + 1
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub fn enc_layer_input(&self, layer: usize) -> usize {
        let base = if layer == 0 { self.input_dim } else { self.lstm_proj };
        if layer == self.mid_stack_after_layer {
            base * self.mid_stack_stride
        } else {
            base
        }
    }

    pub fn lm_layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.output_dim()
        } else {
            self.lstm_proj
        }
    }

    /// Weights plus biases of one projected LSTM layer.
    pub fn lstm_layer_params(&self, input: usize) -> usize {
        let (h, p) = (self.lstm_hidden, self.lstm_proj);
        4 * h * (input + p) + 4 * h + h * p
    }

    pub fn joint_params(&self) -> usize {
        let (p, j, o) = (self.lstm_proj, self.joint_hidden, self.output_dim());
        2 * p * j + j + j * o + o
    }

    /// Encoder output length for `frames` raw feature frames.
    pub fn encoder_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.frame_stack).div_ceil(self.mid_stack_stride)
    }
}

/// Parameter ids of one projected LSTM layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmIds {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub w_proj: ParamId,
}

impl LstmIds {
    pub fn all(&self) -> [ParamId; 4] {
        [self.w_x, self.w_h, self.bias, self.w_proj]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointIds {
    pub w_enc: ParamId,
    pub w_lm: ParamId,
    pub b_hidden: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl JointIds {
    pub fn all(&self) -> [ParamId; 5] {
        [self.w_enc, self.w_lm, self.b_hidden, self.w_out, self.b_out]
    }
}

/// Fixed parameter ordering: encoder layers, label-encoder layers, joint.
fn lstm_ids(base: usize) -> LstmIds {
    LstmIds {
        w_x: ParamId(base),
        w_h: ParamId(base + 1),
        bias: ParamId(base + 2),
        w_proj: ParamId(base + 3),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnntModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl RnntModel {
    /// Randomly initialised model: uniform weights in `±sqrt(3/fan_in)`
    /// (unit-variance preserving), zero biases except the forget gate, which
    /// starts at 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dtype = config.dtype;
        let (h, p) = (config.lstm_hidden, config.lstm_proj);
        let mut params = Vec::new();
        let mut names = Vec::new();
        let uniform = |shape: &[usize], scale: f64, rng: &mut ChaCha8Rng| {
            Tensor::from_fn(shape, dtype, |_| rng.random_range(-scale..scale))
        };
        let fan_in = |n: usize| (3.0 / n as f64).sqrt();
        let mut push_lstm = |prefix: String, input: usize, params: &mut Vec<Tensor>, names: &mut Vec<String>| {
            params.push(uniform(&[input, 4 * h], fan_in(input), &mut rng));
            params.push(uniform(&[p, 4 * h], fan_in(p), &mut rng));
            params.push(Tensor::from_fn(&[4 * h], dtype, |i| {
                if (h..2 * h).contains(&i) {
                    1.0
                } else {
                    0.0
                }
            }));
            params.push(uniform(&[h, p], fan_in(h), &mut rng));
            for suffix in ["w_x", "w_h", "bias", "w_proj"] {
                names.push(format!("{prefix}.{suffix}"));
            }
        };
        for l in 0..config.enc_layers {
            push_lstm(format!("enc.{l}"), config.enc_layer_input(l), &mut params, &mut names);
        }
        for l in 0..config.lm_layers {
            push_lstm(format!("lm.{l}"), config.lm_layer_input(l), &mut params, &mut names);
        }
        let (j, o) = (config.joint_hidden, config.output_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006a_6f69_6e74);
        let joint_scale = (3.0 / p as f64).sqrt();
        params.push(Tensor::from_fn(&[p, j], dtype, |_| {
            rng.random_range(-joint_scale..joint_scale)
        }));
        params.push(Tensor::from_fn(&[p, j], dtype, |_| {
            rng.random_range(-joint_scale..joint_scale)
        }));
        params.push(Tensor::zeros(&[j], dtype));
        let out_scale = (3.0 / j as f64).sqrt();
        params.push(Tensor::from_fn(&[j, o], dtype, |_| {
            rng.random_range(-out_scale..out_scale)
        }));
        params.push(Tensor::zeros(&[o], dtype));
        names.extend(
            [
                "joint.w_enc",
                "joint.w_lm",
                "joint.b_hidden",
                "joint.w_out",
                "joint.b_out",
            ]
            .map(String::from),
        );
        Ok(Self { config, params, names })
    }

    /// Model with every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        for p in &mut model.params {
            *p = Tensor::zeros(p.shape(), p.dtype());
        }
        Ok(model)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::ModelConfig(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (t, p)) in template.params.iter().zip(&params).enumerate() {
            if t.shape() != p.shape() {
                return Err(Error::ModelConfig(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    template.names[i],
                    p.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            names: template.names,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                detail: format!("{:?} -> {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value.to_dtype(slot.dtype());
        Ok(())
    }

    pub fn param_bytes(&self) -> usize {
        self.params.iter().map(Tensor::nbytes).sum()
    }

    pub fn enc_layer(&self, layer: usize) -> LstmIds {
        lstm_ids(4 * layer)
    }

    pub fn lm_layer(&self, layer: usize) -> LstmIds {
        lstm_ids(4 * (self.config.enc_layers + layer))
    }

    pub fn joint_ids(&self) -> JointIds {
        let base = 4 * (self.config.enc_layers + self.config.lm_layers);
        JointIds {
            w_enc: ParamId(base),
            w_lm: ParamId(base + 1),
            b_hidden: ParamId(base + 2),
            w_out: ParamId(base + 3),
            b_out: ParamId(base + 4),
        }
    }

    pub fn encoder_param_ids(&self, layers: Range<usize>) -> BTreeSet<ParamId> {
        layers.flat_map(|l| self.enc_layer(l).all()).collect()
    }

    pub fn lm_param_ids(&self) -> BTreeSet<ParamId> {
        (0..self.config.lm_layers)
            .flat_map(|l| self.lm_layer(l).all())
            .collect()
    }

    pub fn joint_param_ids(&self) -> BTreeSet<ParamId> {
        self.joint_ids().all().into_iter().collect()
    }

    /// Label encoder plus joint network.
    pub fn decoder_param_ids(&self) -> BTreeSet<ParamId> {
        let mut ids = self.lm_param_ids();
        ids.extend(self.joint_param_ids());
        ids
    }
}

#[cfg(test)]
impl ModelConfig {
    /// Full-size topology with small widths, for tests that need eight encoder layers.
    pub(crate) fn full_size_scaled_for_test() -> Self {
        Self {
            input_dim: 6,
            lstm_hidden: 4,
            lstm_proj: 3,
            vocab: 5,
            joint_hidden: 3,
            ..Self::full_size()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["full", "tiny", "tiny-wide"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn full_size_layer_two_sees_stacked_input() {
        let cfg = ModelConfig::full_size();
        assert_eq!(cfg.enc_layer_input(0), 240);
        assert_eq!(cfg.enc_layer_input(1), 640);
        assert_eq!(cfg.enc_layer_input(2), 1280);
        assert_eq!(cfg.output_dim(), 76);
        assert_eq!(cfg.feature_dim(), 80);
    }

    #[test]
    fn rejects_stack_point_past_encoder() {
        let cfg = ModelConfig {
            mid_stack_after_layer: 4,
            ..ModelConfig::tiny()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            lstm_proj: 0,
            ..ModelConfig::tiny()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn allocated_params_match_analytic_counts() {
        let model = RnntModel::init(ModelConfig::tiny(), 1).unwrap();
        let cfg = model.config().clone();
        let total: usize = model.params().map(|(_, t)| t.numel()).sum();
        let analytic = (0..cfg.enc_layers)
            .map(|l| cfg.lstm_layer_params(cfg.enc_layer_input(l)))
            .chain((0..cfg.lm_layers).map(|l| cfg.lstm_layer_params(cfg.lm_layer_input(l))))
            .sum::<usize>()
            + cfg.joint_params();
        assert_eq!(total, analytic);
    }

    #[test]
    fn init_is_deterministic() {
        let a = RnntModel::init(ModelConfig::tiny(), 7).unwrap();
        let b = RnntModel::init(ModelConfig::tiny(), 7).unwrap();
        let c = RnntModel::init(ModelConfig::tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
