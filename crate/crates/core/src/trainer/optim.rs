use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RnntModel;
use crate::tape::ParamId;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// Classic momentum: `v <- m*v + g; theta <- theta - lr*v`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl OptimizerState {
    /// Zero velocity for each trainable parameter, none for frozen ones.
    pub fn new(model: &RnntModel, trainable: &BTreeSet<ParamId>, config: OptimizerConfig) -> Result<Self> {
        if !config.lr.is_finite() || !config.momentum.is_finite() || config.lr < 0.0 {
            return Err(Error::Optimizer(format!("invalid hyperparameters {config:?}")));
        }
        let mut velocity = BTreeMap::new();
        for &id in trainable {
            if id.0 >= model.num_params() {
                return Err(Error::Optimizer(format!("parameter {} not in model", id.0)));
            }
            let p = model.param(id);
            velocity.insert(id, Tensor::zeros(p.shape(), p.dtype()));
        }
        Ok(Self { config, velocity })
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(&id)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.velocity.keys().copied()
    }
}

pub fn momentum_step(
    model: &mut RnntModel,
    grads: &BTreeMap<ParamId, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.keys().ne(state.velocity.keys()) {
        return Err(Error::Optimizer(format!(
            "gradients cover {} parameters, optimizer tracks {}",
            grads.len(),
            state.velocity.len()
        )));
    }
    for (id, g) in grads {
        let v = &state.velocity[id];
        if g.shape() != v.shape() {
            return Err(Error::Shape {
                op: "momentum_step",
                detail: format!("gradient {:?} for parameter {:?}", g.shape(), v.shape()),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "momentum_step" });
        }
    }
    let OptimizerConfig { lr, momentum } = state.config;
    for (id, g) in grads {
        let v = state.velocity.get_mut(id).expect("checked above");
        let dtype = v.dtype();
        let new_v: Vec<f64> = v
            .data()
            .iter()
            .zip(g.data())
            .map(|(v, g)| dtype.round(momentum * v + g))
            .collect();
        let p = model.param(*id);
        let new_p: Vec<f64> = p.data().iter().zip(&new_v).map(|(p, v)| p - lr * v).collect();
        let shape = p.shape().to_vec();
        model.set_param(*id, Tensor::new(shape.clone(), new_p, p.dtype())?)?;
        *v = Tensor::new(shape, new_v, dtype)?;
    }
    Ok(())
}
