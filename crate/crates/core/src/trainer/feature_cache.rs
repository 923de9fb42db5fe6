//! Frozen encoder-prefix activations, computed once per utterance.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::memory::Ledger;
use crate::model::{dequantize_int8, quantize_int8, Binding, GroupName, RnntModel};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

use super::Utterance;

/// Activation entering the first trainable encoder layer of `group`.
pub fn frozen_feature_cache(model: &RnntModel, group: GroupName, utterance: &Utterance) -> Result<Tensor> {
    let layer = prefix_of(group)?;
    prefix_activation(model, layer, &utterance.features)
}

fn prefix_of(group: GroupName) -> Result<usize> {
    group
        .frozen_prefix()
        .ok_or_else(|| Error::NoFrozenPrefix(group.to_string()))
}

fn prefix_activation(model: &RnntModel, layer: usize, features: &Tensor) -> Result<Tensor> {
    let tape = Tape::new(Ledger::new(), Mode::NoGrad);
    let bind = Binding::new(&tape, model, model.encoder_param_ids(0..layer), &BTreeSet::new())?;
    let x = model.input_activation(&tape, features)?;
    let out = model.encode_range(&tape, &bind, x, 0..layer)?.value();
    Ok(out)
}

/// Copy of `model` whose first `layers` encoder weight matrices went
/// through an int8 round trip. Biases are left exact.
pub fn quantized_prefix(model: &RnntModel, layers: usize) -> Result<RnntModel> {
    let mut q = model.clone();
    for l in 0..layers {
        let ids = model.enc_layer(l);
        for id in [ids.w_x, ids.w_h, ids.w_proj] {
            let p = model.param(id);
            q.set_param(id, dequantize_int8(&quantize_int8(p)?, p.dtype()))?;
        }
    }
    Ok(q)
}

/// Per-utterance store of frozen-prefix outputs keyed by utterance id.
#[derive(Debug)]
pub struct FeatureCache {
    layer: usize,
    /// Model used for the prefix: the live one, or a quantized copy.
    prefix_model: Option<RnntModel>,
    entries: HashMap<u64, Tensor>,
    hits: BTreeMap<u64, usize>,
    misses: usize,
}

impl FeatureCache {
    pub fn new(model: &RnntModel, group: GroupName, quantize: bool) -> Result<Self> {
        let layer = prefix_of(group)?;
        let prefix_model = if quantize {
            Some(quantized_prefix(model, layer)?)
        } else {
            None
        };
        Ok(Self {
            layer,
            prefix_model,
            entries: HashMap::new(),
            hits: BTreeMap::new(),
            misses: 0,
        })
    }

    /// Encoder layer whose input is cached.
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn quantized(&self) -> bool {
        self.prefix_model.is_some()
    }

    /// Make sure `u` is cached, computing it through `model` on a miss.
    /// The prefix is frozen, so any later model state gives the same result.
    pub fn ensure(&mut self, model: &RnntModel, u: &Utterance) -> Result<()> {
        if self.entries.contains_key(&u.id) {
            *self.hits.entry(u.id).or_default() += 1;
            return Ok(());
        }
        let source = self.prefix_model.as_ref().unwrap_or(model);
        let act = prefix_activation(source, self.layer, &u.features)?;
        self.entries.insert(u.id, act);
        self.hits.entry(u.id).or_default();
        self.misses += 1;
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn hits(&self, id: u64) -> usize {
        self.hits.get(&id).copied().unwrap_or(0)
    }

    pub fn hit_counts(&self) -> &BTreeMap<u64, usize> {
        &self.hits
    }

    pub fn total_hits(&self) -> usize {
        self.hits.values().sum()
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drop entries that left the training window.
    pub fn evict_below(&mut self, first_id: u64) {
        self.entries.retain(|id, _| *id >= first_id);
    }

    pub fn bytes(&self) -> usize {
        self.entries.values().map(Tensor::nbytes).sum()
    }
}
