use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, RnntModel};
use crate::error::{Error, Result};
use crate::tape::ParamId;

/// Named trainable subsets of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupName {
    Joint,
    Lm,
    /// Label encoder plus joint network.
    Decoder,
    /// Encoder layers `from..` through the last one.
    Encoder {
        from: usize,
    },
    All,
}

impl GroupName {
    /// Rows in the order of the parameter breakdown table.
    pub fn table_rows(cfg: &ModelConfig) -> Vec<GroupName> {
        let mut rows = vec![GroupName::Joint, GroupName::Lm, GroupName::Decoder];
        rows.extend((0..cfg.enc_layers).rev().map(|from| GroupName::Encoder { from }));
        rows.push(GroupName::All);
        rows
    }

    pub fn label(&self, cfg: &ModelConfig) -> String {
        match *self {
            GroupName::Joint => "Joint".into(),
            GroupName::Lm => "LM".into(),
            GroupName::Decoder => "Decoder".into(),
            GroupName::All => "All".into(),
            GroupName::Encoder { from } => {
                let last = cfg.enc_layers - 1;
                if from == last {
                    format!("Encoder {last}")
                } else {
                    format!("Encoder {from}-{last}")
                }
            }
        }
    }

    /// Accepts `Joint`, `LM`, `Decoder`, `All`, `Encoder 7`, `Encoder 4-7`
    /// (hyphen or en dash) and `Encoder 1..end`, case-insensitively.
    pub fn parse(name: &str, cfg: &ModelConfig) -> Result<Self> {
        let unknown = || Error::UnknownGroup {
            name: name.to_string(),
            valid: Self::table_rows(cfg)
                .iter()
                .map(|g| g.label(cfg))
                .collect::<Vec<_>>()
                .join(", "),
        };
        let lower = name.trim().to_ascii_lowercase();
        let group = match lower.as_str() {
            "joint" => GroupName::Joint,
            "lm" => GroupName::Lm,
            "decoder" => GroupName::Decoder,
            "all" => GroupName::All,
            other => {
                let rest = other.strip_prefix("encoder").ok_or_else(unknown)?.trim();
                let last = cfg.enc_layers - 1;
                let normalized = rest.replace('\u{2013}', "-").replace("..", "-");
                let (from, to) = match normalized.split_once('-') {
                    Some((a, b)) => (a.trim(), b.trim()),
                    None => (normalized.as_str(), normalized.as_str()),
                };
                let from: usize = from.parse().map_err(|_| unknown())?;
                let to = if to == "end" {
                    last
                } else {
                    to.parse().map_err(|_| unknown())?
                };
                if to != last || from > last {
                    return Err(unknown());
                }
                GroupName::Encoder { from }
            }
        };
        Ok(group)
    }

    /// Number of leading encoder layers this group leaves frozen, when it
    /// freezes a strict encoder prefix.
    pub fn frozen_prefix(&self) -> Option<usize> {
        match *self {
            GroupName::Encoder { from } if from > 0 => Some(from),
            _ => None,
        }
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupName::Encoder { from } => write!(f, "Encoder {from}-end"),
            other => f.write_str(match other {
                GroupName::Joint => "Joint",
                GroupName::Lm => "LM",
                GroupName::Decoder => "Decoder",
                _ => "All",
            }),
        }
    }
}

/// A named set of parameters to update; everything else is frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: GroupName,
    pub ids: BTreeSet<ParamId>,
}

impl ParamGroup {
    pub fn contains(&self, id: ParamId) -> bool {
        self.ids.contains(&id)
    }
}

fn check_encoder_index(cfg: &ModelConfig, group: GroupName) -> Result<()> {
    if let GroupName::Encoder { from } = group {
        if from >= cfg.enc_layers {
            return Err(Error::UnknownGroup {
                name: format!("Encoder {from}"),
                valid: GroupName::table_rows(cfg)
                    .iter()
                    .map(|g| g.label(cfg))
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
    }
    Ok(())
}

/// Closed-form weight plus bias count of a group.
pub fn count_params(cfg: &ModelConfig, group: GroupName) -> Result<usize> {
    check_encoder_index(cfg, group)?;
    let lm: usize = (0..cfg.lm_layers)
        .map(|l| cfg.lstm_layer_params(cfg.lm_layer_input(l)))
        .sum();
    let encoder_from = |from: usize| -> usize {
        (from..cfg.enc_layers)
            .map(|l| cfg.lstm_layer_params(cfg.enc_layer_input(l)))
            .sum()
    };
    Ok(match group {
        GroupName::Joint => cfg.joint_params(),
        GroupName::Lm => lm,
        GroupName::Decoder => lm + cfg.joint_params(),
        GroupName::Encoder { from } => encoder_from(from),
        GroupName::All => lm + cfg.joint_params() + encoder_from(0),
    })
}

pub fn select_trainable(model: &RnntModel, group: GroupName) -> Result<ParamGroup> {
    let cfg = model.config();
    check_encoder_index(cfg, group)?;
    let ids = match group {
        GroupName::Joint => model.joint_param_ids(),
        GroupName::Lm => model.lm_param_ids(),
        GroupName::Decoder => model.decoder_param_ids(),
        GroupName::Encoder { from } => model.encoder_param_ids(from..cfg.enc_layers),
        GroupName::All => model.param_ids().collect(),
    };
    Ok(ParamGroup { name: group, ids })
}
