use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{train_with, Encoded, Network, TrainConfig, Trainable};

/// Which trainable groups (a fully connected layer together with the batch
/// norm and activations that follow it) are updated during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FreezeStrategy {
    RetrainAll,
    /// Freeze the first `k` groups; `k` must leave at least one trainable.
    FreezeFirst(usize),
    /// Train only the last `k` groups.
    RetrainLast(usize),
}

impl FreezeStrategy {
    /// Per-group trainability for a network with `groups` groups.
    pub fn mask(&self, groups: usize) -> Result<Vec<bool>> {
        let frozen = match *self {
            FreezeStrategy::RetrainAll => 0,
            FreezeStrategy::FreezeFirst(k) => {
                if k >= groups {
                    return Err(Error::Param(format!(
                        "cannot freeze the first {k} of {groups} layers"
                    )));
                }
                k
            }
            FreezeStrategy::RetrainLast(k) => {
                if k == 0 || k > groups {
                    return Err(Error::Param(format!(
                        "cannot retrain the last {k} of {groups} layers"
                    )));
                }
                groups - k
            }
        };
        Ok((0..groups).map(|i| i >= frozen).collect())
    }
}

impl fmt::Display for FreezeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezeStrategy::RetrainAll => write!(f, "retrain_all"),
            FreezeStrategy::FreezeFirst(k) => write!(f, "freeze_first({k})"),
            FreezeStrategy::RetrainLast(k) => write!(f, "retrain_last({k})"),
        }
    }
}

impl FromStr for FreezeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "retrain_all" {
            return Ok(FreezeStrategy::RetrainAll);
        }
        let arg = |prefix: &str| -> Option<Result<usize>> {
            let inner = s
                .strip_prefix(prefix)?
                .strip_prefix('(')?
                .strip_suffix(')')?;
            Some(
                inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::Param(format!("bad layer count in {s:?}"))),
            )
        };
        if let Some(k) = arg("freeze_first") {
            return Ok(FreezeStrategy::FreezeFirst(k?));
        }
        if let Some(k) = arg("retrain_last") {
            return Ok(FreezeStrategy::RetrainLast(k?));
        }
        Err(Error::Param(format!(
            "unknown freeze strategy {s:?} (expected retrain_all, freeze_first(k) or retrain_last(k))"
        )))
    }
}

impl TryFrom<String> for FreezeStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FreezeStrategy> for String {
    fn from(s: FreezeStrategy) -> String {
        s.to_string()
    }
}

/// Copies `source_model` and trains the unfrozen groups on labeled target
/// data. Frozen groups keep their parameters and batch-norm statistics.
/// Zero epochs returns the warm start unchanged.
pub fn fine_tune(
    source_model: &Network,
    target: &Encoded,
    strategy: FreezeStrategy,
    cfg: &TrainConfig,
) -> Result<Network> {
    let mask = strategy.mask(source_model.spec().groups().len())?;
    let mut net = source_model.clone();
    if cfg.epochs == 0 {
        TrainConfig {
            epochs: 1,
            ..cfg.clone()
        }
        .validate()?;
        target.labels()?;
        return Ok(net);
    }
    train_with(&mut net, target, cfg, &Trainable::Groups(mask))?;
    Ok(net)
}
