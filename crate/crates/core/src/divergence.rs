//! Source-model derivation by log-odds perturbation, exact KL divergence
//! between naive-Bayes models, and adversarial-weight schedules.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::stable_sigmoid;
use crate::bayesnet::{NaiveBayesModel, SUM_TOLERANCE};
use crate::error::{Error, Result};
use crate::seed;

/// Largest joint state space [`kl_joint_bruteforce`] will enumerate.
pub const MAX_JOINT_STATES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub sigma: f64,
    pub seed: u64,
}

/// Derives a source model from `target`.
///
/// The prior is copied. Every CPT cell `p` is mapped to
/// `sigmoid(logit(p) + e)` with `e ~ N(0, sigma^2)` drawn independently per
/// cell, then each row is renormalized.
pub fn perturb_model(target: &NaiveBayesModel, cfg: PerturbationConfig) -> Result<NaiveBayesModel> {
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(Error::Param(format!(
            "sigma must be >= 0, got {}",
            cfg.sigma
        )));
    }
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Param(e.to_string()))?;
    let mut rng = seed::rng(cfg.seed);
    let mut cpts = Vec::with_capacity(target.n_features());
    for (i, table) in target.cpts().iter().enumerate() {
        let mut new_table = Vec::with_capacity(table.len());
        for (j, row) in table.iter().enumerate() {
            let mut new_row = Vec::with_capacity(row.len());
            for (k, &p) in row.iter().enumerate() {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Model(format!(
                        "feature {i}, row {j}, value {k}: probability {p} has no finite log-odds"
                    )));
                }
                let logit = (p / (1.0 - p)).ln();
                let noise = if cfg.sigma == 0.0 {
                    0.0
                } else {
                    normal.sample(&mut rng)
                };
                new_row.push(stable_sigmoid(logit + noise));
            }
            let total: f64 = new_row.iter().sum();
            new_row.iter_mut().for_each(|v| *v /= total);
            new_table.push(new_row);
        }
        cpts.push(new_table);
    }
    NaiveBayesModel::new(target.prior().to_vec(), cpts)
}

fn check_comparable(p: &NaiveBayesModel, q: &NaiveBayesModel) -> Result<()> {
    if !p.same_structure(q) {
        return Err(Error::Structure(format!(
            "models differ in structure: s = {} with arities {:?} vs s = {} with arities {:?}",
            p.classes(),
            p.arities(),
            q.classes(),
            q.arities()
        )));
    }
    Ok(())
}

/// `KL(p || q)` in nats, summed per CPT row:
/// `sum_i sum_j sum_k p(x_i=k|z=j) p(z=j) ln(p(x_i=k|z=j) / q(x_i=k|z=j))`.
///
/// Only valid when both models share the class prior, which is enforced.
pub fn kl_factorized(p: &NaiveBayesModel, q: &NaiveBayesModel) -> Result<f64> {
    check_comparable(p, q)?;
    if p.prior()
        .iter()
        .zip(q.prior())
        .any(|(a, b)| (a - b).abs() > SUM_TOLERANCE)
    {
        return Err(Error::Structure(
            "factorized KL needs identical class priors".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..p.n_features() {
        for (j, &pz) in p.prior().iter().enumerate() {
            for (k, (&pc, &qc)) in p.cpt(i)[j].iter().zip(&q.cpt(i)[j]).enumerate() {
                if pc == 0.0 {
                    continue;
                }
                if qc == 0.0 {
                    return Err(Error::Structure(format!(
                        "q(x_{i}={k}|z={j}) is 0 where p is {pc}; KL is infinite"
                    )));
                }
                total += pc * pz * (pc / qc).ln();
            }
        }
    }
    Ok(total)
}

/// `KL(p || q)` by enumerating every joint state `(x_1..x_n, z)`.
pub fn kl_joint_bruteforce(p: &NaiveBayesModel, q: &NaiveBayesModel) -> Result<f64> {
    check_comparable(p, q)?;
    let mut states = p.classes();
    for &r in p.arities() {
        states = states.saturating_mul(r);
        if states > MAX_JOINT_STATES {
            return Err(Error::Param(format!(
                "joint state space exceeds {MAX_JOINT_STATES} states"
            )));
        }
    }
    let arities = p.arities();
    let mut x = vec![0u32; arities.len()];
    let mut total = 0.0;
    loop {
        for j in 0..p.classes() {
            let mut pj = p.prior()[j];
            let mut qj = q.prior()[j];
            for (i, &v) in x.iter().enumerate() {
                pj *= p.cpt(i)[j][v as usize];
                qj *= q.cpt(i)[j][v as usize];
            }
            if pj > 0.0 {
                if qj == 0.0 {
                    return Err(Error::Structure("q is 0 where p is positive".into()));
                }
                total += pj * (pj / qj).ln();
            }
        }
        // Odometer increment over the feature values.
        let mut i = 0;
        loop {
            if i == x.len() {
                return Ok(total);
            }
            x[i] += 1;
            if (x[i] as usize) < arities[i] {
                break;
            }
            x[i] = 0;
            i += 1;
        }
    }
}

/// Rule mapping the source/target KL divergence to the adversarial weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSchedule {
    /// A constant weight.
    Fixed(f64),
    /// The KL divergence itself.
    KlDirect,
    /// `alpha * (1 - exp(-kl))`.
    Bounded(f64),
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaSchedule::Fixed(l) if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::Param(format!("fixed lambda must be >= 0, got {l}")))
            }
            LambdaSchedule::Bounded(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::Param(format!("bounded alpha must be > 0, got {a}")))
            }
            _ => Ok(()),
        }
    }

    pub fn resolve(&self, kl: f64) -> f64 {
        resolve_lambda(*self, kl)
    }
}

pub fn resolve_lambda(schedule: LambdaSchedule, kl: f64) -> f64 {
    match schedule {
        LambdaSchedule::Fixed(l) => l,
        LambdaSchedule::KlDirect => kl,
        LambdaSchedule::Bounded(alpha) => alpha * (1.0 - (-kl).exp()),
    }
}

impl fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaSchedule::Fixed(l) => write!(f, "fixed({l})"),
            LambdaSchedule::KlDirect => f.write_str("kl_direct"),
            LambdaSchedule::Bounded(a) => write!(f, "bounded({a})"),
        }
    }
}

impl FromStr for LambdaSchedule {
    type Err = Error;

    /// Parses `fixed(<lambda>)`, `kl_direct` or `bounded(<alpha>)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let arg = |prefix: &str| -> Option<Result<f64>> {
            let inner = s.strip_prefix(prefix)?.strip_suffix(')')?;
            Some(
                inner
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Param(format!("bad number in lambda schedule {s:?}"))),
            )
        };
        let schedule = if s == "kl_direct" {
            LambdaSchedule::KlDirect
        } else if let Some(v) = arg("fixed(") {
            LambdaSchedule::Fixed(v?)
        } else if let Some(v) = arg("bounded(") {
            LambdaSchedule::Bounded(v?)
        } else {
            return Err(Error::Param(format!(
                "unknown lambda schedule {s:?}; use fixed(x), kl_direct or bounded(a)"
            )));
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

impl Serialize for LambdaSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LambdaSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
