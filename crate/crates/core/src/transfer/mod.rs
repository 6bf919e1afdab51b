//! The learning strategies under comparison: domain-adversarial training,
//! maximum classifier discrepancy, fine-tuning with layer freezing, and
//! plain source/target baselines.

mod dann;
mod finetune;
mod mcd;
mod model;

pub use dann::{train_dann, DannEpoch, DannModel, DannSpecs};
pub use finetune::{fine_tune, FreezeStrategy};
pub use mcd::{
    discrepancy, discrepancy_value, train_mcd, McdConfig, McdInference, McdModel, McdSpecs,
    McdTrainer,
};
pub use model::TrainedModel;

use crate::error::Result;
use crate::nn::{train_classifier, Encoded, Network, NetworkSpec, TrainConfig};

/// Trains `spec` from scratch on labeled data, initialized with `cfg.seed`.
pub fn train_baseline(data: &Encoded, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<Network> {
    let mut net = Network::init(spec, cfg.seed);
    train_classifier(&mut net, data, cfg)?;
    Ok(net)
}

/// Baseline that only sees labeled source data.
pub fn train_source_baseline(
    source: &Encoded,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<Network> {
    train_baseline(source, spec, cfg)
}

/// Baseline trained on labeled target data only.
pub fn train_target_baseline(
    target: &Encoded,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<Network> {
    train_baseline(target, spec, cfg)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::bayesnet::{default_target_model, NaiveBayesModel};
    use crate::nn::{Encoded, Network};

    pub fn model(n_features: usize, seed: u64) -> NaiveBayesModel {
        default_target_model(n_features, 4, seed).unwrap()
    }

    pub fn encoded(model: &NaiveBayesModel, rows: usize, seed: u64) -> Encoded {
        model
            .sample(rows, seed)
            .unwrap()
            .encode(model.arities())
            .unwrap()
    }

    pub fn bits(net: &Network) -> Vec<Vec<u64>> {
        net.params()
            .iter()
            .map(|p| p.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::nn::evaluate;

    #[test]
    fn baselines_are_deterministic() {
        let m = model(6, 1);
        let data = encoded(&m, 300, 2);
        let spec = NetworkSpec::baseline(12, 4, true);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_source_baseline(&data, &spec, &cfg).unwrap();
        let b = train_target_baseline(&data, &spec, &cfg).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn more_target_rows_do_not_hurt_on_average() {
        let m = model(8, 3);
        let test = encoded(&m, 3000, 4);
        let spec = NetworkSpec::baseline(16, 4, true);
        let mean_acc = |size: usize| -> f64 {
            (0..3)
                .map(|r| {
                    let data = encoded(&m, size, 10 + r);
                    let cfg = TrainConfig {
                        epochs: 20,
                        seed: r,
                        ..TrainConfig::default()
                    };
                    evaluate(&train_target_baseline(&data, &spec, &cfg).unwrap(), &test).unwrap()
                })
                .sum::<f64>()
                / 3.0
        };
        let small = mean_acc(50);
        let large = mean_acc(2000);
        assert!(large >= small, "50 rows: {small}, 2000 rows: {large}");
    }
}
