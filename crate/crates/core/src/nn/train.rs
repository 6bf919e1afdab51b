use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network, Sgd, Trainable};
use crate::autodiff::{Graph, Mode, Tensor};
use crate::divergence::LambdaSchedule;
use crate::error::{Error, Result};
use crate::seed;

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: LambdaSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 100,
            lambda: LambdaSchedule::Fixed(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.lambda.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// One-hot encoded inputs with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Encoded {
    pub fn rows(&self) -> usize {
        self.inputs.rows()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))
    }

    /// Copies the given rows.
    pub fn select(&self, rows: &[usize]) -> Encoded {
        Encoded {
            inputs: gather_rows(&self.inputs, rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    pub fn without_labels(&self) -> Encoded {
        Encoded {
            inputs: self.inputs.clone(),
            labels: None,
        }
    }
}

pub(crate) fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(rows.len(), cols, data).expect("gather shape")
}

/// Shuffled mini-batches of `0..n` for one epoch. The permutation is seeded
/// from `(seed, epoch)`. A trailing batch of one row is merged into the
/// previous batch so batch norm always sees at least two rows.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::mix(&[seed, epoch as u64])));
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

/// Endless stream of row indices, reshuffled on every pass.
pub(crate) struct CyclingSampler {
    n: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl CyclingSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = CyclingSampler {
            n,
            seed,
            pass: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut seed::rng(seed::mix(&[self.seed, self.pass])));
        self.pass += 1;
        self.pos = 0;
    }

    /// Next `size` indices (at most `n`), continuing into a fresh
    /// permutation when the current one runs out.
    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.n);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mini-batch SGD on cross-entropy. Returns the mean training loss of each
/// epoch.
pub fn train_classifier(net: &mut Network, data: &Encoded, cfg: &TrainConfig) -> Result<Vec<f64>> {
    train_with(net, data, cfg, &Trainable::All)
}

pub(crate) fn train_with(
    net: &mut Network,
    data: &Encoded,
    cfg: &TrainConfig,
    trainable: &Trainable,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let labels = data.labels()?;
    if data.rows() == 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if data.inputs.cols() != net.spec().input_width() {
        return Err(Error::Shape {
            op: "train_classifier input",
            left: data.inputs.shape(),
            right: (net.spec().input_width(), 0),
        });
    }
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let n_layers = net.spec().layers().len();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(data.rows(), cfg.batch_size, cfg.seed, epoch) {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, trainable)?;
            let x = g.input(gather_rows(&data.inputs, &batch));
            let probs = net.forward(&mut g, &bound, x, 0..n_layers, Mode::Train)?;
            let ys: Vec<usize> = batch.iter().map(|&r| labels[r]).collect();
            let loss = g.cross_entropy(probs, &ys)?;
            total += g.value(loss).item().expect("scalar") * batch.len() as f64;
            let grads = g.backward(loss)?;
            sgd.step(net, &Gradients::from_pass(net, &grads, &bound))?;
        }
        history.push(total / data.rows() as f64);
    }
    Ok(history)
}

const EVAL_CHUNK: usize = 2048;

/// Class predictions (argmax, ties to the lowest index) with batch norm in
/// eval mode.
pub fn predict_classes(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.rows());
    let rows: Vec<usize> = (0..inputs.rows()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        out.extend(net.predict(&gather_rows(inputs, chunk))?.argmax_rows());
    }
    Ok(out)
}

/// Fraction of rows whose predicted class equals the label.
pub fn evaluate(net: &Network, data: &Encoded) -> Result<f64> {
    let labels = data.labels()?;
    if data.rows() == 0 {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let predicted = predict_classes(net, &data.inputs)?;
    Ok(accuracy(&predicted, labels))
}

pub(crate) fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, NetworkSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn separable(rows: usize, seed: u64) -> Encoded {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..rows {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            // Keep a margin around the boundary a + b = 0.
            let s = a + b;
            let s = if s.abs() < 0.1 {
                s.signum() * 0.1 + s
            } else {
                s
            };
            data.extend([a, s - a]);
            labels.push(usize::from(s > 0.0));
        }
        Encoded {
            inputs: Tensor::new(rows, 2, data).unwrap(),
            labels: Some(labels),
        }
    }

    fn logistic(inputs: usize, classes: usize) -> NetworkSpec {
        NetworkSpec::new(
            "logistic",
            vec![LayerSpec::fc(inputs, classes), LayerSpec::Softmax],
        )
        .unwrap()
    }

    #[test]
    fn separable_toy_data_is_learned() {
        let data = separable(200, 1);
        let mut net = Network::init(&NetworkSpec::m1(2, 2), 5);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        train_classifier(&mut net, &data, &cfg).unwrap();
        assert!(evaluate(&net, &data).unwrap() >= 0.99);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = separable(100, 2);
        let cfg = TrainConfig {
            epochs: 1,
            seed: 11,
            ..TrainConfig::default()
        };
        let spec = NetworkSpec::baseline(2, 2, true);
        let mut a = Network::init(&spec, 1);
        let mut b = Network::init(&spec, 1);
        train_classifier(&mut a, &data, &cfg).unwrap();
        train_classifier(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let data = separable(64, 4);
        let mut net = Network::init(&logistic(2, 2), 0);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 64,
            momentum: 0.0,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let losses = train_classifier(&mut net, &data, &cfg).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }

    #[test]
    fn config_validation() {
        let data = separable(10, 0);
        let mut net = Network::init(&logistic(2, 2), 0);
        for bad in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(
                train_classifier(&mut net, &data, &bad),
                Err(Error::Config(_))
            ));
        }
        let unlabeled = data.without_labels();
        assert!(train_classifier(&mut net, &unlabeled, &TrainConfig::default()).is_err());
    }

    #[test]
    fn constant_network_accuracy() {
        // Zero weights and a bias favouring class 0 always predict class 0.
        let mut net = Network::init(&logistic(3, 4), 0);
        for p in net.params_mut() {
            p.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        net.params_mut()[1].values_mut()[0] = 1.0;
        let rows = 10_000;
        let inputs = Tensor::filled(rows, 3, 1.0);
        let all_zero = Encoded {
            inputs: inputs.clone(),
            labels: Some(vec![0; rows]),
        };
        assert_eq!(evaluate(&net, &all_zero).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let uniform = Encoded {
            inputs,
            labels: Some((0..rows).map(|_| rng.random_range(0..4)).collect()),
        };
        assert!((evaluate(&net, &uniform).unwrap() - 0.25).abs() <= 0.02);
        let empty = Encoded {
            inputs: Tensor::zeros(0, 3),
            labels: Some(vec![]),
        };
        assert!(evaluate(&net, &empty).is_err());
    }

    #[test]
    fn evaluate_is_invariant_to_row_order() {
        let data = separable(300, 6);
        let mut net = Network::init(&NetworkSpec::baseline(2, 2, true), 2);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        train_classifier(&mut net, &data, &cfg).unwrap();
        let mut order: Vec<usize> = (0..300).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let shuffled = data.select(&order);
        assert_eq!(
            evaluate(&net, &data).unwrap(),
            evaluate(&net, &shuffled).unwrap()
        );
    }

    #[test]
    fn batches_cover_rows_and_never_have_one_row() {
        let batches = epoch_batches(129, 64, 1, 0);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[1].len(), 65);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..129).collect::<Vec<_>>());
        assert_ne!(epoch_batches(129, 64, 1, 0), epoch_batches(129, 64, 1, 1));
    }

    #[test]
    fn cycling_sampler_wraps_with_fresh_permutations() {
        let mut s = CyclingSampler::new(5, 9);
        let a = s.next_batch(3);
        let b = s.next_batch(3);
        assert_eq!(a.len(), 3);
        assert_eq!(b.len(), 3);
        assert_eq!(s.next_batch(64).len(), 5);
    }
}
