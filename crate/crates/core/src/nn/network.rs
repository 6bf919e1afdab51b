use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, NetworkSpec};
use crate::autodiff::{Grads, Graph, Mode, RunningStats, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

/// Parameter state of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerState {
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        stats: RunningStats,
    },
    Stateless,
}

/// A network description together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerState>,
    init_seed: u64,
}

/// Which trainable groups (see [`NetworkSpec::groups`]) receive updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Nothing,
    Groups(Vec<bool>),
}

/// Graph leaves for a network's parameters, created by [`Network::bind`].
///
/// Parameters of frozen groups are bound as constants, and batch norm in a
/// frozen group always runs on its running statistics.
pub struct Bound {
    vars: Vec<Var>,
    trainable: Vec<bool>,
    group_frozen: Vec<bool>,
}

impl Bound {
    pub fn var(&self, param: usize) -> Var {
        self.vars[param]
    }

    pub fn is_trainable(&self, param: usize) -> bool {
        self.trainable[param]
    }
}

impl Network {
    /// Uniform He-style initialization: weights from U(-b, b) with
    /// `b = sqrt(6 / fan_in)`, zero biases, unit scale and zero shift for
    /// batch norm. Deterministic in `seed`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Network {
        let mut rng = seed::rng(seed);
        let layers = spec
            .layers()
            .iter()
            .map(|layer| match *layer {
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let bound = (6.0 / inputs as f64).sqrt();
                    let data = (0..inputs * outputs)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    LayerState::Dense {
                        weight: Tensor::new(inputs, outputs, data).expect("init shape"),
                        bias: Tensor::zeros(1, outputs),
                    }
                }
                LayerSpec::BatchNorm { width } => LayerState::BatchNorm {
                    gamma: Tensor::filled(1, width, 1.0),
                    beta: Tensor::zeros(1, width),
                    stats: RunningStats::new(width),
                },
                _ => LayerState::Stateless,
            })
            .collect();
        Network {
            spec: spec.clone(),
            layers,
            init_seed: seed,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Checks that parameter shapes agree with the layer list.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.spec.layers().len() {
            return Err(Error::Model(format!(
                "network {}: {} layer states for {} layers",
                self.spec.name(),
                self.layers.len(),
                self.spec.layers().len()
            )));
        }
        for (i, (spec, state)) in self.spec.layers().iter().zip(&self.layers).enumerate() {
            let ok = match (spec, state) {
                (
                    LayerSpec::FullyConnected { inputs, outputs },
                    LayerState::Dense { weight, bias },
                ) => weight.shape() == (*inputs, *outputs) && bias.shape() == (1, *outputs),
                (LayerSpec::BatchNorm { width }, LayerState::BatchNorm { gamma, beta, stats }) => {
                    gamma.shape() == (1, *width)
                        && beta.shape() == (1, *width)
                        && stats.width() == *width
                        && stats.var.len() == *width
                }
                (_, LayerState::Stateless) => spec.param_count() == 0,
                _ => false,
            };
            if !ok {
                return Err(Error::Model(format!(
                    "network {}: parameters of layer {i} do not match {spec:?}",
                    self.spec.name()
                )));
            }
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: weight then bias for dense
    /// layers, scale then shift for batch norm.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for state in &self.layers {
            match state {
                LayerState::Dense { weight, bias } => out.extend([weight, bias]),
                LayerState::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                LayerState::Stateless => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for state in &mut self.layers {
            match state {
                LayerState::Dense { weight, bias } => out.extend([weight, bias]),
                LayerState::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                LayerState::Stateless => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Group index of each entry of [`Network::params`].
    pub fn param_groups(&self) -> Vec<usize> {
        let layer_group = self.spec.group_of_layers();
        let mut out = Vec::new();
        for (i, state) in self.layers.iter().enumerate() {
            let n = match state {
                LayerState::Dense { .. } | LayerState::BatchNorm { .. } => 2,
                LayerState::Stateless => 0,
            };
            out.extend(std::iter::repeat_n(layer_group[i], n));
        }
        out
    }

    /// Creates graph leaves for every parameter.
    pub fn bind(&self, g: &mut Graph, trainable: &Trainable) -> Result<Bound> {
        let n_groups = self.spec.groups().len();
        let group_frozen = match trainable {
            Trainable::All => vec![false; n_groups],
            Trainable::Nothing => vec![true; n_groups],
            Trainable::Groups(mask) => {
                if mask.len() != n_groups {
                    return Err(Error::Param(format!(
                        "trainability mask has {} entries for {n_groups} groups",
                        mask.len()
                    )));
                }
                mask.iter().map(|t| !t).collect()
            }
        };
        let groups = self.param_groups();
        let mut vars = Vec::with_capacity(groups.len());
        let mut flags = Vec::with_capacity(groups.len());
        for (p, &grp) in self.params().into_iter().zip(&groups) {
            let train = !group_frozen[grp];
            vars.push(if train {
                g.param(p.clone())
            } else {
                g.input(p.clone())
            });
            flags.push(train);
        }
        Ok(Bound {
            vars,
            trainable: flags,
            group_frozen,
        })
    }

    /// Runs layers `range` on `x`. Batch norm in train mode updates the
    /// running statistics held by `self`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        range: Range<usize>,
        mode: Mode,
    ) -> Result<Var> {
        let layer_group = self.spec.group_of_layers();
        // Index of the first parameter of each layer.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut next = 0;
        for state in &self.layers {
            offsets.push(next);
            if !matches!(state, LayerState::Stateless) {
                next += 2;
            }
        }
        let in_width = g.value(x).cols();
        let expected = match self.spec.layers().get(range.start) {
            Some(LayerSpec::FullyConnected { inputs, .. }) => Some(*inputs),
            Some(LayerSpec::BatchNorm { width }) => Some(*width),
            _ => None,
        };
        if let Some(w) = expected {
            if w != in_width {
                return Err(Error::Shape {
                    op: "network input",
                    left: g.value(x).shape(),
                    right: (w, 0),
                });
            }
        }
        let mut h = x;
        for i in range {
            let p = offsets[i];
            h = match (&self.spec.layers()[i], &mut self.layers[i]) {
                (LayerSpec::FullyConnected { .. }, LayerState::Dense { .. }) => {
                    let z = g.matmul(h, bound.vars[p])?;
                    g.add_bias(z, bound.vars[p + 1])?
                }
                (LayerSpec::BatchNorm { .. }, LayerState::BatchNorm { stats, .. }) => {
                    let mode = if bound.group_frozen[layer_group[i]] {
                        Mode::Eval
                    } else {
                        mode
                    };
                    g.batch_norm(h, bound.vars[p], bound.vars[p + 1], stats, mode)?
                }
                (LayerSpec::Relu, _) => g.relu(h),
                (LayerSpec::Sigmoid, _) => g.sigmoid(h),
                (LayerSpec::Softmax, _) => g.softmax_rows(h),
                (spec, _) => {
                    return Err(Error::Model(format!(
                        "layer {i} state does not match {spec:?}"
                    )))
                }
            };
        }
        Ok(h)
    }

    /// Inference on a batch: every batch norm uses running statistics.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_range(x, 0..self.layers.len())
    }

    pub fn predict_range(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        // Eval mode never writes the statistics, so a scratch copy is enough.
        let mut scratch = self.clone();
        let mut g = Graph::new();
        let bound = scratch.bind(&mut g, &Trainable::Nothing)?;
        let xi = g.input(x.clone());
        let out = scratch.forward(&mut g, &bound, xi, range, Mode::Eval)?;
        Ok(g.value(out).clone())
    }
}

/// Accumulated gradients, one optional slot per network parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_for(net: &Network) -> Self {
        Gradients {
            slots: vec![None; net.params().len()],
        }
    }

    /// Adds this pass's gradients for every trainable bound parameter.
    pub fn accumulate(&mut self, grads: &Grads, bound: &Bound) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !bound.trainable[i] {
                continue;
            }
            if let Some(g) = grads.get(bound.vars[i]) {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.values_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn from_pass(net: &Network, grads: &Grads, bound: &Bound) -> Self {
        let mut out = Self::zeros_for(net);
        out.accumulate(grads, bound);
        out
    }

    pub fn zero(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }

    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.slots.get(param).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v = momentum * v + g`, `p = p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates one tensor in place, keeping its velocity under `index`.
    pub fn update(&mut self, index: usize, param: &mut Tensor, grad: &Tensor) {
        if self.velocity.len() <= index {
            self.velocity.resize(index + 1, None);
        }
        let v = self.velocity[index].get_or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
        for ((vv, p), gg) in v
            .values_mut()
            .iter_mut()
            .zip(param.values_mut().iter_mut())
            .zip(grad.data())
        {
            *vv = self.momentum * *vv + gg;
            *p -= self.learning_rate * *vv;
        }
    }

    /// Applies one step to every parameter that has a gradient. Parameters
    /// without one are left untouched, velocity included.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        for (i, p) in net.params_mut().into_iter().enumerate() {
            if let Some(g) = grads.get(i) {
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "sgd_step",
                        left: p.shape(),
                        right: g.shape(),
                    });
                }
                self.update(i, p, g);
            }
        }
        Ok(())
    }

    /// Steps `net` with the gradients of one backward pass.
    pub fn apply(&mut self, net: &mut Network, grads: &Grads, bound: &Bound) -> Result<()> {
        let g = Gradients::from_pass(net, grads, bound);
        self.step(net, &g)
    }
}
