use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    epoch_batches, gather_rows, CyclingSampler, Encoded, Network, NetworkSpec, ParameterFile, Sgd,
    TrainConfig, Trainable,
};
use crate::seed;

const F1_STREAM: u64 = 0xF1;
const F2_STREAM: u64 = 0xF2;
const TARGET_STREAM: u64 = 0x7B;

/// Mean absolute difference between two row-stochastic matrices, averaged
/// over rows and classes.
pub fn discrepancy(g: &mut Graph, p1: Var, p2: Var) -> Result<Var> {
    if g.value(p1).shape() != g.value(p2).shape() {
        return Err(Error::Shape {
            op: "discrepancy",
            left: g.value(p1).shape(),
            right: g.value(p2).shape(),
        });
    }
    let d = g.sub(p1, p2)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// [`discrepancy`] on plain tensors.
pub fn discrepancy_value(p1: &Tensor, p2: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.input(p1.clone());
    let b = g.input(p2.clone());
    let d = discrepancy(&mut g, a, b)?;
    Ok(g.value(d).item().expect("scalar"))
}

/// Which classifier output drives predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McdInference {
    #[default]
    F1,
    F2,
    Average,
}

impl std::fmt::Display for McdInference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            McdInference::F1 => "f1",
            McdInference::F2 => "f2",
            McdInference::Average => "average",
        })
    }
}

impl std::str::FromStr for McdInference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(McdInference::F1),
            "f2" => Ok(McdInference::F2),
            "average" => Ok(McdInference::Average),
            _ => Err(Error::Param(format!(
                "unknown MCD inference {s:?} (expected f1, f2 or average)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McdConfig {
    /// Generator updates per iteration in the discrepancy-minimizing step.
    pub n_c: usize,
    pub inference: McdInference,
}

impl Default for McdConfig {
    fn default() -> Self {
        McdConfig {
            n_c: 4,
            inference: McdInference::F1,
        }
    }
}

/// Generator and classifier layer lists; both classifiers share one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct McdSpecs {
    pub generator: NetworkSpec,
    pub classifier: NetworkSpec,
}

impl McdSpecs {
    pub fn standard(input: usize, classes: usize) -> Self {
        McdSpecs {
            generator: NetworkSpec::feature_extractor(input),
            classifier: NetworkSpec::mcd_classifier(classes),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McdModel {
    pub generator: Network,
    pub f1: Network,
    pub f2: Network,
    pub lambda: f64,
    pub n_c: usize,
    pub inference: McdInference,
}

impl McdModel {
    /// Fresh model: the generator is initialized from `seed`, the two
    /// classifiers from distinct derived seeds.
    pub fn init(specs: &McdSpecs, seed: u64, lambda: f64, cfg: McdConfig) -> Result<Self> {
        if specs.generator.output_width() != specs.classifier.input_width() {
            return Err(Error::Param(format!(
                "generator width {} does not match classifier input {}",
                specs.generator.output_width(),
                specs.classifier.input_width()
            )));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Param(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if cfg.n_c == 0 {
            return Err(Error::Param("n_c must be at least 1".into()));
        }
        Ok(McdModel {
            generator: Network::init(&specs.generator, seed),
            f1: Network::init(&specs.classifier, seed::mix(&[seed, F1_STREAM])),
            f2: Network::init(&specs.classifier, seed::mix(&[seed, F2_STREAM])),
            lambda,
            n_c: cfg.n_c,
            inference: cfg.inference,
        })
    }

    /// Class probabilities with batch norm in eval mode.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let h = self.generator.predict(inputs)?;
        match self.inference {
            McdInference::F1 => self.f1.predict(&h),
            McdInference::F2 => self.f2.predict(&h),
            McdInference::Average => {
                let a = self.f1.predict(&h)?;
                let b = self.f2.predict(&h)?;
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| 0.5 * (x + y))
                    .collect();
                Tensor::new(a.rows(), a.cols(), data)
            }
        }
    }

    pub fn predict_classes(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(inputs)?.argmax_rows())
    }

    pub fn evaluate(&self, data: &Encoded) -> Result<f64> {
        let labels = data.labels()?;
        if data.rows() == 0 {
            return Err(Error::Data("cannot evaluate on an empty dataset".into()));
        }
        let predicted = self.predict_classes(&data.inputs)?;
        Ok(crate::nn::accuracy(&predicted, labels))
    }

    /// Classifier disagreement on `inputs`.
    pub fn discrepancy_on(&self, inputs: &Tensor) -> Result<f64> {
        let h = self.generator.predict(inputs)?;
        discrepancy_value(&self.f1.predict(&h)?, &self.f2.predict(&h)?)
    }

    pub fn to_parameter_file(&self) -> ParameterFile {
        ParameterFile::new("mcd")
            .with_meta("lambda", self.lambda)
            .with_meta("n_c", self.n_c)
            .with_meta("inference", self.inference)
            .with_network("generator", self.generator.clone())
            .with_network("f1", self.f1.clone())
            .with_network("f2", self.f2.clone())
    }
}

/// The three MCD update steps, each with its own optimizer scope.
pub struct McdTrainer {
    model: McdModel,
    sgd_g: Sgd,
    sgd_f1: Sgd,
    sgd_f2: Sgd,
}

impl McdTrainer {
    pub fn new(model: McdModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(McdTrainer {
            model,
            sgd_g: Sgd::new(cfg.learning_rate, cfg.momentum),
            sgd_f1: Sgd::new(cfg.learning_rate, cfg.momentum),
            sgd_f2: Sgd::new(cfg.learning_rate, cfg.momentum),
        })
    }

    pub fn model(&self) -> &McdModel {
        &self.model
    }

    pub fn into_model(self) -> McdModel {
        self.model
    }

    fn classifiers(
        &mut self,
        g: &mut Graph,
        h: Var,
        b1: &crate::nn::Bound,
        b2: &crate::nn::Bound,
    ) -> Result<(Var, Var)> {
        let n = self.model.f1.spec().layers().len();
        let p1 = self.model.f1.forward(g, b1, h, 0..n, Mode::Train)?;
        let p2 = self.model.f2.forward(g, b2, h, 0..n, Mode::Train)?;
        Ok((p1, p2))
    }

    /// Step A: update all networks on the summed source cross-entropy of
    /// both classifiers.
    pub fn step_a(&mut self, xs: &Tensor, ys: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let bg = self.model.generator.bind(&mut g, &Trainable::All)?;
        let b1 = self.model.f1.bind(&mut g, &Trainable::All)?;
        let b2 = self.model.f2.bind(&mut g, &Trainable::All)?;
        let x = g.input(xs.clone());
        let n_g = self.model.generator.spec().layers().len();
        let h = self
            .model
            .generator
            .forward(&mut g, &bg, x, 0..n_g, Mode::Train)?;
        let (p1, p2) = self.classifiers(&mut g, h, &b1, &b2)?;
        let l1 = g.cross_entropy(p1, ys)?;
        let l2 = g.cross_entropy(p2, ys)?;
        let loss = g.add(l1, l2)?;
        let grads = g.backward(loss)?;
        let m = &mut self.model;
        self.sgd_g.apply(&mut m.generator, &grads, &bg)?;
        self.sgd_f1.apply(&mut m.f1, &grads, &b1)?;
        self.sgd_f2.apply(&mut m.f2, &grads, &b2)?;
        Ok(g.value(loss).item().expect("scalar"))
    }

    /// Step B: with the generator fixed, update both classifiers to keep the
    /// source loss low while increasing their disagreement on the target.
    pub fn step_b(&mut self, xs: &Tensor, ys: &[usize], xt: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let bg = self.model.generator.bind(&mut g, &Trainable::Nothing)?;
        let b1 = self.model.f1.bind(&mut g, &Trainable::All)?;
        let b2 = self.model.f2.bind(&mut g, &Trainable::All)?;
        let n_g = self.model.generator.spec().layers().len();
        let xs_v = g.input(xs.clone());
        let xt_v = g.input(xt.clone());
        let hs = self
            .model
            .generator
            .forward(&mut g, &bg, xs_v, 0..n_g, Mode::Train)?;
        let ht = self
            .model
            .generator
            .forward(&mut g, &bg, xt_v, 0..n_g, Mode::Train)?;
        let h = g.concat_rows(&[hs, ht])?;
        let (p1, p2) = self.classifiers(&mut g, h, &b1, &b2)?;
        let (ns, nt) = (xs.rows(), xt.rows());
        let p1s = g.slice_rows(p1, 0, ns)?;
        let p2s = g.slice_rows(p2, 0, ns)?;
        let p1t = g.slice_rows(p1, ns, ns + nt)?;
        let p2t = g.slice_rows(p2, ns, ns + nt)?;
        let l1 = g.cross_entropy(p1s, ys)?;
        let l2 = g.cross_entropy(p2s, ys)?;
        let source = g.add(l1, l2)?;
        let d = discrepancy(&mut g, p1t, p2t)?;
        let d = g.scale(d, self.model.lambda);
        let loss = g.sub(source, d)?;
        let grads = g.backward(loss)?;
        let m = &mut self.model;
        self.sgd_f1.apply(&mut m.f1, &grads, &b1)?;
        self.sgd_f2.apply(&mut m.f2, &grads, &b2)?;
        Ok(g.value(loss).item().expect("scalar"))
    }

    /// Step C: with both classifiers fixed, update the generator to reduce
    /// their disagreement on the target.
    pub fn step_c(&mut self, xt: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let bg = self.model.generator.bind(&mut g, &Trainable::All)?;
        let b1 = self.model.f1.bind(&mut g, &Trainable::Nothing)?;
        let b2 = self.model.f2.bind(&mut g, &Trainable::Nothing)?;
        let n_g = self.model.generator.spec().layers().len();
        let x = g.input(xt.clone());
        let h = self
            .model
            .generator
            .forward(&mut g, &bg, x, 0..n_g, Mode::Train)?;
        let (p1, p2) = self.classifiers(&mut g, h, &b1, &b2)?;
        let loss = discrepancy(&mut g, p1, p2)?;
        let grads = g.backward(loss)?;
        let m = &mut self.model;
        self.sgd_g.apply(&mut m.generator, &grads, &bg)?;
        Ok(g.value(loss).item().expect("scalar"))
    }
}

/// Maximum classifier discrepancy training. Each iteration pairs a source
/// batch with an equally sized target batch and runs steps A, B and then C
/// `n_c` times.
pub fn train_mcd(
    source: &Encoded,
    target: &Encoded,
    specs: &McdSpecs,
    cfg: &TrainConfig,
    lambda: f64,
    mcd: McdConfig,
) -> Result<McdModel> {
    cfg.validate()?;
    let ys = source
        .labels()
        .map_err(|_| Error::Data("MCD needs a labeled source".into()))?;
    if source.rows() == 0 {
        return Err(Error::Data("source must be non-empty".into()));
    }
    if target.rows() == 0 {
        return Err(Error::Data("MCD needs target rows".into()));
    }
    if source.inputs.cols() != target.inputs.cols() {
        return Err(Error::Shape {
            op: "train_mcd domains",
            left: source.inputs.shape(),
            right: target.inputs.shape(),
        });
    }
    let model = McdModel::init(specs, cfg.seed, lambda, mcd)?;
    let mut trainer = McdTrainer::new(model, cfg)?;
    let mut target_stream =
        CyclingSampler::new(target.rows(), seed::mix(&[cfg.seed, TARGET_STREAM]));
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(source.rows(), cfg.batch_size, cfg.seed, epoch) {
            let t_batch = target_stream.next_batch(batch.len());
            let xs = gather_rows(&source.inputs, &batch);
            let xt = gather_rows(&target.inputs, &t_batch);
            let ys_b: Vec<usize> = batch.iter().map(|&r| ys[r]).collect();
            trainer.step_a(&xs, &ys_b)?;
            trainer.step_b(&xs, &ys_b, &xt)?;
            for _ in 0..mcd.n_c {
                trainer.step_c(&xt)?;
            }
        }
    }
    Ok(trainer.into_model())
}
