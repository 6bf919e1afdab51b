use crate::autodiff::{Graph, Mode, Tensor};
use crate::divergence::LambdaSchedule;
use crate::error::{Error, Result};
use crate::nn::{
    accuracy, epoch_batches, gather_rows, CyclingSampler, Encoded, Network, NetworkSpec,
    ParameterFile, Sgd, TrainConfig, Trainable,
};
use crate::seed;

const DOMAIN_STREAM: u64 = 0xD0;
const TARGET_STREAM: u64 = 0x7A;

/// Layer lists for the feature extractor, label predictor and domain
/// classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct DannSpecs {
    pub feature: NetworkSpec,
    pub label: NetworkSpec,
    pub domain: NetworkSpec,
}

impl DannSpecs {
    /// Feature extractor and label predictor as in the baseline, and a
    /// 1024-wide domain classifier.
    pub fn standard(input: usize, classes: usize, label_relu: bool) -> Self {
        DannSpecs {
            feature: NetworkSpec::feature_extractor(input),
            label: NetworkSpec::label_predictor(classes, label_relu),
            domain: NetworkSpec::domain_classifier(1024),
        }
    }

    pub fn with_domain_width(mut self, hidden: usize) -> Self {
        self.domain = NetworkSpec::domain_classifier(hidden);
        self
    }

    fn validate(&self) -> Result<()> {
        let f = self.feature.output_width();
        if self.label.input_width() != f || self.domain.input_width() != f {
            return Err(Error::Param(format!(
                "feature width {f} must feed label ({}) and domain ({}) networks",
                self.label.input_width(),
                self.domain.input_width()
            )));
        }
        if self.domain.output_width() != 1 {
            return Err(Error::Param(
                "domain classifier must have one output".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training means.
#[derive(Clone, Debug, PartialEq)]
pub struct DannEpoch {
    pub label_loss: f64,
    pub domain_loss: f64,
}

/// A trained domain-adversarial model.
///
/// `backbone` holds the feature extractor followed by the label predictor;
/// layers `..split` are the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct DannModel {
    pub backbone: Network,
    pub split: usize,
    pub domain: Network,
    pub schedule: LambdaSchedule,
    pub lambda: f64,
    pub history: Vec<DannEpoch>,
}

impl DannModel {
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        self.backbone.predict(inputs)
    }

    pub fn evaluate(&self, data: &Encoded) -> Result<f64> {
        crate::nn::evaluate(&self.backbone, data)
    }

    /// Feature-extractor output in eval mode.
    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        self.backbone.predict_range(inputs, 0..self.split)
    }

    /// Accuracy of the domain classifier at telling source rows (label 0)
    /// from target rows (label 1).
    pub fn domain_accuracy(&self, source: &Tensor, target: &Tensor) -> Result<f64> {
        let mut predicted = Vec::new();
        for inputs in [source, target] {
            let p = self.domain.predict(&self.features(inputs)?)?;
            predicted.extend(p.data().iter().map(|&v| usize::from(v > 0.5)));
        }
        let truth: Vec<usize> = std::iter::repeat_n(0, source.rows())
            .chain(std::iter::repeat_n(1, target.rows()))
            .collect();
        Ok(accuracy(&predicted, &truth))
    }

    pub fn to_parameter_file(&self, algorithm: &str) -> ParameterFile {
        ParameterFile::new(algorithm)
            .with_meta("split", self.split)
            .with_meta("lambda_schedule", self.schedule)
            .with_meta("lambda", self.lambda)
            .with_network("backbone", self.backbone.clone())
            .with_network("domain", self.domain.clone())
    }
}

/// Domain-adversarial training.
///
/// Each step draws a source batch and an equally sized target batch (the
/// target stream cycles independently). The loss is the source
/// cross-entropy, plus the target cross-entropy when `use_target_labels`,
/// plus the domain binary cross-entropy of both batches (source labeled 0,
/// target 1). Features reach the domain classifier through a gradient
/// reversal with weight `cfg.lambda` resolved at `kl`.
pub fn train_dann(
    source: &Encoded,
    target: &Encoded,
    specs: &DannSpecs,
    cfg: &TrainConfig,
    kl: f64,
    use_target_labels: bool,
) -> Result<DannModel> {
    cfg.validate()?;
    specs.validate()?;
    let ys = source
        .labels()
        .map_err(|_| Error::Data("DANN needs a labeled source".into()))?;
    let yt = if use_target_labels {
        Some(target.labels().map_err(|_| {
            Error::Data("target labels requested but the target set is unlabeled".into())
        })?)
    } else {
        None
    };
    if source.inputs.cols() != target.inputs.cols() {
        return Err(Error::Shape {
            op: "train_dann domains",
            left: source.inputs.shape(),
            right: target.inputs.shape(),
        });
    }
    if source.rows() == 0 || target.rows() == 0 {
        return Err(Error::Data("source and target must be non-empty".into()));
    }
    let lambda = cfg.lambda.resolve(kl);
    let backbone_spec = specs.feature.then(&specs.label)?;
    let split = specs.feature.layers().len();
    let n_layers = backbone_spec.layers().len();
    let mut backbone = Network::init(&backbone_spec, cfg.seed);
    let mut domain = Network::init(&specs.domain, seed::mix(&[cfg.seed, DOMAIN_STREAM]));
    let mut sgd_b = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut sgd_d = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut target_stream =
        CyclingSampler::new(target.rows(), seed::mix(&[cfg.seed, TARGET_STREAM]));
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (mut label_total, mut domain_total, mut steps) = (0.0, 0.0, 0usize);
        for batch in epoch_batches(source.rows(), cfg.batch_size, cfg.seed, epoch) {
            let t_batch = target_stream.next_batch(batch.len());
            let (ns, nt) = (batch.len(), t_batch.len());
            let mut g = Graph::new();
            let bb = backbone.bind(&mut g, &Trainable::All)?;
            let bd = domain.bind(&mut g, &Trainable::All)?;
            let xs = g.input(gather_rows(&source.inputs, &batch));
            let xt = g.input(gather_rows(&target.inputs, &t_batch));
            let hs = backbone.forward(&mut g, &bb, xs, 0..split, Mode::Train)?;
            let ys_b: Vec<usize> = batch.iter().map(|&r| ys[r]).collect();
            let (label_loss, ht) = match yt {
                None => {
                    let ps = backbone.forward(&mut g, &bb, hs, split..n_layers, Mode::Train)?;
                    let l = g.cross_entropy(ps, &ys_b)?;
                    let ht = backbone.forward(&mut g, &bb, xt, 0..split, Mode::Train)?;
                    (l, ht)
                }
                Some(yt) => {
                    let ht = backbone.forward(&mut g, &bb, xt, 0..split, Mode::Train)?;
                    let h = g.concat_rows(&[hs, ht])?;
                    let p = backbone.forward(&mut g, &bb, h, split..n_layers, Mode::Train)?;
                    let ps = g.slice_rows(p, 0, ns)?;
                    let pt = g.slice_rows(p, ns, ns + nt)?;
                    let yt_b: Vec<usize> = t_batch.iter().map(|&r| yt[r]).collect();
                    let ls = g.cross_entropy(ps, &ys_b)?;
                    let lt = g.cross_entropy(pt, &yt_b)?;
                    (g.add(ls, lt)?, ht)
                }
            };
            let rs = g.grad_reverse(hs, lambda)?;
            let rt = g.grad_reverse(ht, lambda)?;
            let d_in = g.concat_rows(&[rs, rt])?;
            let d = domain.forward(
                &mut g,
                &bd,
                d_in,
                0..specs.domain.layers().len(),
                Mode::Train,
            )?;
            let ds = g.slice_rows(d, 0, ns)?;
            let dt = g.slice_rows(d, ns, ns + nt)?;
            let ls = g.binary_cross_entropy(ds, &vec![0.0; ns])?;
            let lt = g.binary_cross_entropy(dt, &vec![1.0; nt])?;
            let domain_loss = g.add(ls, lt)?;
            let loss = g.add(label_loss, domain_loss)?;
            label_total += g.value(label_loss).item().expect("scalar");
            domain_total += g.value(domain_loss).item().expect("scalar");
            steps += 1;
            let grads = g.backward(loss)?;
            sgd_b.apply(&mut backbone, &grads, &bb)?;
            sgd_d.apply(&mut domain, &grads, &bd)?;
        }
        history.push(DannEpoch {
            label_loss: label_total / steps as f64,
            domain_loss: domain_total / steps as f64,
        });
    }
    Ok(DannModel {
        backbone,
        split,
        domain,
        schedule: cfg.lambda,
        lambda,
        history,
    })
}
