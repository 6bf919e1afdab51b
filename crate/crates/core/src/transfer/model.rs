use crate::autodiff::Tensor;
use crate::divergence::LambdaSchedule;
use crate::error::{Error, Result};
use crate::nn::{evaluate, Encoded, Network, ParameterFile};

use super::{DannModel, McdModel};

/// Any trained model, as stored in a parameter file.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    /// A single classifier (baselines and fine-tuned networks).
    Classifier {
        algorithm: String,
        network: Network,
    },
    Dann {
        algorithm: String,
        model: DannModel,
    },
    Mcd(McdModel),
}

fn meta<T: std::str::FromStr>(file: &ParameterFile, key: &str) -> Result<T> {
    let raw = file
        .metadata
        .get(key)
        .ok_or_else(|| Error::Model(format!("parameter file lacks metadata {key:?}")))?;
    raw.parse()
        .map_err(|_| Error::Model(format!("bad metadata {key:?}: {raw:?}")))
}

impl TrainedModel {
    pub fn algorithm(&self) -> &str {
        match self {
            TrainedModel::Classifier { algorithm, .. } | TrainedModel::Dann { algorithm, .. } => {
                algorithm
            }
            TrainedModel::Mcd(_) => "mcd",
        }
    }

    /// Class probabilities with batch norm in eval mode.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        match self {
            TrainedModel::Classifier { network, .. } => network.predict(inputs),
            TrainedModel::Dann { model, .. } => model.predict(inputs),
            TrainedModel::Mcd(m) => m.predict(inputs),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            TrainedModel::Classifier { network, .. } => network.spec().input_width(),
            TrainedModel::Dann { model, .. } => model.backbone.spec().input_width(),
            TrainedModel::Mcd(m) => m.generator.spec().input_width(),
        }
    }

    pub fn evaluate(&self, data: &Encoded) -> Result<f64> {
        match self {
            TrainedModel::Classifier { network, .. } => evaluate(network, data),
            TrainedModel::Dann { model, .. } => model.evaluate(data),
            TrainedModel::Mcd(m) => m.evaluate(data),
        }
    }

    pub fn to_parameter_file(&self) -> ParameterFile {
        match self {
            TrainedModel::Classifier { algorithm, network } => {
                ParameterFile::new(algorithm.clone()).with_network("classifier", network.clone())
            }
            TrainedModel::Dann { algorithm, model } => model.to_parameter_file(algorithm),
            TrainedModel::Mcd(m) => m.to_parameter_file(),
        }
    }

    /// Rebuilds a model from the networks and metadata of `file`. DANN
    /// training history is not stored and comes back empty.
    pub fn from_parameter_file(file: &ParameterFile) -> Result<Self> {
        let has = |role: &str| file.networks.iter().any(|n| n.role == role);
        if has("classifier") {
            return Ok(TrainedModel::Classifier {
                algorithm: file.algorithm.clone(),
                network: file.network("classifier")?.clone(),
            });
        }
        if has("backbone") {
            let backbone = file.network("backbone")?.clone();
            let split: usize = meta(file, "split")?;
            if split == 0 || split >= backbone.spec().layers().len() {
                return Err(Error::Model(format!("split {split} out of range")));
            }
            return Ok(TrainedModel::Dann {
                algorithm: file.algorithm.clone(),
                model: DannModel {
                    backbone,
                    split,
                    domain: file.network("domain")?.clone(),
                    schedule: meta::<LambdaSchedule>(file, "lambda_schedule")?,
                    lambda: meta(file, "lambda")?,
                    history: Vec::new(),
                },
            });
        }
        if has("generator") {
            let model = McdModel {
                generator: file.network("generator")?.clone(),
                f1: file.network("f1")?.clone(),
                f2: file.network("f2")?.clone(),
                lambda: meta(file, "lambda")?,
                n_c: meta(file, "n_c")?,
                inference: meta(file, "inference")?,
            };
            if model.f1.spec() != model.f2.spec() {
                return Err(Error::Model("MCD classifiers have different specs".into()));
            }
            return Ok(TrainedModel::Mcd(model));
        }
        Err(Error::Model(format!(
            "parameter file for {:?} holds no classifier, backbone or generator network",
            file.algorithm
        )))
    }
}
