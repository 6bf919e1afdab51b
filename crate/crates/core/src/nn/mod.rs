//! Feed-forward networks: declarative specs, parameter state, momentum
//! SGD, training and evaluation.

mod io;
mod network;
mod spec;
mod train;

pub use io::{NamedNetwork, ParameterFile, PARAMETER_FORMAT, PARAMETER_VERSION};
pub use network::{Bound, Gradients, LayerState, Network, Sgd, Trainable};
pub use spec::{LayerSpec, NetworkSpec};
pub use train::{epoch_batches, evaluate, predict_classes, train_classifier, Encoded, TrainConfig};

pub(crate) use train::{accuracy, gather_rows, train_with, CyclingSampler};
