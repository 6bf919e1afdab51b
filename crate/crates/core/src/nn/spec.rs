use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry in a declarative layer list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    FullyConnected { inputs: usize, outputs: usize },
    Relu,
    BatchNorm { width: usize },
    Sigmoid,
    Softmax,
}

impl LayerSpec {
    pub fn fc(inputs: usize, outputs: usize) -> Self {
        LayerSpec::FullyConnected { inputs, outputs }
    }

    pub fn bn(width: usize) -> Self {
        LayerSpec::BatchNorm { width }
    }

    /// Number of scalar parameters (weights, biases, scale, shift).
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::FullyConnected { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::BatchNorm { width } => 2 * width,
            _ => 0,
        }
    }
}

/// An ordered, width-checked list of layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct NetworkSpec {
    name: String,
    layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
struct RawSpec {
    name: String,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawSpec> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        NetworkSpec::new(raw.name, raw.layers)
    }
}

impl NetworkSpec {
    /// Validates that the list starts with a fully-connected layer and that
    /// adjacent widths agree.
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let name = name.into();
        let Some(LayerSpec::FullyConnected { inputs, .. }) = layers.first() else {
            return Err(Error::Param(format!(
                "network {name}: first layer must be fully connected"
            )));
        };
        let mut width = *inputs;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::FullyConnected { inputs, outputs } => {
                    if inputs != width || inputs == 0 || outputs == 0 {
                        return Err(Error::Param(format!(
                            "network {name}: layer {i} expects {inputs} inputs, previous width is {width}"
                        )));
                    }
                    width = outputs;
                }
                LayerSpec::BatchNorm { width: w } if w != width => {
                    return Err(Error::Param(format!(
                        "network {name}: batch norm at layer {i} has width {w}, previous width is {width}"
                    )));
                }
                _ => {}
            }
        }
        Ok(NetworkSpec { name, layers })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        match self.layers[0] {
            LayerSpec::FullyConnected { inputs, .. } => inputs,
            _ => unreachable!("validated in new"),
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                LayerSpec::FullyConnected { outputs, .. } => Some(outputs),
                _ => None,
            })
            .expect("validated in new")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Appends `other`, whose input width must equal this output width.
    pub fn then(&self, other: &NetworkSpec) -> Result<NetworkSpec> {
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        NetworkSpec::new(format!("{}+{}", self.name, other.name), layers)
    }

    /// Layer index ranges of the trainable groups: each fully-connected
    /// layer together with the normalization and activation layers that
    /// follow it up to the next fully-connected layer.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let starts: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::FullyConnected { .. }))
            .map(|(i, _)| i)
            .collect();
        starts
            .iter()
            .enumerate()
            .map(|(g, &s)| s..starts.get(g + 1).copied().unwrap_or(self.layers.len()))
            .collect()
    }

    /// Group index of each layer.
    pub fn group_of_layers(&self) -> Vec<usize> {
        let mut out = vec![0; self.layers.len()];
        for (g, r) in self.groups().into_iter().enumerate() {
            for i in r {
                out[i] = g;
            }
        }
        out
    }

    /// Feature extractor shared by DANN and MCD: FC(in,128), ReLU, FC(128,128), ReLU.
    pub fn feature_extractor(input: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec::new(
            "G_f",
            vec![
                LayerSpec::fc(input, 128),
                Relu,
                LayerSpec::fc(128, 128),
                Relu,
            ],
        )
        .expect("preset")
    }

    /// DANN label predictor: FC(128,classes), batch norm, ReLU, softmax.
    /// `relu = false` drops the ReLU in front of the softmax.
    pub fn label_predictor(classes: usize, relu: bool) -> Self {
        use LayerSpec::*;
        let mut layers = vec![LayerSpec::fc(128, classes), LayerSpec::bn(classes)];
        if relu {
            layers.push(Relu);
        }
        layers.push(Softmax);
        NetworkSpec::new("G_y", layers).expect("preset")
    }

    /// DANN domain classifier: 128 -> hidden -> hidden -> 1 with batch norm
    /// and ReLU on the hidden layers and a sigmoid output.
    pub fn domain_classifier(hidden: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec::new(
            "G_d",
            vec![
                LayerSpec::fc(128, hidden),
                LayerSpec::bn(hidden),
                Relu,
                LayerSpec::fc(hidden, hidden),
                LayerSpec::bn(hidden),
                Relu,
                LayerSpec::fc(hidden, 1),
                Sigmoid,
            ],
        )
        .expect("preset")
    }

    /// MCD classifier F: FC(128,128), ReLU, FC(128,128), ReLU, FC(128,classes), softmax.
    pub fn mcd_classifier(classes: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec::new(
            "F",
            vec![
                LayerSpec::fc(128, 128),
                Relu,
                LayerSpec::fc(128, 128),
                Relu,
                LayerSpec::fc(128, classes),
                Softmax,
            ],
        )
        .expect("preset")
    }

    /// Baseline classifier: the feature extractor followed by the label predictor.
    pub fn baseline(input: usize, classes: usize, relu: bool) -> Self {
        Self::feature_extractor(input)
            .then(&Self::label_predictor(classes, relu))
            .expect("preset widths agree")
            .renamed("baseline")
    }

    fn mlp(name: &str, input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(LayerSpec::fc(width, h));
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::fc(width, classes));
        layers.push(LayerSpec::Softmax);
        NetworkSpec::new(name, layers).expect("preset")
    }

    pub fn m1(input: usize, classes: usize) -> Self {
        Self::mlp("M1", input, &[128], classes)
    }

    pub fn m2(input: usize, classes: usize) -> Self {
        Self::mlp("M2", input, &[64], classes)
    }

    pub fn m3(input: usize, classes: usize) -> Self {
        Self::mlp("M3", input, &[64, 32], classes)
    }

    pub fn m4(input: usize, classes: usize) -> Self {
        Self::mlp("M4", input, &[128, 128], classes)
    }

    pub fn m5(input: usize, classes: usize) -> Self {
        Self::mlp("M5", input, &[128, 128, 64], classes)
    }

    pub fn m6(input: usize, classes: usize) -> Self {
        Self::mlp("M6", input, &[128, 64, 32, 16], classes)
    }

    /// Looks up a classifier preset by name (`baseline`, `m1`..`m6`).
    pub fn classifier_preset(name: &str, input: usize, classes: usize, relu: bool) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "baseline" => Self::baseline(input, classes, relu),
            "m1" => Self::m1(input, classes),
            "m2" => Self::m2(input, classes),
            "m3" => Self::m3(input, classes),
            "m4" => Self::m4(input, classes),
            "m5" => Self::m5(input, classes),
            "m6" => Self::m6(input, classes),
            other => return Err(Error::Param(format!("unknown architecture {other:?}"))),
        })
    }

    fn renamed(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }
}
