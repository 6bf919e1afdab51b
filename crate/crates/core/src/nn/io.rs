//! Versioned JSON parameter files.
//!
//! Layout:
//!
//! ```json
//! {
//!   "format": "dtl-parameters",
//!   "version": 1,
//!   "algorithm": "dann",
//!   "metadata": { "lambda": "1" },
//!   "networks": [ { "role": "backbone", "network": { "spec": ..., "layers": ..., "init_seed": 7 } } ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so a save/load cycle reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::error::{Error, Result};

pub const PARAMETER_FORMAT: &str = "dtl-parameters";
pub const PARAMETER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedNetwork {
    pub role: String,
    pub network: Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterFile {
    pub format: String,
    pub version: u32,
    pub algorithm: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub networks: Vec<NamedNetwork>,
}

impl ParameterFile {
    pub fn new(algorithm: impl Into<String>) -> Self {
        ParameterFile {
            format: PARAMETER_FORMAT.into(),
            version: PARAMETER_VERSION,
            algorithm: algorithm.into(),
            metadata: BTreeMap::new(),
            networks: Vec::new(),
        }
    }

    pub fn with_network(mut self, role: impl Into<String>, network: Network) -> Self {
        self.networks.push(NamedNetwork {
            role: role.into(),
            network,
        });
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn network(&self, role: &str) -> Result<&Network> {
        self.networks
            .iter()
            .find(|n| n.role == role)
            .map(|n| &n.network)
            .ok_or_else(|| Error::Model(format!("parameter file has no {role:?} network")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParameterFile = serde_json::from_str(text)?;
        if file.format != PARAMETER_FORMAT {
            return Err(Error::Model(format!(
                "unknown parameter format {:?}",
                file.format
            )));
        }
        if file.version != PARAMETER_VERSION {
            return Err(Error::Model(format!(
                "unsupported parameter file version {} (expected {PARAMETER_VERSION})",
                file.version
            )));
        }
        for n in &file.networks {
            n.network.validate()?;
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), input in 1usize..20) {
            let net = Network::init(&NetworkSpec::baseline(input, 4, true), seed);
            let file = ParameterFile::new("source").with_network("model", net.clone());
            let back = ParameterFile::from_json(&file.to_json().unwrap()).unwrap();
            let restored = back.network("model").unwrap();
            for (a, b) in restored.params().iter().zip(net.params()) {
                let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(restored, &net);
        }
    }

    #[test]
    fn rejects_unknown_version_and_bad_shapes() {
        let net = Network::init(&NetworkSpec::m1(3, 2), 0);
        let file = ParameterFile::new("m1").with_network("model", net);
        let json = file.to_json().unwrap();
        let bumped = json.replace("\"version\": 1", "\"version\": 9");
        assert!(ParameterFile::from_json(&bumped).is_err());
        let mut broken: serde_json::Value = serde_json::from_str(&json).unwrap();
        broken["networks"][0]["network"]["layers"][0]["bias"] =
            serde_json::json!({"rows": 1, "cols": 3, "data": [0.0, 0.0, 0.0]});
        assert!(ParameterFile::from_json(&broken.to_string()).is_err());
        assert!(ParameterFile::from_json("{}").is_err());
    }
}
