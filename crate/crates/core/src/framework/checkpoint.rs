//! Saved training state: every network plus optional optimizer state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::networks::{Network, NetworkError, NetworkRecord};

pub const CHECKPOINT_FORMAT: &str = "macronet-ckpt/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint format `{0}`")]
    Format(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedNetwork {
    pub name: String,
    pub network: NetworkRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub networks: Vec<NamedNetwork>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: &str, names: &[String], networks: &[Network]) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            model: model.into(),
            epoch: None,
            loss: None,
            networks: names
                .iter()
                .zip(networks)
                .map(|(n, net)| NamedNetwork {
                    name: n.clone(),
                    network: net.to_record(),
                })
                .collect(),
            optimizer: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            Some(other) => return Err(CheckpointError::Format(other.into())),
            None => return Err(CheckpointError::Corrupt("missing format tag".into())),
        }
        serde_json::from_value(value).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    /// Networks in checkpoint order, checked against the expected names.
    pub fn networks_for(&self, names: &[String]) -> Result<Vec<Network>, CheckpointError> {
        let found: Vec<&str> = self.networks.iter().map(|n| n.name.as_str()).collect();
        if found.len() != names.len() || found.iter().zip(names).any(|(a, b)| a != b) {
            return Err(CheckpointError::Mismatch(format!(
                "expected networks {names:?}, found {found:?}"
            )));
        }
        self.networks
            .iter()
            .map(|n| Network::from_record(n.network.clone()).map_err(CheckpointError::from))
            .collect()
    }
}
