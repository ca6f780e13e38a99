//! Text form of [`ModelDefinition`].

use thiserror::Error;

use super::defs::ModelDefinition;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("invalid model file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot write model file: {0}")]
    Write(#[from] toml::ser::Error),
}

impl ModelDefinition {
    pub fn from_toml_str(text: &str) -> Result<Self, SchemaError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String, SchemaError> {
        Ok(toml::to_string_pretty(self)?)
    }
}
