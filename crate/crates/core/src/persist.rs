//! Versioned JSON documents for trained models.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::DerivativeModel;
use crate::hybrid::HybridPde;
use crate::metactrl::{search_hyperparams, MetaController};
use crate::pblock::PBlock;
use crate::series::TimeSeries;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Model {
    Single { block: PBlock },
    Hybrid { hybrid: HybridPde<PBlock> },
    /// One component per plan of the controller's grid.
    Meta { components: Vec<PBlock>, controller: MetaController },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    /// Channel names the model was trained on, target first.
    pub names: Vec<String>,
    pub model: Model,
}

impl ModelFile {
    pub fn new(names: Vec<String>, model: Model) -> Self {
        Self { schema_version: SCHEMA_VERSION, names, model }
    }

    /// Rejects series whose columns differ from the training columns.
    pub fn check_series(&self, series: &TimeSeries) -> Result<()> {
        if series.names() != self.names.as_slice() {
            return Err(Error::Schema(format!("model expects columns {:?}, series has {:?}", self.names, series.names())));
        }
        Ok(())
    }

    /// The forecasting model to use with history `series`: the block, the
    /// hybrid, or the hybrid picked by the controller from that history.
    pub fn resolve(&self, series: &TimeSeries) -> Result<Box<dyn DerivativeModel + '_>> {
        self.check_series(series)?;
        Ok(match &self.model {
            Model::Single { block } => Box::new(block),
            Model::Hybrid { hybrid } => Box::new(hybrid),
            Model::Meta { components, controller } => {
                let i = search_hyperparams(controller, series, &controller.grid)?;
                let point = &controller.grid[i];
                let comps = point.plans.iter().map(|&p| &components[p]).collect();
                let plans = point.plans.iter().map(|&p| controller.plans[p]).collect();
                Box::new(HybridPde::new(comps, plans)?.set_weights(&point.eps)?)
            }
        })
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a model file and checks its schema version.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let value: serde_json::Value = load_json(path)?;
    let version = value.get("schema_version").and_then(serde_json::Value::as_u64);
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::Schema(format!(
            "{} has schema version {version:?}, expected {SCHEMA_VERSION}",
            path.display()
        )));
    }
    Ok(serde_json::from_value(value)?)
}
