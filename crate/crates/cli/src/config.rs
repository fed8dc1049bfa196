//! Run configuration: a JSON file with the model and training sections,
//! every field defaulting to the desk preset, plus `key=value` overrides
//! addressed by dot paths.

use std::fs;
use std::path::Path;

use mcaoan::model::ModelConfig;
use mcaoan::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies `path=value` overrides in order. The value is read as JSON
    /// when it parses, otherwise as a bare string; the result must still
    /// deserialize, so a value of the wrong type is rejected.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), CliError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self).expect("config serialises");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            *lookup(&mut tree, key)? = value;
            *self = serde_json::from_value(tree.clone())
                .map_err(|e| CliError::Usage(format!("override `{o}`: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn lookup<'v>(tree: &'v mut Value, key: &str) -> Result<&'v mut Value, CliError> {
    let mut node = tree;
    for part in key.split('.') {
        let next = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        node = next.ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    Ok(node)
}
