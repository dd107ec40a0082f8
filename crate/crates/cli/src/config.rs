//! Flat run configuration: one JSON object whose keys are the union of the
//! model and training settings, plus an optional `preset`. Flags override
//! file values.

use std::path::Path;

use anyhow::{Context, Result};
use nvidehr::model::ModelConfig;
use nvidehr::train::TrainConfig;
use serde_json::{Map, Value};

use crate::Usage;

pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Everything that went into the two configs, for `run.meta`.
    pub resolved: Value,
}

fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "tiny" => Ok(ModelConfig::tiny()),
        "paper" => Ok(ModelConfig::paper()),
        other => Err(Usage(format!("unknown preset {other:?} (expected desk, tiny or paper)")).into()),
    }
}

fn keys_of(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    }
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Usage(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut flat = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Usage(format!("config {} must be one JSON object", path.display())).into()),
                Err(e) => return Err(Usage(format!("config {}: {e}", path.display())).into()),
            }
        }
        None => Map::new(),
    };
    for (k, v) in overrides {
        flat.insert(k.clone(), v.clone());
    }

    let base = match flat.remove("preset") {
        Some(Value::String(name)) => preset(&name)?,
        Some(other) => return Err(Usage(format!("preset must be a string, got {other}")).into()),
        None => ModelConfig::desk(),
    };
    let mut model = keys_of(serde_json::to_value(&base)?);
    let mut train = keys_of(serde_json::to_value(TrainConfig::default())?);
    for (k, v) in flat {
        if model.contains_key(&k) {
            model.insert(k, v);
        } else if train.contains_key(&k) {
            train.insert(k, v);
        } else {
            return Err(Usage(format!("unknown config key {k:?}")).into());
        }
    }
    let mut resolved = model.clone();
    resolved.extend(train.clone());
    let model: ModelConfig =
        serde_json::from_value(Value::Object(model)).map_err(|e| Usage(format!("model config: {e}")))?;
    let train: TrainConfig =
        serde_json::from_value(Value::Object(train)).map_err(|e| Usage(format!("training config: {e}")))?;
    model.validate().map_err(|e| Usage(e.to_string()))?;
    train.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(RunConfig {
        model,
        train,
        resolved: Value::Object(resolved),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_and_keys_route() {
        let o = [
            parse_override("layers=0").unwrap(),
            parse_override("steps=7").unwrap(),
            parse_override("preset=tiny").unwrap(),
        ];
        let c = load(None, &o).unwrap();
        assert_eq!(c.model.layers, 0);
        assert_eq!(c.model.queries, ModelConfig::tiny().queries);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.resolved["steps"], 7);
        assert!(load(None, &[parse_override("bogus=1").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }
}
