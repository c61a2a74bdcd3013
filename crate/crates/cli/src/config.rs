//! Run configuration files: a JSON tree with `dataset`, `model`, `objective`,
//! `optimizer` and `run` sections, plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use hfvae::distributions::{LatentLayout, DEFAULT_TEMPERATURE};
use hfvae::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

/// Environment variable naming the root for cached data and relative dataset paths.
pub const DATA_ROOT_ENV: &str = "HFVAE_DATA_ROOT";

pub fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_checkpoint_every")]
    checkpoint_every: usize,
}

fn default_batch_size() -> usize {
    512
}
fn default_epochs() -> usize {
    10
}
fn default_checkpoint_every() -> usize {
    1
}

const SECTIONS: [&str; 5] = ["dataset", "model", "objective", "optimizer", "run"];

pub fn read_tree(path: &Path) -> Result<Value, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let tree: Value = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(map) = &tree else {
        return Err(UsageError("config must be a JSON object".into()));
    };
    if let Some(k) = map.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(UsageError(format!("unknown config section `{k}`; sections: {}", SECTIONS.join(", "))));
    }
    Ok(tree)
}

/// Parses `value` as JSON when it is valid JSON, and as a string otherwise.
fn leaf(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

/// Sets the leaf at a dotted path, creating intermediate objects.
pub fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<(), UsageError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(UsageError(format!("bad override path `{path}`")));
    }
    if !SECTIONS.contains(&keys[0]) {
        return Err(UsageError(format!("override `{path}` must start with one of: {}", SECTIONS.join(", "))));
    }
    let mut node = tree;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(UsageError(format!("override `{path}` descends into a non-object")));
        }
        node = node.as_object_mut().unwrap().entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    match node {
        Value::Object(map) => {
            map.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(UsageError(format!("override `{path}` descends into a non-object"))),
    }
}

/// Applies `key=value` overrides in order.
pub fn apply_overrides(tree: &mut Value, overrides: &[String]) -> Result<(), UsageError> {
    for o in overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override `{o}` should look like section.key=value")))?;
        set_path(tree, path.trim(), leaf(value.trim()))?;
    }
    Ok(())
}

/// A layout given as `"normal:6,concrete:3"` is expanded to its group list,
/// using `model.temperature` (removed from the tree) for Concrete groups.
fn expand_layout(model: &mut Map<String, Value>) -> Result<(), UsageError> {
    let temperature = match model.remove("temperature") {
        None => DEFAULT_TEMPERATURE,
        Some(v) => v.as_f64().ok_or_else(|| UsageError("model.temperature must be a number".into()))?,
    };
    if let Some(Value::String(spec)) = model.get("layout") {
        let layout = LatentLayout::parse(spec, temperature).map_err(|e| UsageError(e.to_string()))?;
        model.insert("layout".into(), serde_json::to_value(layout).expect("layout serializes"));
    }
    Ok(())
}

/// Builds the training config from a config tree.
pub fn train_config(tree: &Value) -> Result<TrainConfig, UsageError> {
    let section = |name: &str| tree.get(name).cloned().unwrap_or(Value::Object(Map::new()));
    let mut model = section("model");
    match model.as_object_mut() {
        Some(m) => expand_layout(m)?,
        None => return Err(UsageError("model section must be an object".into())),
    }
    let run: RunSection = serde_json::from_value(section("run")).map_err(|e| UsageError(format!("run: {e}")))?;
    let dataset = match tree.get("dataset") {
        None | Some(Value::Null) => None,
        Some(d) => Some(serde_json::from_value(d.clone()).map_err(|e| UsageError(format!("dataset: {e}")))?),
    };
    let cfg = TrainConfig {
        dataset,
        model: serde_json::from_value(model).map_err(|e| UsageError(format!("model: {e}")))?,
        objective: serde_json::from_value(section("objective")).map_err(|e| UsageError(format!("objective: {e}")))?,
        optimizer: serde_json::from_value(section("optimizer")).map_err(|e| UsageError(format!("optimizer: {e}")))?,
        batch_size: run.batch_size,
        epochs: run.epochs,
        seed: run.seed,
        checkpoint_every: run.checkpoint_every,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

/// Reads a config file and applies overrides.
pub fn load(path: &Path, overrides: &[String]) -> Result<TrainConfig, UsageError> {
    let mut tree = read_tree(path)?;
    apply_overrides(&mut tree, overrides)?;
    train_config(&tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_leaves() {
        let mut tree = serde_json::json!({"run": {"epochs": 3}});
        apply_overrides(&mut tree, &["run.epochs=7".into(), "objective.preset=beta-vae".into()]).unwrap();
        assert_eq!(tree["run"]["epochs"], 7);
        assert_eq!(tree["objective"]["preset"], "beta-vae");
        assert!(apply_overrides(&mut tree, &["nowhere.x=1".into()]).is_err());
        assert!(apply_overrides(&mut tree, &["run.epochs".into()]).is_err());
    }

    #[test]
    fn layout_strings_expand() {
        let tree = serde_json::json!({
            "model": {"architecture": "tiny-mlp", "input_shape": [4], "layout": "normal:2,concrete:3", "likelihood": "bernoulli"},
            "run": {"batch_size": 2}
        });
        let cfg = train_config(&tree).unwrap();
        assert_eq!(cfg.model.layout.n_slots(), 3);
        assert_eq!(cfg.batch_size, 2);
    }
}
