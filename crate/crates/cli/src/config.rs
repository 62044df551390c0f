//! Flat dotted-key JSON configuration.

use std::collections::BTreeMap;
use std::path::Path;

use saliency_prior::nn::Mode;
use saliency_prior::train::TrainConfig;
use serde_json::{json, Map, Value};

use crate::CliError;

pub type FlatConfig = BTreeMap<String, Value>;

pub fn defaults() -> FlatConfig {
    let t = TrainConfig::default();
    let a = &t.arch;
    [
        ("train.lr", json!(t.lr)),
        ("train.momentum", json!(t.momentum)),
        ("train.batch_size", json!(t.batch_size)),
        ("train.epochs", json!(t.epochs)),
        ("train.seed", json!(t.seed)),
        ("train.augment", json!(t.augment)),
        ("train.warm_start", json!(t.warm_start)),
        ("data.size", json!(a.height)),
        ("model.widths", json!(a.widths)),
        ("model.slope", json!(a.slope)),
        ("model.seg_depth", json!(a.seg_depth)),
        ("model.seg_width", json!(a.seg_width)),
        ("model.hidden", json!(a.hidden)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Defaults, then the file's keys, then `KEY=VALUE` overrides.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<FlatConfig, CliError> {
    let mut flat = defaults();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(map) = parsed else {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        };
        for (k, v) in map {
            set(&mut flat, &k, v)?;
        }
    }
    for o in overrides {
        let (k, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {o:?} is not KEY=VALUE")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set(&mut flat, k, v)?;
    }
    Ok(flat)
}

fn set(flat: &mut FlatConfig, key: &str, value: Value) -> Result<(), CliError> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
    }
}

pub fn train_config(flat: &FlatConfig, stage: Mode) -> Result<TrainConfig, CliError> {
    let get = |k: &str| flat[k].clone();
    let mut train = Map::new();
    for k in ["lr", "momentum", "batch_size", "epochs", "seed", "augment", "warm_start"] {
        train.insert(k.into(), get(&format!("train.{k}")));
    }
    train.insert("stage".into(), serde_json::to_value(stage).expect("mode serializes"));
    train.insert(
        "arch".into(),
        json!({
            "height": get("data.size"),
            "width": get("data.size"),
            "in_channels": 1,
            "widths": get("model.widths"),
            "slope": get("model.slope"),
            "seg_depth": get("model.seg_depth"),
            "seg_width": get("model.seg_width"),
            "hidden": get("model.hidden"),
            "classes": 2,
        }),
    );
    let config: TrainConfig =
        serde_json::from_value(Value::Object(train)).map_err(|e| CliError::Usage(format!("bad config value: {e}")))?;
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}
