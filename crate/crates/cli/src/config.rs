//! Layered configuration: built-in defaults, then a JSON file with dotted
//! keys, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use togkit::config::ModelConfig;
use togkit::knowledge::KnowledgeConfig;
use togkit::pipeline::BackendConfig;
use togkit::training::TrainConfig;

pub const PROFILE_KEY: &str = "model.profile";

/// Dotted key → value.
pub type Flat = BTreeMap<String, Value>;

/// Top-level keys with their defaults; every flag maps onto one of these or a
/// key inside a section.
fn top_level() -> Vec<(&'static str, Value)> {
    vec![
        ("data", Value::Null),
        ("out", Value::Null),
        ("spec", Value::Null),
        ("preset", "default".into()),
        ("setting", "instance".into()),
        ("fold", 0.into()),
        ("folds", 4.into()),
        ("split_seed", 0.into()),
        ("checkpoint", Value::Null),
        ("mode", Value::Null),
        ("oracle", false.into()),
        ("instance", Value::Null),
        ("class", Value::Null),
        ("task", Value::Null),
        ("top_k", 10.into()),
        ("threshold", 0.5.into()),
        ("ply", Value::Null),
    ]
}

fn defaults(profile: &str) -> Result<Value> {
    let mut root = Map::new();
    for (k, v) in top_level() {
        root.insert(k.into(), v);
    }
    let model = ModelConfig::profile(profile).map_err(|e| anyhow!(e))?;
    let mut model = serde_json::to_value(model)?;
    model.as_object_mut().expect("model section").insert("profile".into(), profile.into());
    root.insert("model".into(), model);
    root.insert("train".into(), serde_json::to_value(TrainConfig::default())?);
    root.insert("backend".into(), serde_json::to_value(BackendConfig::default())?);
    root.insert("knowledge".into(), serde_json::to_value(KnowledgeConfig::default())?);
    Ok(Value::Object(root))
}

/// Flattens nested objects into dotted keys; arrays and scalars are leaves.
pub fn flatten(value: &Value) -> Flat {
    fn walk(prefix: &str, v: &Value, out: &mut Flat) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Flat::new();
    walk("", value, &mut out);
    out
}

/// Reads a config file. A run manifest is accepted too: its resolved
/// `config` map replays the original run.
pub fn read_file(path: &Path) -> Result<Flat> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let value = match value.get("config") {
        Some(inner) if value.get("command").is_some() => inner.clone(),
        _ => value,
    };
    if !value.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    Ok(flatten(&value))
}

/// Parses `key=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected KEY=VALUE, got {s:?}"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        let child = obj.get_mut(*part).ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split yields at least one part")
}

/// The fully resolved configuration of one command.
#[derive(Clone, Debug)]
pub struct Resolved {
    tree: Value,
}

impl Resolved {
    /// `layers` apply in order, later ones winning.
    pub fn new(layers: &[Flat]) -> Result<Self> {
        let profile = layers
            .iter()
            .rev()
            .find_map(|l| l.get(PROFILE_KEY))
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| anyhow!("{PROFILE_KEY} must be a string")))
            .transpose()?
            .unwrap_or_else(|| "desk".to_string());
        let mut tree = defaults(&profile)?;
        for layer in layers {
            for (k, v) in layer {
                if k != PROFILE_KEY {
                    set_path(&mut tree, k, v.clone())?;
                }
            }
        }
        Ok(Self { tree })
    }

    pub fn flat(&self) -> Flat {
        flatten(&self.tree)
    }

    fn lookup(&self, key: &str) -> Option<&Value> {
        key.split('.').try_fold(&self.tree, |node, part| node.get(part))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.lookup(key).ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        serde_json::from_value(v.clone()).map_err(|e| anyhow!("config key {key}: {e}"))
    }

    /// A required key whose default is null.
    pub fn require<T: DeserializeOwned>(&self, key: &str, flag: &str) -> Result<T> {
        match self.lookup(key) {
            Some(Value::Null) | None => bail!("missing {flag} (config key {key:?})"),
            Some(_) => self.get(key),
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut v = self.lookup("model").cloned().expect("model section");
        v.as_object_mut().expect("model section").remove("profile");
        let m: ModelConfig = serde_json::from_value(v).map_err(|e| anyhow!("config section model: {e}"))?;
        m.validate().map_err(|e| anyhow!(e))?;
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t: TrainConfig = self.get("train")?;
        t.validate().map_err(|e| anyhow!(e))?;
        Ok(t)
    }

    pub fn backend(&self) -> Result<BackendConfig> {
        self.get("backend")
    }

    pub fn knowledge(&self) -> Result<KnowledgeConfig> {
        self.get("knowledge")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn flat(v: Value) -> Flat {
        flatten(&v)
    }

    #[test]
    fn later_layers_win() {
        let file = flat(json!({"train.epochs": 3, "train": {"batch_size": 4}}));
        let flags = flat(json!({"train.epochs": 7}));
        let r = Resolved::new(&[file, flags]).unwrap();
        let t = r.train().unwrap();
        assert_eq!((t.epochs, t.batch_size), (7, 4));
    }

    #[test]
    fn profile_selects_model_defaults() {
        let r = Resolved::new(&[flat(json!({"model.profile": "minimal", "model.head_hidden": 9}))]).unwrap();
        let m = r.model().unwrap();
        assert_eq!(m.points, ModelConfig::minimal().points);
        assert_eq!(m.head_hidden, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Resolved::new(&[flat(json!({"train.epoch": 3}))]).is_err());
        assert!(Resolved::new(&[flat(json!({"nonsense": 1}))]).is_err());
    }

    #[test]
    fn nested_sections_can_be_replaced() {
        let r = Resolved::new(&[flat(json!({"train.augment": null}))]).unwrap();
        assert_eq!(r.train().unwrap().augment, None);
        let r = Resolved::new(&[flat(json!({"train.augment.jitter_sigma": 0.0}))]).unwrap();
        assert_eq!(r.train().unwrap().augment.unwrap().jitter_sigma, 0.0);
    }

    #[test]
    fn resolved_config_replays() {
        let r = Resolved::new(&[flat(json!({"train.epochs": 2, "model.profile": "minimal"}))]).unwrap();
        let again = Resolved::new(&[r.flat()]).unwrap();
        assert_eq!(again.flat(), r.flat());
        assert_eq!(again.model().unwrap(), ModelConfig::minimal());
    }

    #[test]
    fn assignments_parse_json_or_text() {
        assert_eq!(parse_assignment("train.epochs=3").unwrap(), ("train.epochs".into(), json!(3)));
        assert_eq!(parse_assignment("backend.language=fixture").unwrap().1, json!("fixture"));
        assert!(parse_assignment("novalue").is_err());
    }
}
