use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Reject mask pixels other than 0 and 255.
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { strict: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSettings {
    pub generations: usize,
    pub workers: usize,
    pub seed: u64,
    pub dump_levels: bool,
}

impl Default for InferSettings {
    fn default() -> Self {
        Self {
            generations: 25,
            workers: 1,
            seed: 0,
            dump_levels: false,
        }
    }
}

/// Everything a run needs; persisted as `effective_config.json` next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferSettings,
    pub synth: SynthSpec,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            infer: InferSettings::default(),
            synth: SynthSpec::default(),
            data: DataConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value, path: &str, errs: &mut Vec<String>) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key, errs),
                    Some(slot) => *slot = v,
                    None => errs.push(format!("unknown key {key}")),
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("{key}: {} is not a section", parts[..i].join(".")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| format!("unknown key {key}"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(format!("empty key in override {key:?}"))
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `key=value` overrides with dotted keys.
    /// Every problem is reported in one error.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        let mut errs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if let Some(v) = patch.get("schema_version") {
                if v.as_u64() != Some(CONFIG_SCHEMA_VERSION as u64) {
                    errs.push(format!("schema_version {v} unsupported (expected {CONFIG_SCHEMA_VERSION})"));
                }
            }
            if !patch.is_object() {
                errs.push(format!("{}: top level must be an object", path.display()));
            } else {
                merge(&mut value, patch, "", &mut errs);
            }
        }
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                errs.push(format!("override {o:?} is not key=value"));
                continue;
            };
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            if let Err(e) = set_dotted(&mut value, k.trim(), parsed) {
                errs.push(e);
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_parse_json() {
        let c = RunConfig::resolve(None, &["train.learning_rate=0.002".into(), "train.mode=soft_label".into()]).unwrap();
        assert_eq!(c.train.learning_rate, 0.002);
        assert_eq!(c.train.mode, crate::training::TrainMode::SoftLabel);
    }

    #[test]
    fn unknown_keys_all_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"depht": 3}, "extra": 1}"#).unwrap();
        let msg = RunConfig::resolve(Some(&p), &["train.nope=1".into()]).unwrap_err().to_string();
        assert!(msg.contains("model.depht") && msg.contains("extra") && msg.contains("train.nope"), "{msg}");
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"schema_version": 1, "train": {"steps": 10, "seed": 4}}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &["train.steps=20".into()]).unwrap();
        assert_eq!((c.train.steps, c.train.seed), (20, 4));
        assert_eq!(c.model, ModelConfig::desk());
    }
}
