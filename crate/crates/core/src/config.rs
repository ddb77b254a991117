//! Run configuration: built-in defaults, an optional named preset, a JSON
//! file and dotted-key overrides, applied in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::mine::SelfTestConfig;
use crate::model::ModelConfig;
use crate::synthdata::DataConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    /// Root under which `{run_id}/` is created; the caller's default when absent.
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub selftest: SelfTestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            out_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            selftest: SelfTestConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 1] = ["paper"];

impl RunConfig {
    /// Published training and decoding settings at full model width.
    pub fn paper() -> Self {
        let mut c = Self::default();
        c.model.d = 768;
        c.model.n_heads = 12;
        c.model.n_layers = 12;
        c.model.dropout = 0.3;
        c.train = TrainConfig::paper();
        c.eval.beam.beam = 5;
        c.eval.beam.length_penalty = 1.0;
        c.eval.beam.max_len = 30;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config {
                key: "preset".into(),
                message: format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config {
                key: "run_id".into(),
                message: format!("`{}` is not a plain directory name", self.run_id),
            });
        }
        // the vocabulary size is only known once a corpus is loaded
        crate::model::ModelConfig {
            vocab_size: self.model.vocab_size.max(crate::textproc::SEP + 1),
            ..self.model.clone()
        }
        .validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Value of an override: JSON when it parses as JSON, otherwise a string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.into(),
            message: "malformed key".into(),
        });
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config {
            key: key.into(),
            message: format!("`{p}` is not a section"),
        })?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| Error::Config {
        key: key.into(),
        message: "parent is not a section".into(),
    })?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn decode(v: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize::<_, RunConfig>(v).map_err(|e| {
        let key = e.path().to_string();
        Error::Config {
            key: if key == "." { "config".into() } else { key },
            message: e.into_inner().to_string(),
        }
    })
}

/// Resolves a configuration with precedence overrides > file > preset >
/// defaults. `overrides` are `(dotted.key, value)` pairs.
pub fn resolve_config(file: Option<&Path>, preset: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = match preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::default(),
    };
    let mut v = serde_json::to_value(&base)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config {
                key: path.display().to_string(),
                message: e.to_string(),
            })?
        };
        if !parsed.is_object() {
            return Err(Error::Config {
                key: path.display().to_string(),
                message: "top level must be an object".into(),
            });
        }
        // unknown keys in the file are reported before they merge into defaults
        decode_partial(&parsed)?;
        merge(&mut v, parsed);
    }
    for (k, raw) in overrides {
        set_dotted(&mut v, k, override_value(raw))?;
    }
    let cfg = decode(v)?;
    cfg.validate()?;
    Ok(cfg)
}

fn decode_partial(file: &Value) -> Result<()> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    merge(&mut v, file.clone());
    decode(v).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = file("");
        assert_eq!(resolve_config(Some(f.path()), None, &[]).unwrap(), RunConfig::default());
        let f = file("{}");
        assert_eq!(resolve_config(Some(f.path()), None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn flags_beat_file_beat_preset() {
        let f = file(r#"{"train": {"alpha": 0.5, "epochs_stage2": 4}}"#);
        let c = resolve_config(Some(f.path()), Some("paper"), &[("train.alpha".into(), "0.01".into())]).unwrap();
        assert_eq!(c.train.alpha, 0.01);
        assert_eq!(c.train.epochs_stage2, 4);
        assert_eq!(c.train.warmup_steps, 10_000);
        assert_eq!(c.model.d, 768);
        assert_eq!(c.eval.beam.beam, 5);
        let c = resolve_config(None, None, &[("run_id".into(), "abc".into()), ("data.n_videos".into(), "12".into())]).unwrap();
        assert_eq!((c.run_id.as_str(), c.data.n_videos), ("abc", 12));
    }

    #[test]
    fn errors_name_the_key() {
        let f = file(r#"{"train": {"alpha": "high"}}"#);
        match resolve_config(Some(f.path()), None, &[]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.alpha"),
            other => panic!("{other:?}"),
        }
        let f = file(r#"{"model": {"depth": 3}}"#);
        match resolve_config(Some(f.path()), None, &[]) {
            Err(Error::Config { key, message }) => assert!(key.starts_with("model") && message.contains("depth"), "{key} {message}"),
            other => panic!("{other:?}"),
        }
        match resolve_config(None, None, &[("train.batch_size".into(), "[1]".into())]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.batch_size"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(resolve_config(None, Some("tiny"), &[]), Err(Error::Config { key, .. }) if key == "preset"));
        assert!(matches!(
            resolve_config(None, None, &[("train.alpha".into(), "-1".into())]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = resolve_config(None, Some("paper"), &[("train.seed".into(), "9".into())]).unwrap();
        let f = file(&c.to_json().unwrap());
        assert_eq!(resolve_config(Some(f.path()), None, &[]).unwrap(), c);
    }
}
