//! Flat `key = value` configuration files.
//!
//! Keys are dotted paths into the serialized [`TrainConfig`], for example
//! `model.transformer.layers = 2` or `batch.node = 8`. Lists are comma
//! separated and `none` clears an optional value. Two keys are not config
//! fields: `preset` picks the base configuration and `corpus` names the
//! registry to pre-train on.

use std::path::{Path, PathBuf};

use gilt::trainer::{TrainConfig, SCHEMA_VERSION};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Default)]
pub struct KvFile {
    pub schema_version: Option<u32>,
    pub preset: Option<String>,
    pub corpus: Option<PathBuf>,
    pub entries: Vec<(String, String)>,
}

pub fn parse_kv(text: &str, origin: &str) -> Result<KvFile, CliError> {
    let mut out = KvFile::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{origin} line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "schema_version" => {
                let n = v
                    .parse()
                    .map_err(|_| CliError::usage(format!("{origin}: schema_version `{v}` is not an integer")))?;
                out.schema_version = Some(n);
            }
            "preset" => out.preset = Some(v.to_string()),
            "corpus" => out.corpus = Some(PathBuf::from(v)),
            _ => out.entries.push((k.to_string(), v.to_string())),
        }
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<KvFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
    let kv = parse_kv(&text, &path.display().to_string())?;
    match kv.schema_version {
        None => Err(CliError::usage(format!(
            "{}: missing `schema_version` (this build reads version {SCHEMA_VERSION})",
            path.display()
        ))),
        Some(v) if v != SCHEMA_VERSION => Err(CliError::usage(format!(
            "{}: schema_version {v} is not supported (expected {SCHEMA_VERSION})",
            path.display()
        ))),
        Some(_) => Ok(kv),
    }
}

/// Converts `raw` to the JSON type already present at the target slot.
fn typed(current: &Value, raw: &str, key: &str) -> Result<Value, CliError> {
    let bad = || CliError::usage(format!("config key `{key}`: cannot use `{raw}` here"));
    if raw == "none" {
        return Ok(Value::Null);
    }
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => match raw.parse::<u64>() {
            Ok(u) => Value::from(u),
            Err(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
        },
        Value::Number(_) | Value::Null => match raw.parse::<f64>() {
            Ok(f) => Value::from(f),
            Err(_) if matches!(current, Value::Null) => Value::String(raw.to_string()),
            Err(_) => return Err(bad()),
        },
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::String(String::new()));
            let parts = raw.split(',').map(str::trim).filter(|s| !s.is_empty());
            Value::Array(parts.map(|p| typed(&proto, p, key)).collect::<Result<_, _>>()?)
        }
        Value::Object(_) => return Err(CliError::usage(format!("config key `{key}` names a section, not a value"))),
    })
}

/// Applies `key = value` overrides on top of `base`.
pub fn apply(base: &TrainConfig, entries: &[(String, String)]) -> Result<TrainConfig, CliError> {
    let mut root = serde_json::to_value(base).expect("config serializes");
    for (key, raw) in entries {
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| CliError::usage(format!("unknown config key `{key}`")))?;
        }
        *slot = typed(slot, raw, key)?;
    }
    let cfg: TrainConfig =
        serde_json::from_value(root).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))?;
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(o) => {
            for (k, child) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar).collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        _ => out.push((prefix.to_string(), scalar(v))),
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Renders a configuration as a kv file that [`read_kv`] accepts back.
pub fn to_kv(cfg: &TrainConfig, corpus: Option<&Path>) -> String {
    let mut entries = Vec::new();
    flatten("", &serde_json::to_value(cfg).expect("config serializes"), &mut entries);
    let mut s = format!("schema_version = {}\n", cfg.schema_version);
    if let Some(c) = corpus {
        s.push_str(&format!("corpus = {}\n", c.display()));
    }
    for (k, v) in entries.into_iter().filter(|(k, _)| k != "schema_version") {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}
