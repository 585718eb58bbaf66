//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Values are applied onto a typed
//! config by field name, parsed according to the type of the field's default.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    echo: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Invalid(format!("config line {}: expected key=value, got {raw:?}", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Invalid(format!("config line {}: empty key", i + 1)));
            }
            if cfg.entries.contains_key(k) {
                return Err(Error::Invalid(format!("config line {}: duplicate key {k:?}", i + 1)));
            }
            cfg.set(k, v);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Adds or overrides a value (command-line flags win over the file).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let v = value.into();
        self.entries.insert(key.to_string(), v.clone());
        self.echo.insert(key.to_string(), v);
    }

    /// Every key ever set, consumed or not; recorded in run manifests.
    pub fn echo(&self) -> &BTreeMap<String, String> {
        &self.echo
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| Error::Invalid(format!("config key {key}: {e}"))),
        }
    }

    /// Removes every `prefix.key` entry and returns them as their own config, prefix stripped.
    pub fn section(&mut self, prefix: &str) -> KvConfig {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        let mut out = KvConfig::default();
        for k in keys {
            if let Some(v) = self.entries.remove(&k) {
                out.set(&k[dotted.len()..], v);
            }
        }
        out
    }

    /// Overrides fields of `base` whose names appear as keys; those keys are consumed.
    pub fn apply<T: Serialize + DeserializeOwned>(&mut self, base: &T) -> Result<T> {
        let mut value = serde_json::to_value(base)?;
        let Value::Object(fields) = &mut value else {
            return Err(Error::Invalid("config target is not a struct".into()));
        };
        for (name, slot) in fields.iter_mut() {
            if let Some(raw) = self.take(name) {
                *slot = parse_like(slot, &raw).ok_or_else(|| Error::Invalid(format!("config key {name}: cannot parse {raw:?}")))?;
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    /// Fails on keys nobody consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.entries.keys().next() {
            return Err(Error::Invalid(format!("unknown config key {k:?}")));
        }
        Ok(())
    }
}

fn parse_like(slot: &Value, raw: &str) -> Option<Value> {
    let number = |s: &str| -> Option<Value> {
        if let Ok(u) = s.parse::<u64>() {
            return Some(Value::from(u));
        }
        s.parse::<f64>().ok().and_then(serde_json::Number::from_f64).map(Value::Number)
    };
    match slot {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from).or_else(|| number(raw)),
        Value::Number(_) => raw.parse::<f64>().ok().and_then(serde_json::Number::from_f64).map(Value::Number),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Null => Some(match raw {
            "none" | "null" => Value::Null,
            _ => number(raw).or_else(|| raw.parse::<bool>().ok().map(Value::Bool)).unwrap_or_else(|| Value::String(raw.into())),
        }),
        _ => None,
    }
}
