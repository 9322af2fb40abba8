//! `key = value` text configuration files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Keys
//! may appear once. Unknown keys are rejected so typos do not pass silently.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::render::RenderConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<KeyValues> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::invalid(format!("line {}: empty key or value", n + 1)));
            }
            if entries.insert(k.to_string(), (n + 1, v.to_string())).is_some() {
                return Err(Error::invalid(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<KeyValues> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KeyValues::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("line {line}: bad value {v:?} for {key}"))),
        }
    }

    /// Like [`get`](Self::get), but `none` reads as an explicit absence.
    pub fn get_optional<T: FromStr>(&self, key: &str) -> Result<Option<Option<T>>> {
        match self.entries.get(key) {
            Some((_, v)) if v.eq_ignore_ascii_case("none") => Ok(Some(None)),
            _ => self.get(key).map(|v| v.map(Some)),
        }
    }

    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::invalid(format!(
                    "line {line}: unknown key {k:?} (expected one of {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// Assigns `kv[key]` to `slot` when present.
pub(crate) fn set<T: FromStr>(kv: &KeyValues, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = kv.get(key)? {
        *slot = v;
    }
    Ok(())
}

pub const RENDER_KEYS: &[&str] = &["n_coarse", "n_fine", "near", "far", "seed", "batch_rows", "jitter"];

impl RenderConfig {
    /// Defaults overridden by the keys present in `kv`.
    pub fn from_key_values(kv: &KeyValues) -> Result<RenderConfig> {
        kv.reject_unknown(RENDER_KEYS)?;
        let mut cfg = RenderConfig::default();
        set(kv, "n_coarse", &mut cfg.n_coarse)?;
        set(kv, "n_fine", &mut cfg.n_fine)?;
        set(kv, "seed", &mut cfg.seed)?;
        set(kv, "batch_rows", &mut cfg.batch_rows)?;
        set(kv, "jitter", &mut cfg.jitter)?;
        if let Some(v) = kv.get_optional("near")? {
            cfg.near = v;
        }
        if let Some(v) = kv.get_optional("far")? {
            cfg.far = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RenderConfig> {
        RenderConfig::from_key_values(&KeyValues::load(path)?).map_err(|e| Error::format(path, e.to_string()))
    }
}
