//! Line-oriented `key=value` reports with a JSON twin.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub fields: Vec<(String, String)>,
}

impl Report {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.fields.push((key.into(), value.to_string()));
    }

    /// Adds `fields` with `prefix.` in front of every key.
    pub fn extend_prefixed<K: AsRef<str>>(&mut self, prefix: &str, fields: Vec<(K, String)>) {
        for (k, v) in fields {
            self.push(format!("{prefix}.{}", k.as_ref()), v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("command={}\nconfig_hash={}\n", self.command, self.config_hash);
        for (k, v) in &self.fields {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        map.insert("command".into(), Value::String(self.command.clone()));
        map.insert("config_hash".into(), Value::String(self.config_hash.clone()));
        for (k, v) in &self.fields {
            map.insert(k.clone(), Value::String(v.clone()));
        }
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("strings serialize");
        s.push('\n');
        s
    }

    /// Writes `<stem>.txt` and `<stem>.json`; returns both paths.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        let (txt, json) = (with(".txt"), with(".json"));
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        Ok((txt, json))
    }
}
