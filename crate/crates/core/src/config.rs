//! Flat `key = value` text configuration.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key = value` lines. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::invalid(format!("config line {}: expected `key = value`", n + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::invalid(format!("config line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::invalid(format!("config key `{key}` given twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Removes and parses `key`.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.entries
            .remove(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::invalid(format!("config key `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Fails if any key was never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::invalid(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }
}

impl Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Comma-separated list helper for config values.
pub fn parse_list<T>(s: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| Error::invalid(format!("list item `{p}`: {e}"))))
        .collect()
}
