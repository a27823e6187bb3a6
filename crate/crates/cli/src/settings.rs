//! `key = value` config files merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::CliError;

pub struct Settings {
    values: BTreeMap<String, String>,
    effective: Map<String, Value>,
}

impl Settings {
    /// Reads `path` if given. Keys may use `-` or `_`; anything outside
    /// `allowed` is rejected.
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            values = parse(&text, allowed).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        Ok(Self { values, effective: Map::new() })
    }

    /// Flag value, else config value, else `default`. The choice is recorded
    /// for the manifest.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.values.get(key) {
                Some(text) => text
                    .parse()
                    .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))?,
                None => default,
            },
        };
        self.effective.insert(key.to_string(), Value::String(value.to_string()));
        Ok(value)
    }

    /// Like [`Settings::pick`] with no default.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match (flag, self.values.contains_key(key)) {
            (None, false) => Err(CliError::Usage(format!("missing required setting `--{key}`"))),
            (flag, _) => {
                let value = match flag {
                    Some(v) => v,
                    None => self.values[key]
                        .parse()
                        .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))?,
                };
                self.effective.insert(key.to_string(), Value::String(value.to_string()));
                Ok(value)
            }
        }
    }

    pub fn effective(&self) -> &Map<String, Value> {
        &self.effective
    }
}

fn parse(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>, String> {
    let mut values = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let key = key.trim().replace('_', "-");
        if !allowed.contains(&key.as_str()) {
            return Err(format!("line {}: unknown key `{key}` (allowed: {})", n + 1, allowed.join(", ")));
        }
        values.insert(key, value.trim().to_string());
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let v = parse("# top\nmp_iters = 10  # trailing\n\neps=0.5\n", &["mp-iters", "eps"]).unwrap();
        assert_eq!(v["mp-iters"], "10");
        assert_eq!(v["eps"], "0.5");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(parse("bogus = 1", &["eps"]).unwrap_err().contains("unknown key"));
        assert!(parse("eps 1", &["eps"]).unwrap_err().contains("line 1"));
    }

    #[test]
    fn flags_override_file() {
        let mut s = Settings { values: parse("eps = 0.5\niters = 3", &["eps", "iters"]).unwrap(), effective: Map::new() };
        assert_eq!(s.pick("eps", Some(0.25), 0.1).unwrap(), 0.25);
        assert_eq!(s.pick("iters", None, 20usize).unwrap(), 3);
        assert_eq!(s.pick("seed", None, 7u64).unwrap(), 7);
        assert_eq!(s.effective()["eps"], "0.25");
    }
}
