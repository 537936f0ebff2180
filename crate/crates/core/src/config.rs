//! `key = value` configuration files.
//!
//! One pair per line; `#` starts a comment; keys may contain dots
//! (`idp.idp-a.auth_url`). Later duplicates override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            entries.insert(k.to_owned(), v.trim().to_owned());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing(key.to_owned()))
    }

    pub fn parsed<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.to_owned(),
                    message: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(false),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(other) => Err(ConfigError::Invalid {
                key: key.to_owned(),
                message: format!("expected a boolean, got {other:?}"),
            }),
        }
    }

    /// `(rest, value)` for every key beginning with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries
            .range(prefix.to_owned()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(move |(k, v)| (&k[prefix.len()..], v.as_str()))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let cfg = KvConfig::parse(
            "# mixer\nlisten_addr = 127.0.0.1:9000\n\nidp.idp-a.auth_url = http://x/auth_IdP?a=b\nidp.idp-b.token_url=http://y\nplaintext = true\n",
        )
        .unwrap();
        assert_eq!(cfg.get("listen_addr"), Some("127.0.0.1:9000"));
        assert_eq!(cfg.get("idp.idp-a.auth_url"), Some("http://x/auth_IdP?a=b"));
        assert!(cfg.flag("plaintext").unwrap());
        assert!(!cfg.flag("absent").unwrap());
        let idps: Vec<_> = cfg.with_prefix("idp.").map(|(k, _)| k).collect();
        assert_eq!(idps, ["idp-a.auth_url", "idp-b.token_url"]);
        assert_eq!(KvConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            KvConfig::parse("novalue"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(KvConfig::parse("= v"), Err(ConfigError::Syntax { line: 1 })));
        let cfg = KvConfig::parse("n = x\nb = maybe").unwrap();
        assert!(matches!(cfg.require("z"), Err(ConfigError::Missing(_))));
        assert!(cfg.parsed::<u32>("n").is_err());
        assert!(cfg.flag("b").is_err());
    }
}
