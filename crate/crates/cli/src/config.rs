//! `key = value` settings files. Command-line flags take precedence; every key
//! in the file must be consumed by the command, otherwise it is rejected.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, Result};

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text)
                    .map_err(|m| CliError::Validation(format!("{}: {m}", p.display())))
            }
        }
    }

    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("line {}: expected key = value", i + 1));
            };
            let key = normalize(key);
            if key.is_empty() {
                return Err(format!("line {}: empty key", i + 1));
            }
            if values
                .insert(key.clone(), (value.trim().to_string(), i + 1))
                .is_some()
            {
                return Err(format!("line {}: duplicate key `{key}`", i + 1));
            }
        }
        Ok(FileConfig {
            values,
            used: RefCell::default(),
        })
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let key = normalize(key);
        let Some((raw, line)) = self.values.get(&key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.clone());
        raw.parse().map(Some).map_err(|e| {
            CliError::Validation(format!("config line {line}: bad value for `{key}`: {e}"))
        })
    }

    /// `flag`, else the file value for `key`, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.get(key)?;
        Ok(flag.or(from_file).unwrap_or(default))
    }

    /// Like [`FileConfig::pick`] without a default.
    pub fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.get(key)?;
        Ok(flag.or(from_file))
    }

    /// A set boolean flag wins over the file.
    pub fn pick_switch(&self, flag: bool, key: &str) -> Result<bool> {
        let from_file = self.get::<bool>(key)?;
        Ok(flag || from_file.unwrap_or(false))
    }

    /// Comma-separated list in the file; repeated flags replace it entirely.
    pub fn pick_list<T>(&self, flag: Vec<T>, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file: Option<String> = self.get(key)?;
        if !flag.is_empty() {
            return Ok(flag);
        }
        let Some(list) = from_file else {
            return Ok(Vec::new());
        };
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e| {
                    CliError::Validation(format!("config `{key}`: bad entry `{s}`: {e}"))
                })
            })
            .collect()
    }

    /// Errors on any key no command setting asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<String> = self
            .values
            .iter()
            .filter(|(k, _)| !used.contains(*k))
            .map(|(k, (_, line))| format!("`{k}` (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }
}
