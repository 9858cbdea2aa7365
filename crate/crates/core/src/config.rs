//! Flat `key = value` configuration files.
//!
//! One pair per line, `#` starts a comment, unknown keys are errors. Every
//! configurable struct implements [`KvSection`] so a single file can carry the
//! model, dataset and optimizer settings together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, WwtError};

/// A struct whose fields can be read from and written to `key = value` pairs.
pub trait KvSection {
    /// Consume `key` if it belongs to this section. Returns `Ok(false)` for
    /// keys owned by someone else.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every key of this section with its current value, in a fixed order.
    fn pairs(&self) -> Vec<(&'static str, String)>;
}

/// Parse `text` into ordered pairs. Duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            WwtError::Config(format!(
                "line {}: expected key=value, got '{line}'",
                lineno + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(WwtError::Config(format!("line {}: empty key", lineno + 1)));
        }
        if seen.insert(k.to_string(), lineno + 1).is_some() {
            return Err(WwtError::Config(format!(
                "line {}: duplicate key '{k}'",
                lineno + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Apply parsed pairs to a list of sections; a key nobody accepts is an error.
pub fn apply_kv(pairs: &[(String, String)], sections: &mut [&mut dyn KvSection]) -> Result<()> {
    'outer: for (k, v) in pairs {
        for s in sections.iter_mut() {
            if s.set(k, v)? {
                continue 'outer;
            }
        }
        return Err(WwtError::Config(format!("unknown key '{k}'")));
    }
    Ok(())
}

pub fn render_kv(sections: &[&dyn KvSection]) -> String {
    let mut out = String::new();
    for s in sections {
        for (k, v) in s.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
    }
    out
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| WwtError::io(path, e))
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| WwtError::Config(format!("bad value '{value}' for key '{key}'")))
}

/// Implements [`KvSection`] for a struct whose listed fields all implement
/// `FromStr + Display`.
#[macro_export]
macro_rules! kv_section {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::KvSection for $ty {
            fn set(&mut self, key: &str, value: &str) -> $crate::error::Result<bool> {
                match key {
                    $(stringify!($field) => {
                        self.$field = $crate::config::parse_value(key, value)?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }

            fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string())),*]
            }
        }
    };
}
