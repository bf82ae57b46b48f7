//! Flat `key = value` configuration plumbing shared by the config structs.

use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Implemented by configuration structs that can be echoed and overridden
/// one key at a time.
pub trait KeyValue {
    /// Every key with its current value, in a stable order.
    fn to_kv(&self) -> Vec<(&'static str, String)>;

    /// Sets `key`; returns `Ok(false)` when the key does not belong to this struct.
    fn set_kv(&mut self, key: &str, value: &str) -> Result<bool>;
}

/// Renders pairs as `key = value` lines.
pub fn render(pairs: &[(&'static str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Splits `key = value` text into pairs, skipping blanks and `#` comments.
/// Returns `(line number, key, value)` triples.
pub fn split_lines(text: &str) -> std::result::Result<Vec<(usize, String, String)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => out.push((i + 1, k.trim().to_string(), v.trim().to_string())),
            _ => return Err((i + 1, format!("expected `key = value`, found {line:?}"))),
        }
    }
    Ok(out)
}
