use std::path::Path;

use crate::error::{io_err, Error, Result};

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; values keep inner whitespace but are trimmed at both ends.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", no + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", no + 1)));
        }
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(Error::Format(format!(
                "line {}: duplicate key '{k}'",
                no + 1
            )));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn load_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_key_values(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses `value` for `key`, naming both in the error.
pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value '{value}' for '{key}'")))
}
