//! Shared helpers for the plain-text `key=value` file formats.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Splits `key=value`, trimming whitespace around both parts.
pub fn split_kv(line: &str, lineno: usize) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::parse(lineno, format!("expected key=value, got '{line}'")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::parse(lineno, "empty key"));
    }
    Ok((k, v.trim()))
}

/// Ordered `key=value` entries read from a header or block, with typed lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvBlock {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvBlock {
    pub fn insert(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        if self
            .entries
            .insert(key.to_string(), (value.to_string(), lineno))
            .is_some()
        {
            return Err(Error::parse(lineno, format!("duplicate key '{key}'")));
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries
            .iter()
            .map(|(k, (v, _))| (k.as_str(), v.as_str()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::parse(*line, format!("bad value '{v}' for key '{key}'"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::parse(0, format!("missing key '{key}'")))
    }

    /// Rejects keys outside `allowed`.
    pub fn only(&self, allowed: &[&str]) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::parse(*line, format!("unknown key '{k}'")));
            }
        }
        Ok(())
    }
}

/// Reads a magic line followed by `key=value` lines. Returns the header and
/// the (1-based) index of the first line that is not part of it.
pub fn read_header<'a>(lines: &[&'a str], magic: &str) -> Result<(KvBlock, usize)> {
    let first = lines.first().map(|l| l.trim()).unwrap_or("");
    if first != magic {
        return Err(Error::parse(
            1,
            format!("expected magic '{magic}', got '{first}'"),
        ));
    }
    let mut block = KvBlock::default();
    let mut idx = 1;
    while idx < lines.len() {
        let line = lines[idx].trim();
        if !line.contains('=') {
            break;
        }
        let (k, v) = split_kv(line, idx + 1)?;
        block.insert(k, v, idx + 1)?;
        idx += 1;
    }
    Ok((block, idx))
}

/// Parses a whole `key=value` document (config files, sidecars). Blank lines
/// and `#` comments are skipped.
pub fn parse_kv_document(text: &str, magic: Option<&str>) -> Result<KvBlock> {
    let mut block = KvBlock::default();
    let mut saw_magic = magic.is_none();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_magic {
            if Some(line) != magic {
                return Err(Error::parse(
                    i + 1,
                    format!("expected magic '{}'", magic.unwrap()),
                ));
            }
            saw_magic = true;
            continue;
        }
        let (k, v) = split_kv(line, i + 1)?;
        block.insert(k, v, i + 1)?;
    }
    if !saw_magic {
        return Err(Error::parse(0, "empty document"));
    }
    Ok(block)
}

pub fn parse_f64(tok: &str, lineno: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(lineno, format!("bad number '{tok}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(lineno, format!("non-finite number '{tok}'")));
    }
    Ok(v)
}

pub fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &std::path::Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
