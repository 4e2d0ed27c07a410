//! Line-oriented `key = value` files. `#` starts a comment.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str, source: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: source.to_string(),
                line: n + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            });
        };
        out.push(Entry {
            line: n + 1,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

pub(crate) fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// `a-b`, `a..b` or a single `a`, inclusive.
pub(crate) fn range(key: &str, value: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = if value.contains("..") {
        value.split("..").collect()
    } else {
        value.split('-').collect()
    };
    let (lo, hi) = match parts.as_slice() {
        [one] => {
            let v = number(key, one.trim())?;
            (v, v)
        }
        [a, b] => (number(key, a.trim())?, number(key, b.trim())?),
        _ => return Err(Error::Config(format!("{key}: bad range {value:?}"))),
    };
    if lo > hi {
        return Err(Error::Config(format!("{key}: empty range {value:?}")));
    }
    Ok((lo, hi))
}

pub(crate) fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}
