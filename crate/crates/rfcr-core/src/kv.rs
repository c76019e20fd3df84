//! Plain-text `key = value` configuration files. Lines starting with `#`
//! are comments; keys may repeat (used for primitive lists).

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            message: format!("expected 'key = value', got {line:?}"),
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub fn kv_get<'a>(kv: &'a [(String, String)], key: &str) -> Option<&'a str> {
    kv.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn kv_get_all<'a>(kv: &'a [(String, String)], key: &str) -> Vec<&'a str> {
    kv.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
}

pub fn parse_field<T: std::str::FromStr>(kv: &[(String, String)], key: &str) -> Result<Option<T>> {
    match kv_get(kv, key) {
        None => Ok(None),
        Some(v) => v.parse::<T>().map(Some).map_err(|_| {
            Error::InvalidInput(format!("cannot parse {key} = {v:?}"))
        }),
    }
}
