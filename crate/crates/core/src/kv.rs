//! Flat `key = value` files. `#` starts a comment; blank lines are skipped.

use std::collections::HashSet;

/// `(line, key, value)` triples, or `(line, message)` for the first bad line.
/// A key may appear once.
pub(crate) fn pairs(text: &str) -> Result<Vec<(usize, &str, &str)>, (usize, String)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| (line, format!("expected key = value, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key) {
            return Err((line, format!("duplicate key {key:?}")));
        }
        out.push((line, key, value));
    }
    Ok(out)
}

pub(crate) fn number<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}
