//! Plain-text `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                no + 1
            ))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

/// Comma-separated list, e.g. `128, 64`.
pub fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| value(key, p.trim())).collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn render(entries: &[(String, String)]) -> String {
    entries
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let e = parse("# header\nepochs = 3 # inline\n\n dense_widths=128, 64\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(value::<usize>(&e[0].0, &e[0].1).unwrap(), 3);
        assert_eq!(list::<usize>(&e[1].0, &e[1].1).unwrap(), vec![128, 64]);
        assert!(parse("novalue\n").is_err());
        assert!(value::<f64>("lr", "abc").is_err());
        assert_eq!(parse(&render(&e)).unwrap(), e);
    }
}
