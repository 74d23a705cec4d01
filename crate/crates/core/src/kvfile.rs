//! Line splitter for the `key = value` text formats (scene and pipeline
//! configuration files). Blank lines and `#` comments are skipped, `[name]`
//! opens a section, everything else must be a `key = value` pair.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Line<'a> {
    Section(&'a str),
    Pair(&'a str, &'a str),
}

pub(crate) fn parse_lines<'a>(text: &'a str, what: &str) -> Result<Vec<(usize, Line<'a>)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::parse(what, format!("line {lineno}: unterminated section header")))?;
            out.push((lineno, Line::Section(name.trim())));
        } else if let Some((key, value)) = line.split_once('=') {
            out.push((lineno, Line::Pair(key.trim(), value.trim())));
        } else {
            return Err(Error::parse(
                what,
                format!("line {lineno}: expected `key = value`, got `{line}`"),
            ));
        }
    }
    Ok(out)
}
