//! Tab-separated manifest reading. Blank lines and `#` comments are skipped.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One parsed line: 1-based line number and its fields.
pub type Row = (usize, Vec<String>);

pub fn read_rows(path: &Path, fields: usize) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rows(&text, fields).map_err(|(line, reason)| Error::Parse { path: path.to_path_buf(), line, reason })
}

pub(crate) fn parse_rows(text: &str, fields: usize) -> std::result::Result<Vec<Row>, (usize, String)> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<String> = line.split('\t').map(|s| s.trim().to_owned()).collect();
        if parts.len() != fields {
            return Err((n + 1, format!("expected {fields} tab-separated fields, found {}", parts.len())));
        }
        if let Some(i) = parts.iter().position(|p| p.is_empty()) {
            return Err((n + 1, format!("field {} is empty", i + 1)));
        }
        rows.push((n + 1, parts));
    }
    Ok(rows)
}
