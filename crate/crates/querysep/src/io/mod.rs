//! File formats: WAV clips, PGM spectrogram dumps, TSV tables, key=value
//! metadata, binary checkpoints.

pub mod checkpoint;
mod pgm;
mod wav;

pub use pgm::{mask_byte, read_pgm, write_pgm, write_pgm_bytes};
pub use wav::{read_wav, write_replacing, write_wav};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes a TSV table with a header row.
pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a TSV table, checking the header matches exactly.
pub fn read_tsv(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let got: Vec<&str> = first.split('\t').collect();
    if got != header {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("header {got:?}, expected {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("{} cells, expected {}", cells.len(), header.len()),
            });
        }
        rows.push(cells);
    }
    Ok(rows)
}

/// Writes `key=value` metadata lines in the order given.
pub fn write_kv(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `key=value` metadata; later duplicates win.
pub fn read_kv(path: &Path) -> Result<std::collections::HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
