//! Artifact writers: every file is parsed back and checked before it is
//! atomically moved into place.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

fn invalid(path: &Path, msg: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("{}: {msg}", path.display()))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Checks that `v` (or each element, if it is an array) is an object holding `required`.
pub fn check_json(v: &Value, required: &[&str]) -> Result<(), String> {
    let objects: Vec<&Value> = match v {
        Value::Array(items) => items.iter().collect(),
        other => vec![other],
    };
    for o in objects {
        let map = o.as_object().ok_or("expected a JSON object")?;
        if let Some(k) = required.iter().find(|k| !map.contains_key(**k)) {
            return Err(format!("missing field `{k}`"));
        }
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T, required: &[&str]) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid(path, e))?;
    text.push('\n');
    let back: Value = serde_json::from_str(&text).map_err(|e| invalid(path, e))?;
    check_json(&back, required).map_err(|e| invalid(path, e))?;
    write_atomic(path, text.as_bytes())
}

/// Checks the header and that every record has as many fields.
pub fn check_csv(bytes: &[u8], header: &[&str]) -> Result<(), String> {
    let mut r = csv::Reader::from_reader(bytes);
    let got = r.headers().map_err(|e| e.to_string())?;
    if got.iter().ne(header.iter().copied()) {
        return Err(format!("header {:?} does not match {header:?}", got.iter().collect::<Vec<_>>()));
    }
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        if rec.len() != header.len() {
            return Err(format!("row {} has {} fields, expected {}", i + 1, rec.len(), header.len()));
        }
    }
    Ok(())
}

pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> io::Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> io::Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let bytes = csv_bytes(header, rows)?;
    write_csv_bytes(path, header, &bytes)
}

/// Writes CSV produced elsewhere after checking it against `header`.
pub fn write_csv_bytes(path: &Path, header: &[&str], bytes: &[u8]) -> io::Result<()> {
    check_csv(bytes, header).map_err(|e| invalid(path, e))?;
    write_atomic(path, bytes)
}

/// Fixed-precision float for CSV cells.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.6}")
}
