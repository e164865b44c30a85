//! Canonical JSON for reports: sorted keys, shortest round-trip float
//! formatting, trailing newline. Writing then reading is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub fn canonical_json(value: &impl Serialize) -> Result<String> {
    // Going through `Value` sorts object keys.
    let v = serde_json::to_value(value).map_err(|e| Error::Metric(format!("serialize: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Metric(format!("serialize: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_canonical(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, canonical_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    crate::io::read_json(path)
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    write_canonical(path, report)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    read_json_file(path)
}
