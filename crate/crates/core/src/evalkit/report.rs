//! CSV reports with a JSON sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_atomic;

/// Provenance written next to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub report: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Free-form notes, e.g. whether ablations retrained the summarizer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// `v<crate version>-g<rev>`; the revision comes from `ANCHORSUM_GIT_REV`
/// at build time and is `unknown` otherwise.
pub fn version_string() -> String {
    format!(
        "v{}-g{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("ANCHORSUM_GIT_REV").unwrap_or("unknown")
    )
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    csv_path.with_file_name(name)
}

/// Writes `csv` to `path` and the metadata to `<path>.json`, both atomically.
pub fn write_report(path: &Path, csv: &str, meta: &ReportMeta) -> Result<()> {
    write_atomic(path, csv.as_bytes())?;
    let mut json = serde_json::to_vec_pretty(meta)?;
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)
}

/// Serializes rows with a header through the csv crate.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
