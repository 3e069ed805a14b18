//! Output plumbing: atomic file writes and commented CSV tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        e.into()
    })
}

/// Header comment lines shared by every emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn comment_lines(&self) -> Vec<String> {
        vec![
            format!("config_hash={}", self.config_hash),
            format!("seed={}", self.seed),
            format!("tool_version={}", self.tool_version),
        ]
    }
}

/// A small string table rendered as CSV with leading `# ` comment lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        assert_eq!(row.len(), self.header.len(), "table row width");
        self.rows.push(row);
    }

    pub fn to_csv_bytes(&self, comments: &[String]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for c in comments {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header)?;
            for row in &self.rows {
                w.write_record(row)?;
            }
            w.flush()?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path, comments: &[String]) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes(comments)?)
    }
}

/// Shortest round-trip formatting used for every numeric CSV cell.
pub fn fmt_f64(v: f64) -> String {
    v.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_with_comments() {
        let mut t = Table::new(["metric", "mean"]);
        t.push(["mse".to_string(), fmt_f64(0.25)]);
        let bytes = t.to_csv_bytes(&["seed=3".to_string()]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "# seed=3\nmetric,mean\nmse,0.25\n");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn provenance_lines() {
        let p = Provenance::new("abc", 7);
        let lines = p.comment_lines();
        assert_eq!(lines[0], "config_hash=abc");
        assert_eq!(lines[1], "seed=7");
    }
}
