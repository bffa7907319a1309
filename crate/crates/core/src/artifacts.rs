//! Output directory writer. Every file written through it is recorded so the
//! run manifest can declare it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    /// Absent for files whose contents vary between identical runs (timings).
    pub sha256: Option<String>,
}

#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    entries: Vec<ArtifactEntry>,
    stamp: Option<String>,
}

#[derive(Serialize)]
struct Stamped<'a, T: ?Sized> {
    config_hash: &'a str,
    content: &'a T,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ArtifactWriter {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(root.as_ref())?;
        Ok(ArtifactWriter {
            root: root.as_ref().to_path_buf(),
            entries: Vec::new(),
            stamp: None,
        })
    }

    /// Wrap every JSON document as `{"config_hash": .., "content": ..}`.
    pub fn with_stamp(mut self, config_hash: impl Into<String>) -> Self {
        self.stamp = Some(config_hash.into());
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Write `bytes` to `name` (relative, `/`-separated) and record it.
    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.write_entry(name, bytes, true)
    }

    /// Record a file without a content hash.
    pub fn write_volatile(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.write_entry(name, bytes, false)
    }

    fn write_entry(&mut self, name: &str, bytes: &[u8], hashed: bool) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        let entry = ArtifactEntry {
            path: name.to_string(),
            sha256: hashed.then(|| sha256_hex(bytes)),
        };
        match self.entries.iter_mut().find(|e| e.path == name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = match &self.stamp {
            Some(h) => serde_json::to_string_pretty(&Stamped {
                config_hash: h,
                content: value,
            })?,
            None => serde_json::to_string_pretty(value)?,
        };
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Write a CSV from a header and pre-formatted rows.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        self.write_bytes(name, csv_text(header, rows).as_bytes())
    }

    pub fn entries(&self) -> &[ArtifactEntry] {
        &self.entries
    }
}

pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Format an optional value, leaving the cell empty when absent.
pub fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}
