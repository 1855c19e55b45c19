//! JSONL embedding dumps.
//!
//! One object per line:
//!
//! ```text
//! {"item_id":3,"level":4,"mu":[0.1,-0.2],"log_var":[-1.0,-0.9]}
//! ```
//!
//! `level` is optional (caption level for text dumps). Two records are a
//! matching pair when their `item_id`s are equal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::DiagGaussian;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub item_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(item_id: usize, level: Option<usize>, z: &DiagGaussian) -> Self {
        Self {
            item_id,
            level,
            mu: z.mu().to_vec(),
            log_var: z.log_var().to_vec(),
        }
    }

    pub fn gaussian(&self) -> Result<DiagGaussian> {
        DiagGaussian::new(self.mu.clone(), self.log_var.clone())
    }
}

pub fn to_jsonl(records: &[EmbeddingRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out += &serde_json::to_string(r)?;
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

/// Blank lines are skipped; every record must share one dimension.
pub fn parse_jsonl(text: &str, origin: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: EmbeddingRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if r.mu.len() != r.log_var.len() {
            return Err(err(format!(
                "mu has {} entries, log_var {}",
                r.mu.len(),
                r.log_var.len()
            )));
        }
        if let Some(first) = out.first() {
            if first.mu.len() != r.mu.len() {
                return Err(err(format!(
                    "dimension {} differs from {}",
                    r.mu.len(),
                    first.mu.len()
                )));
            }
        }
        r.gaussian().map_err(|e| err(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}
