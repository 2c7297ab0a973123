//! Append-only JSON-lines metrics.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA: u32 = 1;

/// One line of a metrics file. Pruning, source training and continued
/// pretraining share the schema; stage-specific fields are omitted when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub schema: u32,
    pub stage: String,
    pub step: usize,
    pub lm_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub domain_weights: Vec<f64>,
    /// Sequences drawn from each domain in this step's batch.
    pub domain_sequences: Vec<usize>,
    pub tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_losses: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruneMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMetrics {
    pub objective: f64,
    pub lr_mask: f64,
    /// Sampled Σz per granularity (head/int summed over layers), order
    /// layer, hidden, head, int.
    pub mask_sums: [f64; 4],
    pub targets: [f64; 4],
    pub residuals: [f64; 4],
    pub lambda: [Vec<f64>; 4],
    pub phi: [Vec<f64>; 4],
}

pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Opens `path` for appending, creating it if missing.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Error::io(path))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(Error::io(&self.path))?;
        self.file.flush().map_err(Error::io(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepMetrics = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize) -> StepMetrics {
        StepMetrics {
            schema: METRICS_SCHEMA,
            stage: "ct".into(),
            step,
            lm_loss: 1.5,
            lr: 1e-3,
            grad_norm: 0.5,
            clipped: false,
            domain_weights: vec![0.5, 0.5],
            domain_sequences: vec![1, 1],
            tokens: 8,
            val_losses: None,
            delta: None,
            pruning: None,
        }
    }

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        MetricsWriter::open(&p).unwrap().write(&rec(1)).unwrap();
        MetricsWriter::open(&p).unwrap().write(&rec(2)).unwrap();
        let back = read_metrics(&p).unwrap();
        assert_eq!(back, vec![rec(1), rec(2)]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.contains("pruning"));
    }

    #[test]
    fn corrupt_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"step\":\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Config(_))));
    }
}
