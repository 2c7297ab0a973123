//! Checkpoint directory: `config.json`, `manifest.json` and `weights.bin`
//! (little-endian f64, row-major, concatenated in manifest order).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LayerWeights, ModelConfig, ModelError, TargetShape, TransformerWeights};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Present when the checkpoint was produced by pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arrays: Vec<ArrayEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|source| CheckpointError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, s + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|source| CheckpointError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn save(dir: &Path, weights: &TransformerWeights, target: Option<TargetShape>) -> Result<()> {
    weights.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(
        &dir.join(CONFIG_FILE),
        &CheckpointConfig {
            format_version: FORMAT_VERSION,
            model: weights.config.clone(),
            target,
        },
    )?;
    let named = weights.named();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arrays: named
            .iter()
            .map(|(n, t)| ArrayEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let path = dir.join(WEIGHTS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for (_, t) in &named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(TransformerWeights, CheckpointConfig)> {
    let cfg: CheckpointConfig = read_json(&dir.join(CONFIG_FILE))?;
    if cfg.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported format_version {}",
            cfg.format_version
        )));
    }
    cfg.model.validate()?;
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Format(format!(
            "{WEIGHTS_FILE} has {} bytes, not a multiple of 8",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let total: usize = manifest.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if total != values.len() {
        return Err(CheckpointError::Format(format!(
            "manifest describes {total} values, weights file holds {}",
            values.len()
        )));
    }
    let mut offset = 0;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for a in &manifest.arrays {
        let n: usize = a.shape.iter().product();
        let t = Tensor::new(a.shape.clone(), values[offset..offset + n].to_vec())
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        offset += n;
        arrays.push((a.name.clone(), t));
    }
    let weights = assemble(cfg.model.clone(), arrays)?;
    weights.validate()?;
    Ok((weights, cfg))
}

fn assemble(config: ModelConfig, arrays: Vec<(String, Tensor)>) -> Result<TransformerWeights> {
    let mut it = arrays.into_iter();
    let mut take = |expected: &str| -> Result<Tensor> {
        match it.next() {
            Some((name, t)) if name == expected => Ok(t),
            Some((name, _)) => Err(CheckpointError::Format(format!(
                "expected array {expected}, found {name}"
            ))),
            None => Err(CheckpointError::Format(format!("missing array {expected}"))),
        }
    };
    let tok_embed = take("tok_embed")?;
    let pos_embed = take("pos_embed")?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut t = |n: &str| take(&format!("layers.{i}.{n}"));
        layers.push(LayerWeights {
            attn_norm: t("attn_norm")?,
            wq: t("wq")?,
            wk: t("wk")?,
            wv: t("wv")?,
            wo: t("wo")?,
            ffn_norm: t("ffn_norm")?,
            w_gate: t("w_gate")?,
            w_up: t("w_up")?,
            w_down: t("w_down")?,
        });
    }
    let final_norm = take("final_norm")?;
    let lm_head = take("lm_head")?;
    if let Some((name, _)) = it.next() {
        return Err(CheckpointError::Format(format!("unexpected array {name}")));
    }
    Ok(TransformerWeights {
        config,
        tok_embed,
        pos_embed,
        layers,
        final_norm,
        lm_head,
    })
}
