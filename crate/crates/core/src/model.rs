//! Byte-level decoder-only transformer with RMSNorm, learned absolute
//! positions and a gated (SiLU) feed-forward block, plus the four mask
//! injection points used during pruning.
//!
//! Weights use the `x · W` convention: a projection from width `a` to width
//! `b` is stored as an `[a, b]` row-major matrix.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{self, BinaryMaskSet, MaskValues, MaskVars};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub mod checkpoint;

/// 256 byte values plus one padding id.
pub const VOCAB_SIZE: usize = 257;
pub const PAD_ID: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid target shape: {0}")]
    Target(String),
    #[error("token {id} outside vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch is malformed: {0}")]
    Batch(String),
    #[error("binary mask does not match the target shape")]
    BinaryMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] masks::MaskError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    /// The default toy source model.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden_dim: 64,
            n_heads: 4,
            head_dim: 16,
            intermediate_dim: 256,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 128,
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.hidden_dim,
            self.n_heads,
            self.head_dim,
            self.intermediate_dim,
            self.max_seq_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::Config(format!("all dimensions must be >= 1: {self:?}")));
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return Err(ModelError::Config(format!(
                "hidden_dim {} != n_heads {} * head_dim {}",
                self.hidden_dim, self.n_heads, self.head_dim
            )));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(ModelError::Config(format!(
                "vocab_size must be {VOCAB_SIZE} (bytes + pad), got {}",
                self.vocab_size
            )));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(ModelError::Config(format!("norm_eps {}", self.norm_eps)));
        }
        Ok(())
    }

    pub fn target_shape(&self) -> TargetShape {
        TargetShape {
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            intermediate_dim: self.intermediate_dim,
        }
    }

    /// Same architecture family reshaped to `target`.
    pub fn with_shape(&self, target: &TargetShape) -> ModelConfig {
        ModelConfig {
            n_layers: target.n_layers,
            hidden_dim: target.hidden_dim,
            n_heads: target.n_heads,
            intermediate_dim: target.intermediate_dim,
            ..self.clone()
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, t, m) = (
            self.vocab_size,
            self.hidden_dim,
            self.max_seq_len,
            self.intermediate_dim,
        );
        let attn = self.n_heads * self.head_dim;
        let per_layer = 2 * d + 4 * d * attn + 3 * d * m;
        v * d + t * d + self.n_layers * per_layer + d + d * v
    }

    /// Parameters excluding the token/position embeddings and the output head.
    pub fn non_embedding_params(&self) -> usize {
        let d = self.hidden_dim;
        self.param_count() - 2 * self.vocab_size * d - self.max_seq_len * d
    }
}

/// Target architecture `(L_T, d_T, H_T, m_T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetShape {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub intermediate_dim: usize,
}

impl Default for TargetShape {
    fn default() -> Self {
        TargetShape {
            n_layers: 3,
            hidden_dim: 32,
            n_heads: 2,
            intermediate_dim: 128,
        }
    }
}

impl TargetShape {
    /// Target with the head count derived from the source head size.
    pub fn derive(source: &ModelConfig, n_layers: usize, hidden_dim: usize, intermediate_dim: usize) -> Result<Self> {
        if hidden_dim % source.head_dim != 0 {
            return Err(ModelError::Target(format!(
                "hidden_dim {hidden_dim} is not a multiple of head_dim {}",
                source.head_dim
            )));
        }
        let t = TargetShape {
            n_layers,
            hidden_dim,
            n_heads: hidden_dim / source.head_dim,
            intermediate_dim,
        };
        t.validate(source)?;
        Ok(t)
    }

    pub fn validate(&self, source: &ModelConfig) -> Result<()> {
        let pairs = [
            ("n_layers", self.n_layers, source.n_layers),
            ("hidden_dim", self.hidden_dim, source.hidden_dim),
            ("n_heads", self.n_heads, source.n_heads),
            ("intermediate_dim", self.intermediate_dim, source.intermediate_dim),
        ];
        for (name, t, s) in pairs {
            if t == 0 || t > s {
                return Err(ModelError::Target(format!("{name}: target {t} vs source {s}")));
            }
        }
        if self.hidden_dim != self.n_heads * source.head_dim {
            return Err(ModelError::Target(format!(
                "n_heads {} must equal hidden_dim {} / head_dim {}",
                self.n_heads, self.hidden_dim, source.head_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

const INIT_STD: f64 = 0.02;

impl TransformerWeights {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, m, t) = (
            config.vocab_size,
            config.hidden_dim,
            config.intermediate_dim,
            config.max_seq_len,
        );
        let attn = config.n_heads * config.head_dim;
        let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(rng)).collect();
            Tensor::new(shape, data).expect("shape matches")
        };
        let tok_embed = normal(vec![v, d], INIT_STD);
        let pos_embed = normal(vec![t, d], INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::full(vec![d], 1.0),
                wq: normal(vec![d, attn], INIT_STD),
                wk: normal(vec![d, attn], INIT_STD),
                wv: normal(vec![d, attn], INIT_STD),
                wo: normal(vec![attn, d], residual_std),
                ffn_norm: Tensor::full(vec![d], 1.0),
                w_gate: normal(vec![d, m], INIT_STD),
                w_up: normal(vec![d, m], INIT_STD),
                w_down: normal(vec![m, d], residual_std),
            })
            .collect();
        let lm_head = normal(vec![d, v], INIT_STD);
        Ok(TransformerWeights {
            config: config.clone(),
            tok_embed,
            pos_embed,
            layers,
            final_norm: Tensor::full(vec![d], 1.0),
            lm_head,
        })
    }

    /// Named tensors in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_embed".to_string(), &self.tok_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.named() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable tensors in the same order as [`TransformerWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn tensor_lens(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.len()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensor_lens().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (v, d, m, t) = (c.vocab_size, c.hidden_dim, c.intermediate_dim, c.max_seq_len);
        let attn = c.n_heads * c.head_dim;
        let mut expect: Vec<Vec<usize>> = vec![vec![v, d], vec![t, d]];
        for _ in 0..c.n_layers {
            expect.extend([
                vec![d],
                vec![d, attn],
                vec![d, attn],
                vec![d, attn],
                vec![attn, d],
                vec![d],
                vec![d, m],
                vec![d, m],
                vec![m, d],
            ]);
        }
        expect.push(vec![d]);
        expect.push(vec![d, v]);
        let named = self.named();
        if named.len() != expect.len() {
            return Err(ModelError::Config(format!(
                "{} tensors for {} layers",
                named.len(),
                c.n_layers
            )));
        }
        for ((name, t), shape) in named.iter().zip(&expect) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records all weights on the tape. Non-trainable recording skips
    /// gradient bookkeeping for evaluation passes.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let mut rec = |t: &Tensor| -> Result<Var> {
            Ok(if trainable {
                tape.param(t)?
            } else {
                tape.constant(t.shape().to_vec(), t.data().to_vec())?
            })
        };
        let tok_embed = rec(&self.tok_embed)?;
        let pos_embed = rec(&self.pos_embed)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(LayerVars {
                attn_norm: rec(&l.attn_norm)?,
                wq: rec(&l.wq)?,
                wk: rec(&l.wk)?,
                wv: rec(&l.wv)?,
                wo: rec(&l.wo)?,
                ffn_norm: rec(&l.ffn_norm)?,
                w_gate: rec(&l.w_gate)?,
                w_up: rec(&l.w_up)?,
                w_down: rec(&l.w_down)?,
            });
        }
        Ok(ParamVars {
            tok_embed,
            pos_embed,
            layers,
            final_norm: rec(&self.final_norm)?,
            lm_head: rec(&self.lm_head)?,
        })
    }
}

impl LayerWeights {
    fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Tape handles for the weights, in [`TransformerWeights::named`] order via [`ParamVars::all`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub tok_embed: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

/// Packed next-token batch: `inputs.len() == targets.len()` is a multiple of
/// `seq_len`, each block of `seq_len` positions being one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub seq_len: usize,
}

impl Batch {
    /// Builds inputs/targets from windows of `seq_len + 1` tokens.
    pub fn from_windows(windows: &[Vec<usize>], seq_len: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(windows.len() * seq_len);
        let mut targets = Vec::with_capacity(windows.len() * seq_len);
        for w in windows {
            if w.len() != seq_len + 1 {
                return Err(ModelError::Batch(format!(
                    "window of {} tokens for seq_len {seq_len}",
                    w.len()
                )));
            }
            inputs.extend_from_slice(&w[..seq_len]);
            targets.extend(w[1..].iter().map(|&t| (t != PAD_ID).then_some(t)));
        }
        Ok(Batch {
            inputs,
            targets,
            seq_len,
        })
    }

    pub fn n_sequences(&self) -> usize {
        self.inputs.len() / self.seq_len.max(1)
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.seq_len == 0 || self.inputs.is_empty() || self.inputs.len() % self.seq_len != 0 {
            return Err(ModelError::Batch(format!(
                "{} tokens with seq_len {}",
                self.inputs.len(),
                self.seq_len
            )));
        }
        if self.targets.len() != self.inputs.len() {
            return Err(ModelError::Batch("targets/inputs length mismatch".into()));
        }
        if self.seq_len > config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: self.seq_len,
                max: config.max_seq_len,
            });
        }
        for &id in self.inputs.iter().chain(self.targets.iter().flatten()) {
            if id >= config.vocab_size {
                return Err(ModelError::Token {
                    id,
                    vocab: config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Forward pass to logits `[n, vocab]`.
///
/// With `masks`, the hidden gate multiplies the embedding output and every
/// attention and feed-forward output; each head's output is scaled by its
/// head gate before the output projection; the intermediate gate scales the
/// gated activation; and the layer gate scales both residual contributions
/// of its block.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamVars,
    masks: Option<&MaskVars>,
    batch: &Batch,
) -> Result<Var> {
    batch.validate(config)?;
    let t = batch.seq_len;
    let positions: Vec<usize> = (0..batch.inputs.len()).map(|i| i % t).collect();
    let tok = tape.embedding(params.tok_embed, &batch.inputs)?;
    let pos = tape.embedding(params.pos_embed, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let denom = masks.map_or(config.hidden_dim, |m| m.hidden_active);
    if let Some(m) = masks {
        x = tape.mul(x, m.hidden)?;
    }
    for (l, lw) in params.layers.iter().enumerate() {
        let layer_gate = match masks {
            Some(m) => Some(tape.select_row(m.layer, l)?),
            None => None,
        };
        let h = tape.rms_norm(x, lw.attn_norm, config.norm_eps, denom)?;
        let q = tape.matmul(h, lw.wq)?;
        let k = tape.matmul(h, lw.wk)?;
        let v = tape.matmul(h, lw.wv)?;
        let mut a = tape.causal_attention(q, k, v, config.n_heads, t)?;
        if let Some(m) = masks {
            let heads = tape.select_row(m.head, l)?;
            let cols = tape.repeat_each(heads, config.head_dim)?;
            a = tape.mul(a, cols)?;
        }
        let mut o = tape.matmul(a, lw.wo)?;
        if let (Some(m), Some(g)) = (masks, layer_gate) {
            o = tape.mul(o, m.hidden)?;
            o = tape.mul(o, g)?;
        }
        x = tape.add(x, o)?;

        let h = tape.rms_norm(x, lw.ffn_norm, config.norm_eps, denom)?;
        let gate = tape.matmul(h, lw.w_gate)?;
        let up = tape.matmul(h, lw.w_up)?;
        let sg = tape.sigmoid(gate)?;
        let silu = tape.mul(gate, sg)?;
        let mut act = tape.mul(silu, up)?;
        if let Some(m) = masks {
            let row = tape.select_row(m.int, l)?;
            act = tape.mul(act, row)?;
        }
        let mut f = tape.matmul(act, lw.w_down)?;
        if let (Some(m), Some(g)) = (masks, layer_gate) {
            f = tape.mul(f, m.hidden)?;
            f = tape.mul(f, g)?;
        }
        x = tape.add(x, f)?;
    }
    let h = tape.rms_norm(x, params.final_norm, config.norm_eps, denom)?;
    Ok(tape.matmul(h, params.lm_head)?)
}

/// Mean next-token cross-entropy over non-pad target positions.
pub fn lm_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamVars,
    masks: Option<&MaskVars>,
    batch: &Batch,
) -> Result<Var> {
    let logits = forward(tape, config, params, masks, batch)?;
    tape.cross_entropy(logits, &batch.targets).map_err(|e| match e {
        TensorError::NoTargets => ModelError::Batch("batch contains only padding targets".into()),
        e => e.into(),
    })
}

/// Logits of a model with fixed (non-trainable) weights and optional fixed mask values.
pub fn eval_logits(weights: &TransformerWeights, masks: Option<&MaskValues>, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = weights.record(&mut tape, false)?;
    let mv = match masks {
        Some(m) => Some(m.record(&mut tape)?),
        None => None,
    };
    let logits = forward(&mut tape, &weights.config, &params, mv.as_ref(), batch)?;
    Ok(tape.to_tensor(logits))
}

/// Loss of a model with fixed weights, returning `(mean loss, scored positions)`.
pub fn eval_loss(weights: &TransformerWeights, masks: Option<&MaskValues>, batch: &Batch) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let params = weights.record(&mut tape, false)?;
    let mv = match masks {
        Some(m) => Some(m.record(&mut tape)?),
        None => None,
    };
    let loss = lm_loss(&mut tape, &weights.config, &params, mv.as_ref(), batch)?;
    let count = batch.targets.iter().filter(|t| t.is_some()).count();
    Ok((tape.scalar(loss), count))
}

/// Dense model at the target shape: absorbs kept-unit scores, then physically
/// removes pruned layers, heads, intermediate and hidden dimensions.
pub fn extract_pruned(
    weights: &TransformerWeights,
    binary: &BinaryMaskSet,
    scores: &MaskValues,
    target: &TargetShape,
) -> Result<TransformerWeights> {
    let src = &weights.config;
    target.validate(src)?;
    if !binary.matches(target)
        || binary.layers.len() != src.n_layers
        || binary.hidden.len() != src.hidden_dim
    {
        return Err(ModelError::BinaryMismatch);
    }
    let absorbed = masks::absorb(weights, scores, binary);
    let hidden = binary.kept_hidden();
    let hd = src.head_dim;
    let cfg = src.with_shape(target);

    let layers = binary
        .kept_layers()
        .into_iter()
        .map(|l| {
            let lw = &absorbed.layers[l];
            let heads = binary.kept_heads(l);
            let head_cols: Vec<usize> = heads.iter().flat_map(|&h| h * hd..(h + 1) * hd).collect();
            let int = binary.kept_int(l);
            LayerWeights {
                attn_norm: gather_vec(&lw.attn_norm, &hidden),
                wq: gather(&lw.wq, &hidden, &head_cols),
                wk: gather(&lw.wk, &hidden, &head_cols),
                wv: gather(&lw.wv, &hidden, &head_cols),
                wo: gather(&lw.wo, &head_cols, &hidden),
                ffn_norm: gather_vec(&lw.ffn_norm, &hidden),
                w_gate: gather(&lw.w_gate, &hidden, &int),
                w_up: gather(&lw.w_up, &hidden, &int),
                w_down: gather(&lw.w_down, &int, &hidden),
            }
        })
        .collect();
    let all_vocab: Vec<usize> = (0..src.vocab_size).collect();
    let all_pos: Vec<usize> = (0..src.max_seq_len).collect();
    let out = TransformerWeights {
        config: cfg,
        tok_embed: gather(&absorbed.tok_embed, &all_vocab, &hidden),
        pos_embed: gather(&absorbed.pos_embed, &all_pos, &hidden),
        layers,
        final_norm: gather_vec(&absorbed.final_norm, &hidden),
        lm_head: gather(&absorbed.lm_head, &hidden, &all_vocab),
    };
    out.validate()?;
    Ok(out)
}

fn gather(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let width = t.shape()[1];
    let data = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| t.data()[r * width + c]))
        .collect();
    Tensor::new(vec![rows.len(), cols.len()], data).expect("gathered shape")
}

fn gather_vec(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::new(vec![idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).expect("gathered shape")
}
