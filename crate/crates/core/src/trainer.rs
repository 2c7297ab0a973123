//! Language-model training loop with warmup-cosine schedule, periodic
//! per-domain evaluation, loader updates and checkpointing.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataload::{sample_batch, DomainCorpus, LoaderState, UpdateEvent};
use crate::error::{Error, Result};
use crate::masks::MaskValues;
use crate::metrics::{MetricsWriter, StepMetrics, METRICS_SCHEMA};
use crate::model::{self, checkpoint, Batch, ModelError, TransformerWeights};
use crate::tensor::{AdamConfig, AdamState};
use crate::tensor::{Tape, TensorError};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub min_lr_fraction: f64,
    pub eval_interval: usize,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub grad_clip: Option<f64>,
    /// Sequences per evaluation forward pass.
    pub eval_batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 16,
            seq_len: 128,
            lr: 1e-3,
            warmup_fraction: 0.03,
            min_lr_fraction: 0.10,
            eval_interval: 50,
            checkpoint_interval: 0,
            grad_clip: Some(1.0),
            eval_batch: 32,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be > 0");
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_batch == 0 {
            return bad("batch_size, seq_len and eval_batch must be > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and > 0");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be >= 1");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be > 0");
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            total: self.steps,
            peak: self.lr,
            warmup_fraction: self.warmup_fraction,
            min_fraction: self.min_lr_fraction,
        }
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to `min_fraction · peak`
/// at step `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total: usize,
    pub peak: f64,
    pub warmup_fraction: f64,
    pub min_fraction: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} must lie in (0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.min_fraction > 0.0 && self.min_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "min_lr_fraction {} must lie in (0, 1]",
                self.min_fraction
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total as f64).round() as usize).clamp(1, self.total.max(1))
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total {
            return Err(Error::Config(format!("step {step} beyond schedule end {}", self.total)));
        }
        let w = self.warmup_steps();
        if step <= w {
            return Ok(self.peak * step as f64 / w as f64);
        }
        let p = (step - w) as f64 / (self.total - w) as f64;
        let min = self.min_fraction * self.peak;
        Ok(min + (self.peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

pub fn lr_schedule(step: usize, config: &TrainConfig) -> Result<f64> {
    config.schedule().lr(step)
}

/// Fixed validation batches for every domain.
#[derive(Debug, Clone)]
pub struct EvalSet {
    batches: Vec<Vec<Batch>>,
}

impl EvalSet {
    pub fn new(corpus: &DomainCorpus, seq_len: usize, eval_batch: usize) -> Result<Self> {
        let batches = (0..corpus.len())
            .map(|i| corpus.validation_batches(i, seq_len, eval_batch))
            .collect::<std::result::Result<_, _>>()?;
        Ok(EvalSet { batches })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn domain(&self, i: usize) -> &[Batch] {
        &self.batches[i]
    }
}

/// Token-weighted mean next-token loss per domain.
pub fn evaluate(weights: &TransformerWeights, masks: Option<&MaskValues>, eval: &EvalSet) -> Result<Vec<f64>> {
    eval.batches
        .iter()
        .map(|batches| {
            let mut total = 0.0;
            let mut count = 0;
            for b in batches {
                let (loss, n) = model::eval_loss(weights, masks, b)?;
                total += loss * n as f64;
                count += n;
            }
            if count == 0 {
                return Err(Error::Invariant("empty validation block".into()));
            }
            Ok(total / count as f64)
        })
        .collect()
}

/// Scales `grads` in place to global L2 norm `max` when larger. Returns the
/// pre-clip norm and whether clipping happened.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max: Option<f64>) -> (f64, bool) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    match max {
        Some(m) if norm > m => {
            let s = m / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
            (norm, true)
        }
        _ => (norm, false),
    }
}

/// Maps a non-finite tensor failure to a numerical abort tagged with the step.
pub(crate) fn tag_step(step: usize, what: &'static str) -> impl Fn(ModelError) -> Error {
    move |e| match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => Error::NonFinite {
            what,
            step,
            detail: format!("op {op}"),
        },
        e => e.into(),
    }
}

pub(crate) fn apply_adam(
    adam: &mut AdamState,
    weights: &mut TransformerWeights,
    grads: &[Vec<f64>],
    lr: f64,
) -> Result<()> {
    let mut ts = weights.tensors_mut();
    let mut params: Vec<&mut [f64]> = ts.iter_mut().map(|t| t.data_mut()).collect();
    let g: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam.step(&mut params, &g, lr)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: TransformerWeights,
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub events: Vec<UpdateEvent>,
    /// Sequences drawn from each domain over the whole run.
    pub domain_sequences: Vec<usize>,
    pub final_domain_weights: Vec<f64>,
    pub metrics: Vec<StepMetrics>,
}

/// Output locations of a run; `None` keeps everything in memory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(FINAL_CHECKPOINT)
    }

    pub fn periodic(&self, step: usize) -> PathBuf {
        self.dir.join(format!("checkpoint-{step:06}"))
    }
}

/// Plain LM training of `weights` with batches drawn from `loader`'s weights.
/// `stage` labels the metrics lines.
pub fn train(
    mut weights: TransformerWeights,
    corpus: &DomainCorpus,
    loader: &mut LoaderState,
    config: &TrainConfig,
    stage: &str,
    out: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    config.validate()?;
    weights.validate()?;
    if loader.weights.len() != corpus.len() {
        return Err(Error::Config(format!(
            "loader has {} domain weights for {} domains",
            loader.weights.len(),
            corpus.len()
        )));
    }
    let schedule = config.schedule();
    let eval = EvalSet::new(corpus, config.seq_len, config.eval_batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&weights.tensor_lens(), config.adam);
    let mut writer = match out {
        Some(p) => {
            std::fs::create_dir_all(&p.dir).map_err(Error::io(&p.dir))?;
            Some(MetricsWriter::open(&p.metrics())?)
        }
        None => None,
    };
    let initial_losses = evaluate(&weights, None, &eval)?;
    let mut events = Vec::new();
    let mut cumulative = vec![0usize; corpus.len()];
    let mut metrics = Vec::with_capacity(config.steps);
    let lens = weights.tensor_lens();

    for step in 1..=config.steps {
        let used_weights = loader.weights.clone();
        let (batch, tally) = sample_batch(corpus, &used_weights, config.batch_size, config.seq_len, &mut rng)?;
        let mut tape = Tape::new();
        let params = weights.record(&mut tape, true)?;
        let loss = model::lm_loss(&mut tape, &weights.config, &params, None, &batch)
            .map_err(tag_step(step, "training loss"))?;
        let loss_value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        let mut g: Vec<Vec<f64>> = params
            .all()
            .iter()
            .zip(&lens)
            .map(|(&v, &n)| grads.get_or_zeros(v, n))
            .collect();
        let (grad_norm, clipped) = clip_global_norm(&mut g, config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient norm",
                step,
                detail: format!("loss {loss_value}"),
            });
        }
        let lr = schedule.lr(step)?;
        apply_adam(&mut adam, &mut weights, &g, lr)?;
        if !weights.is_finite() {
            return Err(Error::NonFinite {
                what: "weights",
                step,
                detail: format!("after update with lr {lr}"),
            });
        }
        for (c, t) in cumulative.iter_mut().zip(&tally) {
            *c += t;
        }
        let event = loader.maybe_update(step, || evaluate(&weights, None, &eval))?;
        let rec = StepMetrics {
            schema: METRICS_SCHEMA,
            stage: stage.to_string(),
            step,
            lm_loss: loss_value,
            lr,
            grad_norm,
            clipped,
            domain_weights: used_weights,
            domain_sequences: tally,
            tokens: batch.inputs.len(),
            val_losses: event.as_ref().map(|e| e.losses.clone()),
            delta: event.as_ref().map(|e| e.delta.clone()),
            pruning: None,
        };
        if let Some(w) = writer.as_mut() {
            w.write(&rec)?;
        }
        metrics.push(rec);
        events.extend(event);
        if let Some(p) = out {
            if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 && step < config.steps {
                checkpoint::save(&p.periodic(step), &weights, None)?;
            }
        }
    }

    let final_losses = evaluate(&weights, None, &eval)?;
    if let Some(p) = out {
        checkpoint::save(&p.checkpoint(), &weights, None)?;
    }
    Ok(TrainOutcome {
        weights,
        initial_losses,
        final_losses,
        events,
        domain_sequences: cumulative,
        final_domain_weights: loader.weights.clone(),
        metrics,
    })
}

/// Stage two: continued pretraining of an extracted model. The optimizer
/// state starts fresh.
pub fn continue_pretrain(
    weights: TransformerWeights,
    corpus: &DomainCorpus,
    loader: &mut LoaderState,
    config: &TrainConfig,
    out: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    train(weights, corpus, loader, config, "ct", out)
}

pub fn load_and_evaluate(dir: &Path, corpus: &DomainCorpus, seq_len: usize, eval_batch: usize) -> Result<Vec<f64>> {
    let (w, _) = checkpoint::load(dir)?;
    evaluate(&w, None, &EvalSet::new(corpus, seq_len, eval_batch)?)
}
