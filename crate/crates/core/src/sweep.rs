//! Pruning-versus-continued-pretraining budget sweep: the total token budget
//! is held fixed while the pruning share is scaled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataload::{DomainCorpus, LoaderMode, LoaderState};
use crate::model::TransformerWeights;
use crate::pruning::{run_pruning, PruneConfig};
use crate::trainer::{continue_pretrain, RunPaths, TrainConfig};
use crate::{Error, Result};

pub const SWEEP_FILE: &str = "sweep.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub prune_steps: usize,
    pub ct_steps: usize,
    pub prune_tokens: usize,
    pub ct_tokens: usize,
    pub post_prune_losses: Vec<f64>,
    pub post_prune_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_ct_losses: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_ct_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub domains: Vec<String>,
    pub total_tokens: usize,
    pub rows: Vec<SweepRow>,
    /// Post-pruning mean loss strictly decreases as the pruning share grows.
    pub monotone: bool,
}

pub fn monotone_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

/// Initial continued-pretraining weights: dynamic loading resumes from the
/// pruning stage's final weights, static loading keeps the original ones.
pub fn ct_initial_weights(mode: LoaderMode, original: &[f64], pruned_final: &[f64]) -> Vec<f64> {
    match mode {
        LoaderMode::Dynamic => pruned_final.to_vec(),
        LoaderMode::Static => original.to_vec(),
    }
}

/// Runs one prune (and optionally one continued-pretraining) per fraction of
/// `prune.steps`. `loader` supplies w0, the reference losses and the mode;
/// its eval interval is replaced by each stage's own.
#[allow(clippy::too_many_arguments)]
pub fn budget_sweep(
    source: &TransformerWeights,
    corpus: &DomainCorpus,
    prune: &PruneConfig,
    ct: &TrainConfig,
    fractions: &[f64],
    run_ct: bool,
    loader: &LoaderState,
    out: Option<&Path>,
) -> Result<SweepResult> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::Config(format!("sweep fractions must be positive: {fractions:?}")));
    }
    if !fractions.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config(format!("sweep fractions must be strictly increasing: {fractions:?}")));
    }
    let prune_per_step = prune.batch_size * prune.seq_len;
    let ct_per_step = ct.batch_size * ct.seq_len;
    let total_tokens = prune.steps * prune_per_step + if run_ct { ct.steps * ct_per_step } else { 0 };

    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let prune_steps = ((fraction * prune.steps as f64).round() as usize).max(1);
        let prune_tokens = prune_steps * prune_per_step;
        let ct_steps = if run_ct {
            let left = total_tokens.checked_sub(prune_tokens).unwrap_or(0) / ct_per_step;
            if left == 0 {
                return Err(Error::Config(format!(
                    "fraction {fraction} leaves no continued-pretraining budget"
                )));
            }
            left
        } else {
            0
        };
        let label = format!("budget-{fraction}");
        let dir = out.map(|o| o.join(&label));

        let cfg = PruneConfig {
            steps: prune_steps,
            ..prune.clone()
        };
        let mut prune_loader = LoaderState {
            eval_interval: prune.eval_interval,
            ..loader.clone()
        };
        let prune_paths = dir.as_ref().map(|d| RunPaths::new(d.join("prune")));
        let pruned = run_pruning(source.clone(), &cfg, corpus, &mut prune_loader, prune_paths.as_ref())?;
        let post_prune_mean = mean(&pruned.final_losses);

        let (post_ct_losses, post_ct_mean) = if run_ct {
            let mut ct_loader = LoaderState {
                weights: ct_initial_weights(loader.mode, &loader.weights, &pruned.final_domain_weights),
                eval_interval: ct.eval_interval,
                ..loader.clone()
            };
            let cfg = TrainConfig {
                steps: ct_steps,
                ..ct.clone()
            };
            let ct_paths = dir.as_ref().map(|d| RunPaths::new(d.join("ct")));
            let done = continue_pretrain(pruned.extracted, corpus, &mut ct_loader, &cfg, ct_paths.as_ref())?;
            let m = mean(&done.final_losses);
            (Some(done.final_losses), Some(m))
        } else {
            (None, None)
        };
        rows.push(SweepRow {
            fraction,
            prune_steps,
            ct_steps,
            prune_tokens,
            ct_tokens: ct_steps * ct_per_step,
            post_prune_losses: pruned.final_losses,
            post_prune_mean,
            post_ct_losses,
            post_ct_mean,
        });
    }
    let means: Vec<f64> = rows.iter().map(|r| r.post_prune_mean).collect();
    let result = SweepResult {
        domains: corpus.names(),
        total_tokens,
        monotone: monotone_decreasing(&means),
        rows,
    };
    if let Some(o) = out {
        let path = o.join(SWEEP_FILE);
        let s = serde_json::to_string_pretty(&result)?;
        std::fs::write(&path, s + "\n").map_err(Error::io(&path))?;
    }
    Ok(result)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
