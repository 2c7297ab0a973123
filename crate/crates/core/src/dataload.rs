//! Multi-domain byte corpora and dynamic batch loading.
//!
//! Every `m` steps the per-domain validation losses are compared with the
//! reference losses; the clamped excess `Δ = max(ℓ - ℓ_ref, 0)` drives an
//! exponential-ascent update of the domain sampling weights,
//! `w' ∝ w · exp(Δ)`.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, PAD_ID};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus has no domains")]
    NoDomains,
    #[error("duplicate domain name {0}")]
    DuplicateDomain(String),
    #[error("domain {name} has {len} training tokens, need at least {need}")]
    EmptyDomain { name: String, len: usize, need: usize },
    #[error("domain {0} has an empty validation block")]
    EmptyValidation(String),
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("weights are not on the probability simplex: {0:?}")]
    NotSimplex(Vec<f64>),
    #[error("eval interval must be >= 1")]
    EvalInterval,
    #[error("reference file: {0}")]
    Reference(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Name of the held-out file inside a domain directory.
pub const VALIDATION_FILE: &str = "validation.txt";

/// Original RedPajama sampling proportions, in the order
/// CC, GitHub, Book, StackExchange, Wiki, ArXiv, C4.
pub const REDPAJAMA_DOMAINS: [&str; 7] = ["cc", "github", "book", "stackexchange", "wiki", "arxiv", "c4"];
pub const REDPAJAMA_WEIGHTS: [f64; 7] = [0.670, 0.045, 0.045, 0.020, 0.045, 0.025, 0.150];

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub train: Vec<u8>,
    pub validation: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    domains: Vec<Domain>,
}

impl DomainCorpus {
    pub fn new(domains: Vec<Domain>) -> Result<Self> {
        if domains.is_empty() {
            return Err(DataError::NoDomains);
        }
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].iter().any(|o| o.name == d.name) {
                return Err(DataError::DuplicateDomain(d.name.clone()));
            }
            if d.validation.len() < 2 {
                return Err(DataError::EmptyValidation(d.name.clone()));
            }
        }
        Ok(DomainCorpus { domains })
    }

    /// Loads `<root>/<domain>/*.txt`, domains in lexicographic order.
    ///
    /// A `validation.txt` file is the held-out block; other `.txt` files are
    /// concatenated (sorted by name) into the training stream. Without a
    /// `validation.txt` the last `val_tokens` bytes of the stream are held out.
    /// `val_tokens` also caps the size of an explicit validation file.
    pub fn load(root: &Path, val_tokens: usize) -> Result<Self> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| DataError::Io { path, source }
        };
        let mut dirs: Vec<_> = fs::read_dir(root)
            .map_err(io(root))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .collect();
        dirs.sort_by_key(|e| e.file_name());
        let mut domains = Vec::new();
        for dir in dirs {
            let name = dir.file_name().to_string_lossy().into_owned();
            let mut files: Vec<_> = fs::read_dir(dir.path())
                .map_err(io(&dir.path()))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            files.sort();
            let mut train = Vec::new();
            let mut validation = None;
            for f in files {
                let bytes = fs::read(&f).map_err(io(&f))?;
                if f.file_name().is_some_and(|n| n == VALIDATION_FILE) {
                    validation = Some(bytes);
                } else {
                    train.extend(bytes);
                }
            }
            let validation = match validation {
                Some(mut v) => {
                    v.truncate(val_tokens);
                    v
                }
                None => {
                    let cut = train.len().saturating_sub(val_tokens);
                    train.split_off(cut)
                }
            };
            domains.push(Domain {
                name,
                train,
                validation,
            });
        }
        DomainCorpus::new(domains)
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    /// Fixed evaluation batches covering domain `i`'s validation block.
    ///
    /// Windows of `seq_len + 1` tokens overlap by one so every token after
    /// the first is scored once; the final window is right-padded.
    pub fn validation_batches(&self, i: usize, seq_len: usize, max_sequences: usize) -> Result<Vec<Batch>> {
        let val = &self.domains[i].validation;
        if val.len() < 2 {
            return Err(DataError::EmptyValidation(self.domains[i].name.clone()));
        }
        let mut windows = Vec::new();
        let mut start = 0;
        while start + 1 < val.len() {
            let end = (start + seq_len + 1).min(val.len());
            let mut w: Vec<usize> = val[start..end].iter().map(|&b| b as usize).collect();
            w.resize(seq_len + 1, PAD_ID);
            windows.push(w);
            start += seq_len;
        }
        Ok(windows
            .chunks(max_sequences.max(1))
            .map(|c| Batch::from_windows(c, seq_len).expect("window length"))
            .collect())
    }
}

/// Per-sequence domain draw from `categorical(w)` followed by a uniformly
/// placed contiguous window. Returns the batch and the per-domain sequence tally.
pub fn sample_batch<R: Rng>(
    corpus: &DomainCorpus,
    w: &[f64],
    batch_size: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<(Batch, Vec<usize>)> {
    check_simplex(w, corpus.len())?;
    let dist = WeightedIndex::new(w).map_err(|_| DataError::NotSimplex(w.to_vec()))?;
    let mut tally = vec![0usize; corpus.len()];
    let mut windows = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = dist.sample(rng);
        let d = &corpus.domains[i];
        if d.train.len() < seq_len + 1 {
            return Err(DataError::EmptyDomain {
                name: d.name.clone(),
                len: d.train.len(),
                need: seq_len + 1,
            });
        }
        let start = rng.gen_range(0..=d.train.len() - (seq_len + 1));
        windows.push(d.train[start..start + seq_len + 1].iter().map(|&b| b as usize).collect());
        tally[i] += 1;
    }
    let batch = Batch::from_windows(&windows, seq_len).expect("window length");
    Ok((batch, tally))
}

fn check_simplex(w: &[f64], k: usize) -> Result<()> {
    if w.len() != k {
        return Err(DataError::LengthMismatch {
            what: "domain weights",
            got: w.len(),
            expected: k,
        });
    }
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::NotSimplex(w.to_vec()));
    }
    Ok(())
}

/// `Δ[i] = max(ℓ[i] - ℓ_ref[i], 0)`.
pub fn compute_delta(losses: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if losses.len() != reference.len() {
        return Err(DataError::LengthMismatch {
            what: "losses",
            got: losses.len(),
            expected: reference.len(),
        });
    }
    Ok(losses.iter().zip(reference).map(|(l, r)| (l - r).max(0.0)).collect())
}

/// Exponential ascent: `α = w · exp(Δ)`, `w' = α / Σα`.
pub fn update_weights(w: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    check_simplex(w, w.len())?;
    if delta.len() != w.len() {
        return Err(DataError::LengthMismatch {
            what: "delta",
            got: delta.len(),
            expected: w.len(),
        });
    }
    // Shifting Δ by its maximum leaves the normalized result unchanged and
    // keeps exp() in range.
    let shift = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let alpha: Vec<f64> = w.iter().zip(delta).map(|(w, d)| w * (d - shift).exp()).collect();
    let total: f64 = alpha.iter().sum();
    if !(total > 0.0) {
        return Err(DataError::NotSimplex(w.to_vec()));
    }
    Ok(alpha.iter().map(|a| a / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoaderMode {
    Dynamic,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    Scaling,
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaderState {
    pub weights: Vec<f64>,
    pub reference: Vec<f64>,
    pub eval_interval: usize,
    pub mode: LoaderMode,
    pub reference_mode: ReferenceMode,
}

/// One evaluation trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub step: usize,
    pub losses: Vec<f64>,
    pub delta: Vec<f64>,
    pub weights_before: Vec<f64>,
    pub weights_after: Vec<f64>,
}

impl LoaderState {
    pub fn new(
        weights: Vec<f64>,
        reference: Vec<f64>,
        eval_interval: usize,
        mode: LoaderMode,
        reference_mode: ReferenceMode,
    ) -> Result<Self> {
        check_simplex(&weights, weights.len())?;
        if reference.len() != weights.len() {
            return Err(DataError::LengthMismatch {
                what: "reference losses",
                got: reference.len(),
                expected: weights.len(),
            });
        }
        if eval_interval == 0 {
            return Err(DataError::EvalInterval);
        }
        Ok(LoaderState {
            weights,
            reference,
            eval_interval,
            mode,
            reference_mode,
        })
    }

    pub fn uniform(k: usize) -> Vec<f64> {
        vec![1.0 / k as f64; k]
    }

    pub fn is_trigger(&self, step: usize) -> bool {
        step > 0 && step % self.eval_interval == 0
    }

    /// At trigger steps (1-based `step` divisible by the interval) evaluates
    /// the per-domain losses and, in dynamic mode, replaces the weights.
    /// Static mode still evaluates so both modes log the same quantities.
    pub fn maybe_update<E>(
        &mut self,
        step: usize,
        evaluate: impl FnOnce() -> std::result::Result<Vec<f64>, E>,
    ) -> std::result::Result<Option<UpdateEvent>, E>
    where
        E: From<DataError>,
    {
        if !self.is_trigger(step) {
            return Ok(None);
        }
        let losses = evaluate()?;
        let delta = compute_delta(&losses, &self.reference)?;
        let before = self.weights.clone();
        if self.mode == LoaderMode::Dynamic {
            self.weights = update_weights(&self.weights, &delta)?;
        }
        Ok(Some(UpdateEvent {
            step,
            losses,
            delta,
            weights_before: before,
            weights_after: self.weights.clone(),
        }))
    }
}

/// Reads a `{domain: loss}` JSON file into corpus order.
pub fn load_reference(path: &Path, names: &[String]) -> Result<Vec<f64>> {
    let s = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let map: std::collections::BTreeMap<String, f64> =
        serde_json::from_str(&s).map_err(|e| DataError::Reference(e.to_string()))?;
    names
        .iter()
        .map(|n| {
            map.get(n)
                .copied()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Reference(format!("no finite loss for domain {n}")))
        })
        .collect()
}

pub fn reference_json(names: &[String], losses: &[f64]) -> String {
    let map: std::collections::BTreeMap<&str, f64> =
        names.iter().map(String::as_str).zip(losses.iter().copied()).collect();
    serde_json::to_string_pretty(&map).expect("map of floats serializes")
}

/// Synthetic per-domain loss simulator for checking loss-gap balancing without
/// training a model: domain `i` sits at `ℓ_ref[i] + gap[i] · exp(-rate[i] · n_i)`
/// after `n_i` sequences drawn from it.
#[derive(Debug, Clone)]
pub struct LossDecaySimulator {
    pub reference: Vec<f64>,
    pub initial_gap: Vec<f64>,
    pub rate: Vec<f64>,
}

impl LossDecaySimulator {
    pub fn losses(&self, consumed: &[f64]) -> Vec<f64> {
        (0..self.reference.len())
            .map(|i| self.reference[i] + self.initial_gap[i] * (-self.rate[i] * consumed[i]).exp())
            .collect()
    }

    /// Runs `steps` steps of `batch` sequences with expected-value sampling,
    /// returning the final Δ vector.
    pub fn run(&self, state: &mut LoaderState, steps: usize, batch: f64) -> Result<Vec<f64>> {
        let k = self.reference.len();
        let mut consumed = vec![0.0; k];
        for step in 1..=steps {
            let losses = self.losses(&consumed);
            state.maybe_update::<DataError>(step, || Ok(losses))?;
            for i in 0..k {
                consumed[i] += batch * state.weights[i];
            }
        }
        compute_delta(&self.losses(&consumed), &state.reference)
    }
}
