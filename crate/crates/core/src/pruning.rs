//! Targeted structured pruning: joint descent on weights and mask locations,
//! ascent on Lagrange multipliers, then binarization and extraction.
//!
//! Each mask family `g` adds `λ_g (Σz - T_g) + φ_g (Σz - T_g)²` to the
//! language-model loss. Head and intermediate families contribute one term
//! per source layer with target `H_T` or `m_T`; layer and hidden families
//! contribute a single term.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataload::{sample_batch, DomainCorpus, LoaderState, UpdateEvent};
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, rel_err};
use crate::masks::{
    binarize, sample_mask, BinaryMaskSet, Granularity, HardConcreteConstants, HardConcreteMaskSet, MaskNoise,
    MaskValues, MaskVars,
};
use crate::metrics::{MetricsWriter, PruneMetrics, StepMetrics, METRICS_SCHEMA};
use crate::model::{self, checkpoint, extract_pruned, Batch, ModelConfig, ParamVars, TargetShape, TransformerWeights};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::trainer::{apply_adam, clip_global_norm, evaluate, tag_step, EvalSet, RunPaths, Schedule};

pub const MASKS_FILE: &str = "masks.json";
pub const LOADER_FILE: &str = "loader.json";

/// `λ` and `φ` for one mask family: one entry when shared across layers,
/// one per layer otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multiplier {
    pub lambda: Vec<f64>,
    pub phi: Vec<f64>,
}

impl Multiplier {
    fn zeros(n: usize) -> Self {
        Multiplier {
            lambda: vec![0.0; n],
            phi: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub layer: Multiplier,
    pub hidden: Multiplier,
    pub head: Multiplier,
    pub int: Multiplier,
}

impl LagrangeState {
    /// All multipliers at zero.
    pub fn new(n_layers: usize, per_layer: bool) -> Self {
        let per = if per_layer { n_layers } else { 1 };
        LagrangeState {
            layer: Multiplier::zeros(1),
            hidden: Multiplier::zeros(1),
            head: Multiplier::zeros(per),
            int: Multiplier::zeros(per),
        }
    }

    pub fn get(&self, g: Granularity) -> &Multiplier {
        match g {
            Granularity::Layer => &self.layer,
            Granularity::Hidden => &self.hidden,
            Granularity::Head => &self.head,
            Granularity::Intermediate => &self.int,
        }
    }

    /// `[λ, φ]` pairs in `Granularity::ALL` order.
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        [&mut self.layer, &mut self.hidden, &mut self.head, &mut self.int]
            .into_iter()
            .flat_map(|m| [m.lambda.as_mut_slice(), m.phi.as_mut_slice()])
            .collect()
    }

    pub fn buffer_lens(&self) -> Vec<usize> {
        Granularity::ALL
            .iter()
            .flat_map(|&g| [self.get(g).lambda.len(), self.get(g).phi.len()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        Granularity::ALL
            .iter()
            .all(|&g| self.get(g).lambda.iter().chain(&self.get(g).phi).all(|v| v.is_finite()))
    }

    pub fn record(&self, tape: &mut Tape) -> Result<LagrangeVars> {
        let mut vars = Vec::with_capacity(8);
        for g in Granularity::ALL {
            let m = self.get(g);
            for v in [&m.lambda, &m.phi] {
                vars.push(tape.param(&Tensor::new(vec![v.len()], v.clone())?)?);
            }
        }
        Ok(LagrangeVars { vars })
    }
}

/// Tape handles for the multipliers, `[λ, φ]` per granularity.
#[derive(Debug, Clone)]
pub struct LagrangeVars {
    vars: Vec<Var>,
}

impl LagrangeVars {
    pub fn lambda(&self, g: Granularity) -> Var {
        self.vars[2 * g as usize]
    }

    pub fn phi(&self, g: Granularity) -> Var {
        self.vars[2 * g as usize + 1]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub target: TargetShape,
    pub steps: usize,
    pub lr_theta: f64,
    pub lr_mask: f64,
    pub lr_multipliers: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_interval: usize,
    pub warmup_fraction: f64,
    pub min_lr_fraction: f64,
    pub per_layer_multipliers: bool,
    pub grad_clip: Option<f64>,
    pub eval_batch: usize,
    pub seed: u64,
    pub constants: HardConcreteConstants,
    pub adam: AdamConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            target: TargetShape::default(),
            steps: 400,
            lr_theta: 1e-4,
            lr_mask: 1.0,
            lr_multipliers: 1.0,
            batch_size: 8,
            seq_len: 64,
            eval_interval: 50,
            warmup_fraction: 0.1,
            min_lr_fraction: 0.1,
            per_layer_multipliers: false,
            grad_clip: Some(1.0),
            eval_batch: 32,
            seed: 0,
            constants: HardConcreteConstants::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl PruneConfig {
    /// Learning rates may be zero (that group is frozen) but not negative.
    pub fn validate(&self, source: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be > 0".into());
        }
        for (name, lr) in [
            ("lr_theta", self.lr_theta),
            ("lr_mask", self.lr_mask),
            ("lr_multipliers", self.lr_multipliers),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {lr}"));
            }
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_batch == 0 || self.eval_interval == 0 {
            return bad("batch_size, seq_len, eval_batch and eval_interval must be > 0".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be > 0".into());
        }
        self.constants.validate()?;
        self.target.validate(source)?;
        self.theta_schedule().validate()
    }

    pub fn theta_schedule(&self) -> Schedule {
        Schedule {
            total: self.steps,
            peak: self.lr_theta,
            warmup_fraction: self.warmup_fraction,
            min_fraction: self.min_lr_fraction,
        }
    }

    /// Target count per family: layer and hidden totals, per-layer head and
    /// intermediate counts.
    pub fn target_count(&self, g: Granularity) -> f64 {
        (match g {
            Granularity::Layer => self.target.n_layers,
            Granularity::Hidden => self.target.hidden_dim,
            Granularity::Head => self.target.n_heads,
            Granularity::Intermediate => self.target.intermediate_dim,
        }) as f64
    }
}

/// `λ r + φ r²` with `r = mask_sum - target`.
pub fn constraint_loss(tape: &mut Tape, mask_sum: Var, target: f64, lambda: Var, phi: Var) -> Result<Var> {
    let r = tape.add_const(mask_sum, -target)?;
    let r2 = tape.mul(r, r)?;
    let lin = tape.mul(lambda, r)?;
    let quad = tape.mul(phi, r2)?;
    Ok(tape.add(lin, quad)?)
}

/// Scalar form of [`constraint_loss`].
pub fn constraint_value(mask_sum: f64, target: f64, lambda: f64, phi: f64) -> f64 {
    let r = mask_sum - target;
    lambda * r + phi * r * r
}

/// Handles and sampled sums produced by [`prune_objective`].
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub lm_loss: Var,
    /// Sampled Σz per family, one per layer for head and intermediate.
    pub sums: [Vec<f64>; 4],
}

/// LM loss with sampled masks plus every constraint term.
pub fn prune_objective(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamVars,
    masks: &MaskVars,
    lagrange: &LagrangeVars,
    multipliers: &LagrangeState,
    prune: &PruneConfig,
    batch: &Batch,
) -> Result<Objective> {
    let lm = model::lm_loss(tape, config, params, Some(masks), batch)?;
    let mut total = lm;
    let mut sums: [Vec<f64>; 4] = Default::default();
    for g in Granularity::ALL {
        let z = masks.get(g);
        let lam = lagrange.lambda(g);
        let phi = lagrange.phi(g);
        let target = prune.target_count(g);
        if g.per_layer() {
            let shared = multipliers.get(g).lambda.len() == 1;
            for l in 0..config.n_layers {
                let row = tape.select_row(z, l)?;
                let s = tape.sum(row)?;
                sums[g as usize].push(tape.scalar(s));
                let (lam_l, phi_l) = if shared {
                    (lam, phi)
                } else {
                    (tape.select_row(lam, l)?, tape.select_row(phi, l)?)
                };
                let term = constraint_loss(tape, s, target, lam_l, phi_l)?;
                total = tape.add(total, term)?;
            }
        } else {
            let s = tape.sum(z)?;
            sums[g as usize].push(tape.scalar(s));
            let term = constraint_loss(tape, s, target, lam, phi)?;
            total = tape.add(total, term)?;
        }
    }
    Ok(Objective { total, lm_loss: lm, sums })
}

/// Mutable state of one pruning run.
#[derive(Debug, Clone)]
pub struct PruneState {
    pub weights: TransformerWeights,
    pub masks: HardConcreteMaskSet,
    pub lagrange: LagrangeState,
    pub step: usize,
    adam_theta: AdamState,
    adam_mask: AdamState,
    adam_mult: AdamState,
}

impl PruneState {
    pub fn new(weights: TransformerWeights, config: &PruneConfig) -> Result<Self> {
        config.validate(&weights.config)?;
        let masks = HardConcreteMaskSet::new(&weights.config, config.constants);
        let lagrange = LagrangeState::new(weights.config.n_layers, config.per_layer_multipliers);
        Ok(PruneState {
            adam_theta: AdamState::new(&weights.tensor_lens(), config.adam),
            adam_mask: AdamState::new(&masks.buffer_lens(), config.adam),
            adam_mult: AdamState::new(&lagrange.buffer_lens(), config.adam),
            weights,
            masks,
            lagrange,
            step: 0,
        })
    }
}

/// Per-step quantities of a pruning update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lm_loss: f64,
    pub objective: f64,
    pub lr_theta: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    /// Sampled Σz per family, head and intermediate summed over layers.
    pub mask_sums: [f64; 4],
    pub targets: [f64; 4],
}

impl StepReport {
    pub fn residuals(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.mask_sums[i] - self.targets[i])
    }
}

/// Objective value and gradients for fixed noise, in optimizer layout:
/// weights in `TransformerWeights::tensors_mut` order, mask locations in
/// `HardConcreteMaskSet::buffers_mut` order, multipliers in
/// `LagrangeState::buffers_mut` order.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub objective: f64,
    pub lm_loss: f64,
    pub sums: [Vec<f64>; 4],
    pub theta: Vec<Vec<f64>>,
    pub mask: Vec<Vec<f64>>,
    pub multipliers: Vec<Vec<f64>>,
}

pub fn objective_and_grads(
    weights: &TransformerWeights,
    masks: &HardConcreteMaskSet,
    lagrange: &LagrangeState,
    config: &PruneConfig,
    batch: &Batch,
    noise: &MaskNoise,
    step: usize,
) -> Result<ObjectiveGrads> {
    let mut tape = Tape::new();
    let params = weights.record(&mut tape, true)?;
    let mask_vars = masks.record(&mut tape)?;
    let lagrange_vars = lagrange.record(&mut tape)?;
    let z = sample_mask(&mut tape, &mask_vars, noise, &masks.constants)?;
    let obj = prune_objective(
        &mut tape,
        &weights.config,
        &params,
        &z,
        &lagrange_vars,
        lagrange,
        config,
        batch,
    )
    .map_err(|e| match e {
        Error::Model(m) => tag_step(step, "pruning objective")(m),
        e => e,
    })?;
    let grads = tape.backward(obj.total)?;
    let theta = params
        .all()
        .iter()
        .zip(weights.tensor_lens())
        .map(|(&v, n)| grads.get_or_zeros(v, n))
        .collect();
    let mut mask = Vec::new();
    for g in Granularity::ALL {
        let shape = masks.shape(g);
        let flat = grads.get_or_zeros(mask_vars.get(g), shape.iter().product());
        if g.per_layer() {
            mask.extend(flat.chunks(shape[1].max(1)).map(<[f64]>::to_vec));
        } else {
            mask.push(flat);
        }
    }
    let multipliers = lagrange_vars
        .all()
        .iter()
        .zip(lagrange.buffer_lens())
        .map(|(&v, n)| grads.get_or_zeros(v, n))
        .collect();
    Ok(ObjectiveGrads {
        objective: tape.scalar(obj.total),
        lm_loss: tape.scalar(obj.lm_loss),
        sums: obj.sums,
        theta,
        mask,
        multipliers,
    })
}

/// Initial weights with projection matrices scaled to std ~0.2, a regime
/// where every gradient is well above finite-difference round-off.
pub fn gradcheck_weights<R: rand::Rng>(config: &ModelConfig, rng: &mut R) -> TransformerWeights {
    let mut w = TransformerWeights::init(config, rng).expect("valid config");
    let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
    for (t, n) in w.tensors_mut().into_iter().zip(names) {
        if !n.ends_with("norm") {
            t.data_mut().iter_mut().for_each(|x| *x *= 10.0);
        }
    }
    w
}

/// Norm-wise relative error between the tape gradient of the full objective
/// and central differences with step `h`, per parameter buffer
/// (weights, mask locations, multipliers). Noise is held fixed.
pub fn objective_gradient_errors(
    weights: &TransformerWeights,
    masks: &HardConcreteMaskSet,
    lagrange: &LagrangeState,
    config: &PruneConfig,
    batch: &Batch,
    noise: &MaskNoise,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let og = objective_and_grads(weights, masks, lagrange, config, batch, noise, 0)?;
    let value = |w: &TransformerWeights, m: &HardConcreteMaskSet, l: &LagrangeState| {
        objective_and_grads(w, m, l, config, batch, noise, 0)
            .map(|o| o.objective)
            .unwrap_or(f64::NAN)
    };
    let mut out = Vec::new();
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        let x = weights.named()[k].1.data().to_vec();
        let num = central_difference(
            |p| {
                let mut w = weights.clone();
                w.tensors_mut()[k].data_mut().copy_from_slice(p);
                value(&w, masks, lagrange)
            },
            &x,
            h,
        );
        out.push((name.clone(), rel_err(&og.theta[k], &num)));
    }
    let mut probe = masks.clone();
    for k in 0..og.mask.len() {
        let x = probe.buffers_mut()[k].to_vec();
        let num = central_difference(
            |p| {
                let mut m = masks.clone();
                m.buffers_mut()[k].copy_from_slice(p);
                value(weights, &m, lagrange)
            },
            &x,
            h,
        );
        out.push((format!("log_alpha[{k}]"), rel_err(&og.mask[k], &num)));
    }
    let mut probe = lagrange.clone();
    for k in 0..og.multipliers.len() {
        let x = probe.buffers_mut()[k].to_vec();
        let num = central_difference(
            |p| {
                let mut l = lagrange.clone();
                l.buffers_mut()[k].copy_from_slice(p);
                value(weights, masks, &l)
            },
            &x,
            h,
        );
        let kind = if k % 2 == 0 { "lambda" } else { "phi" };
        out.push((format!("{kind}.{}", Granularity::ALL[k / 2].name()), rel_err(&og.multipliers[k], &num)));
    }
    Ok(out)
}

/// One sampled-mask forward/backward, descent on weights and mask
/// locations, ascent on the multipliers.
pub fn pruning_step<R: rand::Rng>(
    state: &mut PruneState,
    config: &PruneConfig,
    batch: &Batch,
    rng: &mut R,
) -> Result<StepReport> {
    let step = state.step + 1;
    let noise = MaskNoise::draw(&state.masks, rng);
    let mut og = objective_and_grads(&state.weights, &state.masks, &state.lagrange, config, batch, &noise, step)?;
    let (objective, lm_loss) = (og.objective, og.lm_loss);
    let (grad_norm, clipped) = clip_global_norm(&mut og.theta, config.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            what: "weight gradient",
            step,
            detail: format!("lm loss {lm_loss}, objective {objective}"),
        });
    }
    let lr_theta = config.theta_schedule().lr(step)?;
    if lr_theta > 0.0 {
        apply_adam(&mut state.adam_theta, &mut state.weights, &og.theta, lr_theta)?;
    }
    if config.lr_mask > 0.0 {
        let refs: Vec<&[f64]> = og.mask.iter().map(Vec::as_slice).collect();
        state.adam_mask.step(&mut state.masks.buffers_mut(), &refs, config.lr_mask)?;
    }
    if config.lr_multipliers > 0.0 {
        let refs: Vec<&[f64]> = og.multipliers.iter().map(Vec::as_slice).collect();
        state
            .adam_mult
            .ascent_step(&mut state.lagrange.buffers_mut(), &refs, config.lr_multipliers)?;
    }

    if !state.weights.is_finite() || state.masks.validate(&state.weights.config).is_err() || !state.lagrange.is_finite() {
        return Err(Error::NonFinite {
            what: "pruning state",
            step,
            detail: format!("lm loss {lm_loss}, objective {objective}"),
        });
    }
    state.step = step;
    let l = state.weights.config.n_layers as f64;
    let mask_sums: [f64; 4] = std::array::from_fn(|i| og.sums[i].iter().sum());
    let targets: [f64; 4] = std::array::from_fn(|i| {
        let g = Granularity::ALL[i];
        config.target_count(g) * if g.per_layer() { l } else { 1.0 }
    });
    Ok(StepReport {
        step,
        lm_loss,
        objective,
        lr_theta,
        grad_norm,
        clipped,
        mask_sums,
        targets,
    })
}

/// Contents of `masks.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasksFile {
    pub mask_set: HardConcreteMaskSet,
    pub binary: BinaryMaskSet,
    pub lagrange: LagrangeState,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    /// Full-width weights at the end of pruning.
    pub weights: TransformerWeights,
    pub extracted: TransformerWeights,
    pub masks: HardConcreteMaskSet,
    pub binary: BinaryMaskSet,
    pub scores: MaskValues,
    pub lagrange: LagrangeState,
    pub reports: Vec<StepReport>,
    pub metrics: Vec<StepMetrics>,
    pub events: Vec<UpdateEvent>,
    pub final_domain_weights: Vec<f64>,
    /// Validation losses of the extracted model.
    pub final_losses: Vec<f64>,
    pub domain_sequences: Vec<usize>,
}

impl PruneOutcome {
    /// Mean sampled Σz over the last `n` steps, per family.
    pub fn tail_mean_sums(&self, n: usize) -> [f64; 4] {
        let tail = &self.reports[self.reports.len().saturating_sub(n)..];
        std::array::from_fn(|i| tail.iter().map(|r| r.mask_sums[i]).sum::<f64>() / tail.len().max(1) as f64)
    }
}

/// Full pruning stage: optimizes, binarizes to the target shape, extracts
/// the dense model and (with `out`) writes the checkpoint, `masks.json`,
/// `loader.json` and the metrics log.
pub fn run_pruning(
    source: TransformerWeights,
    config: &PruneConfig,
    corpus: &DomainCorpus,
    loader: &mut LoaderState,
    out: Option<&RunPaths>,
) -> Result<PruneOutcome> {
    source.validate()?;
    if loader.weights.len() != corpus.len() {
        return Err(Error::Config(format!(
            "loader has {} domain weights for {} domains",
            loader.weights.len(),
            corpus.len()
        )));
    }
    let mut state = PruneState::new(source, config)?;
    let eval = EvalSet::new(corpus, config.seq_len, config.eval_batch)?;
    let base = ChaCha8Rng::seed_from_u64(config.seed);
    let stream = |s: u64| {
        let mut r = base.clone();
        r.set_stream(s);
        r
    };
    let (mut data_rng, mut noise_rng, mut eval_rng) = (stream(0), stream(1), stream(2));
    let mut writer = match out {
        Some(p) => {
            std::fs::create_dir_all(&p.dir).map_err(Error::io(&p.dir))?;
            Some(MetricsWriter::open(&p.metrics())?)
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(config.steps);
    let mut metrics = Vec::with_capacity(config.steps);
    let mut events = Vec::new();
    let mut cumulative = vec![0usize; corpus.len()];

    for _ in 0..config.steps {
        let used_weights = loader.weights.clone();
        let (batch, tally) = sample_batch(corpus, &used_weights, config.batch_size, config.seq_len, &mut data_rng)?;
        let report = pruning_step(&mut state, config, &batch, &mut noise_rng)?;
        for (c, t) in cumulative.iter_mut().zip(&tally) {
            *c += t;
        }
        let event = loader.maybe_update(report.step, || {
            let sampled = state.masks.sample_values(&mut eval_rng);
            evaluate(&state.weights, Some(&sampled), &eval)
        })?;
        let rec = StepMetrics {
            schema: METRICS_SCHEMA,
            stage: "prune".into(),
            step: report.step,
            lm_loss: report.lm_loss,
            lr: report.lr_theta,
            grad_norm: report.grad_norm,
            clipped: report.clipped,
            domain_weights: used_weights,
            domain_sequences: tally,
            tokens: batch.inputs.len(),
            val_losses: event.as_ref().map(|e| e.losses.clone()),
            delta: event.as_ref().map(|e| e.delta.clone()),
            pruning: Some(PruneMetrics {
                objective: report.objective,
                lr_mask: config.lr_mask,
                mask_sums: report.mask_sums,
                targets: report.targets,
                residuals: report.residuals(),
                lambda: Granularity::ALL.map(|g| state.lagrange.get(g).lambda.clone()),
                phi: Granularity::ALL.map(|g| state.lagrange.get(g).phi.clone()),
            }),
        };
        if let Some(w) = writer.as_mut() {
            w.write(&rec)?;
        }
        metrics.push(rec);
        events.extend(event);
        reports.push(report);
    }

    let scores = state.masks.deterministic_scores();
    let binary = binarize(&state.masks, &config.target)?;
    let extracted = extract_pruned(&state.weights, &binary, &scores, &config.target)?;
    let final_losses = evaluate(&extracted, None, &eval)?;
    if let Some(p) = out {
        checkpoint::save(&p.checkpoint(), &extracted, Some(config.target))?;
        write_json(
            &p.dir.join(MASKS_FILE),
            &MasksFile {
                mask_set: state.masks.clone(),
                binary: binary.clone(),
                lagrange: state.lagrange.clone(),
            },
        )?;
        write_json(&p.dir.join(LOADER_FILE), loader)?;
    }
    Ok(PruneOutcome {
        weights: state.weights,
        extracted,
        masks: state.masks,
        binary,
        scores,
        lagrange: state.lagrange,
        reports,
        metrics,
        events,
        final_domain_weights: loader.weights.clone(),
        final_losses,
        domain_sequences: cumulative,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").map_err(Error::io(path))
}
