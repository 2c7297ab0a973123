//! Hard-concrete pruning masks over layers, hidden dimensions, attention
//! heads and feed-forward intermediate dimensions.
//!
//! A gate with location parameter `log_alpha` is sampled as
//!
//! ```text
//! u ~ U(0, 1)
//! s = sigmoid((ln(u / (1 - u)) + log_alpha) / beta)
//! z = clamp01(s * (zeta - gamma) + gamma)
//! ```
//!
//! which puts finite probability mass on exactly 0 and exactly 1. The
//! noise-free score (`u = 1/2`) ranks units when the masks are binarized.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, TargetShape, TransformerWeights};
use crate::tensor::{self, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid hard-concrete constants: beta={beta}, zeta={zeta}, gamma={gamma}")]
    Constants { beta: f64, zeta: f64, gamma: f64 },
    #[error("{granularity}: target {target} exceeds source {source_count}")]
    TargetTooLarge {
        granularity: Granularity,
        target: usize,
        source_count: usize,
    },
    #[error("mask set does not match model: {0}")]
    ShapeMismatch(String),
    #[error("non-finite log_alpha in {0}")]
    NonFinite(Granularity),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// The four mask families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Layer,
    Hidden,
    Head,
    Intermediate,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Layer,
        Granularity::Hidden,
        Granularity::Head,
        Granularity::Intermediate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Layer => "layer",
            Granularity::Hidden => "hidden",
            Granularity::Head => "head",
            Granularity::Intermediate => "int",
        }
    }

    /// Whether the family has one mask vector per transformer layer.
    pub fn per_layer(self) -> bool {
        matches!(self, Granularity::Head | Granularity::Intermediate)
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcreteConstants {
    pub beta: f64,
    pub zeta: f64,
    pub gamma: f64,
}

impl Default for HardConcreteConstants {
    fn default() -> Self {
        HardConcreteConstants {
            beta: 0.83,
            zeta: 1.1,
            gamma: -0.1,
        }
    }
}

impl HardConcreteConstants {
    pub fn validate(&self) -> Result<()> {
        let HardConcreteConstants { beta, zeta, gamma } = *self;
        if !(beta > 0.0 && gamma < 0.0 && zeta > 1.0) || !(beta.is_finite() && zeta.is_finite() && gamma.is_finite()) {
            return Err(MaskError::Constants { beta, zeta, gamma });
        }
        Ok(())
    }

    /// Gate value for uniform noise `u` in (0, 1).
    pub fn gate(&self, u: f64, log_alpha: f64) -> f64 {
        let s = tensor::sigmoid(((u / (1.0 - u)).ln() + log_alpha) / self.beta);
        tensor::clamp01(s * (self.zeta - self.gamma) + self.gamma)
    }

    /// Noise-free score: the gate at `u = 1/2`.
    pub fn score(&self, log_alpha: f64) -> f64 {
        let s = tensor::sigmoid(log_alpha / self.beta);
        tensor::clamp01(s * (self.zeta - self.gamma) + self.gamma)
    }

    /// `P(z <= x)` for `0 <= x < 1`, from inverting the monotone sampling map.
    pub fn cdf(&self, x: f64, log_alpha: f64) -> f64 {
        if x >= 1.0 {
            return 1.0;
        }
        let s = (x.max(0.0) - self.gamma) / (self.zeta - self.gamma);
        let logit_s = (s / (1.0 - s)).ln();
        tensor::sigmoid(self.beta * logit_s - log_alpha)
    }
}

/// Learnable mask locations for one source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteMaskSet {
    pub constants: HardConcreteConstants,
    pub log_alpha_layer: Vec<f64>,
    pub log_alpha_hidden: Vec<f64>,
    pub log_alpha_head: Vec<Vec<f64>>,
    pub log_alpha_int: Vec<Vec<f64>>,
}

impl HardConcreteMaskSet {
    /// All locations at zero: every gate starts at score 1/2.
    pub fn new(config: &ModelConfig, constants: HardConcreteConstants) -> Self {
        HardConcreteMaskSet {
            constants,
            log_alpha_layer: vec![0.0; config.n_layers],
            log_alpha_hidden: vec![0.0; config.hidden_dim],
            log_alpha_head: vec![vec![0.0; config.n_heads]; config.n_layers],
            log_alpha_int: vec![vec![0.0; config.intermediate_dim]; config.n_layers],
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.constants.validate()?;
        let rows_ok = |m: &Vec<Vec<f64>>, cols: usize| {
            m.len() == config.n_layers && m.iter().all(|r| r.len() == cols)
        };
        if self.log_alpha_layer.len() != config.n_layers
            || self.log_alpha_hidden.len() != config.hidden_dim
            || !rows_ok(&self.log_alpha_head, config.n_heads)
            || !rows_ok(&self.log_alpha_int, config.intermediate_dim)
        {
            return Err(MaskError::ShapeMismatch(format!(
                "layer {}, hidden {}, head {}x?, int {}x? for config {:?}",
                self.log_alpha_layer.len(),
                self.log_alpha_hidden.len(),
                self.log_alpha_head.len(),
                self.log_alpha_int.len(),
                config
            )));
        }
        for g in Granularity::ALL {
            if self.flat(g).iter().any(|v| !v.is_finite()) {
                return Err(MaskError::NonFinite(g));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.log_alpha_layer.len()
    }

    /// Row-major copy of one family's locations.
    pub fn flat(&self, g: Granularity) -> Vec<f64> {
        match g {
            Granularity::Layer => self.log_alpha_layer.clone(),
            Granularity::Hidden => self.log_alpha_hidden.clone(),
            Granularity::Head => self.log_alpha_head.concat(),
            Granularity::Intermediate => self.log_alpha_int.concat(),
        }
    }

    pub fn shape(&self, g: Granularity) -> Vec<usize> {
        match g {
            Granularity::Layer => vec![self.log_alpha_layer.len()],
            Granularity::Hidden => vec![self.log_alpha_hidden.len()],
            Granularity::Head => vec![self.n_layers(), self.log_alpha_head.first().map_or(0, Vec::len)],
            Granularity::Intermediate => {
                vec![self.n_layers(), self.log_alpha_int.first().map_or(0, Vec::len)]
            }
        }
    }

    /// Mutable views in `Granularity::ALL` order, for the optimizer.
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.log_alpha_layer, &mut self.log_alpha_hidden];
        // Per-layer families are stored as rows; the optimizer sees each row separately.
        out.extend(self.log_alpha_head.iter_mut().map(|r| r.as_mut_slice()));
        out.extend(self.log_alpha_int.iter_mut().map(|r| r.as_mut_slice()));
        out
    }

    pub fn buffer_lens(&self) -> Vec<usize> {
        let mut out = vec![self.log_alpha_layer.len(), self.log_alpha_hidden.len()];
        out.extend(self.log_alpha_head.iter().map(Vec::len));
        out.extend(self.log_alpha_int.iter().map(Vec::len));
        out
    }

    /// Records the locations as trainable leaves.
    pub fn record(&self, tape: &mut Tape) -> Result<MaskParamVars> {
        let mut leaf = |g| -> Result<Var> {
            let t = tensor::Tensor::new(self.shape(g), self.flat(g))?;
            Ok(tape.param(&t)?)
        };
        Ok(MaskParamVars {
            layer: leaf(Granularity::Layer)?,
            hidden: leaf(Granularity::Hidden)?,
            head: leaf(Granularity::Head)?,
            int: leaf(Granularity::Intermediate)?,
        })
    }

    /// Noise-free scores for every unit.
    pub fn deterministic_scores(&self) -> MaskValues {
        let c = self.constants;
        let v = |xs: &[f64]| xs.iter().map(|&a| c.score(a)).collect::<Vec<_>>();
        MaskValues {
            layer: v(&self.log_alpha_layer),
            hidden: v(&self.log_alpha_hidden),
            head: self.log_alpha_head.iter().map(|r| v(r)).collect(),
            int: self.log_alpha_int.iter().map(|r| v(r)).collect(),
            hidden_active: None,
        }
    }

    /// Draws one set of gate values without recording a tape.
    pub fn sample_values<R: Rng>(&self, rng: &mut R) -> MaskValues {
        let noise = MaskNoise::draw(self, rng);
        let c = self.constants;
        let gate = |u: &[f64], a: &[f64]| u.iter().zip(a).map(|(&u, &a)| c.gate(u, a)).collect::<Vec<_>>();
        let rows = |u: &[f64], a: &[Vec<f64>]| {
            let cols = a.first().map_or(0, Vec::len);
            a.iter()
                .enumerate()
                .map(|(l, r)| gate(&u[l * cols..(l + 1) * cols], r))
                .collect::<Vec<_>>()
        };
        MaskValues {
            layer: gate(&noise.layer, &self.log_alpha_layer),
            hidden: gate(&noise.hidden, &self.log_alpha_hidden),
            head: rows(&noise.head, &self.log_alpha_head),
            int: rows(&noise.int, &self.log_alpha_int),
            hidden_active: None,
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Tape handles for the mask locations.
#[derive(Debug, Clone, Copy)]
pub struct MaskParamVars {
    pub layer: Var,
    pub hidden: Var,
    pub head: Var,
    pub int: Var,
}

impl MaskParamVars {
    pub fn get(&self, g: Granularity) -> Var {
        match g {
            Granularity::Layer => self.layer,
            Granularity::Hidden => self.hidden,
            Granularity::Head => self.head,
            Granularity::Intermediate => self.int,
        }
    }
}

/// Uniform noise for one sampling step, one draw per mask unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskNoise {
    pub layer: Vec<f64>,
    pub hidden: Vec<f64>,
    pub head: Vec<f64>,
    pub int: Vec<f64>,
}

impl MaskNoise {
    pub fn draw<R: Rng>(set: &HardConcreteMaskSet, rng: &mut R) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| open_unit(rng)).collect::<Vec<_>>();
        MaskNoise {
            layer: draw(set.log_alpha_layer.len()),
            hidden: draw(set.log_alpha_hidden.len()),
            head: draw(set.log_alpha_head.iter().map(Vec::len).sum()),
            int: draw(set.log_alpha_int.iter().map(Vec::len).sum()),
        }
    }

    /// Noise that reproduces the deterministic score (`u = 1/2` everywhere).
    pub fn neutral(set: &HardConcreteMaskSet) -> Self {
        MaskNoise {
            layer: vec![0.5; set.log_alpha_layer.len()],
            hidden: vec![0.5; set.log_alpha_hidden.len()],
            head: vec![0.5; set.log_alpha_head.iter().map(Vec::len).sum()],
            int: vec![0.5; set.log_alpha_int.iter().map(Vec::len).sum()],
        }
    }

    fn get(&self, g: Granularity) -> &[f64] {
        match g {
            Granularity::Layer => &self.layer,
            Granularity::Hidden => &self.hidden,
            Granularity::Head => &self.head,
            Granularity::Intermediate => &self.int,
        }
    }
}

/// Uniform draw on the open interval (0, 1).
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Gate values recorded on a tape, ready to be injected into the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MaskVars {
    pub layer: Var,
    pub hidden: Var,
    pub head: Var,
    pub int: Var,
    /// Number of hidden dimensions with a non-zero gate; the RMSNorm statistic
    /// is averaged over these only.
    pub hidden_active: usize,
}

impl MaskVars {
    pub fn get(&self, g: Granularity) -> Var {
        match g {
            Granularity::Layer => self.layer,
            Granularity::Hidden => self.hidden,
            Granularity::Head => self.head,
            Granularity::Intermediate => self.int,
        }
    }
}

/// Reparametrized hard-concrete sample, differentiable w.r.t. the locations
/// with the noise held fixed.
pub fn sample_mask(
    tape: &mut Tape,
    params: &MaskParamVars,
    noise: &MaskNoise,
    constants: &HardConcreteConstants,
) -> Result<MaskVars> {
    constants.validate()?;
    let mut gates = [params.layer; 4];
    for (slot, g) in gates.iter_mut().zip(Granularity::ALL) {
        let loc = params.get(g);
        let u = noise.get(g);
        if u.len() != tape.value(loc).len() {
            return Err(MaskError::ShapeMismatch(format!(
                "{g}: {} noise draws for {} gates",
                u.len(),
                tape.value(loc).len()
            )));
        }
        let logits: Vec<f64> = u.iter().map(|&u| (u / (1.0 - u)).ln()).collect();
        let shape = tape.shape(loc).to_vec();
        let noise_var = tape.constant(shape, logits)?;
        let pre = tape.add(noise_var, loc)?;
        let pre = tape.scale(pre, 1.0 / constants.beta)?;
        let s = tape.sigmoid(pre)?;
        let stretched = tape.scale(s, constants.zeta - constants.gamma)?;
        let stretched = tape.add_const(stretched, constants.gamma)?;
        *slot = tape.clamp01(stretched)?;
    }
    let hidden_active = tape.value(gates[1]).iter().filter(|&&z| z > 0.0).count().max(1);
    Ok(MaskVars {
        layer: gates[0],
        hidden: gates[1],
        head: gates[2],
        int: gates[3],
        hidden_active,
    })
}

/// Plain gate values (sampled, deterministic, or binary-times-score).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskValues {
    pub layer: Vec<f64>,
    pub hidden: Vec<f64>,
    pub head: Vec<Vec<f64>>,
    pub int: Vec<Vec<f64>>,
    /// Overrides the live hidden-dimension count used by RMSNorm. `None`
    /// counts the non-zero hidden gates.
    pub hidden_active: Option<usize>,
}

impl MaskValues {
    pub fn ones(config: &ModelConfig) -> Self {
        MaskValues {
            layer: vec![1.0; config.n_layers],
            hidden: vec![1.0; config.hidden_dim],
            head: vec![vec![1.0; config.n_heads]; config.n_layers],
            int: vec![vec![1.0; config.intermediate_dim]; config.n_layers],
            hidden_active: None,
        }
    }

    /// Kept units carry their score; removed units are zero.
    pub fn from_binary(binary: &BinaryMaskSet, scores: &MaskValues) -> Self {
        let pick = |keep: &[bool], s: &[f64]| {
            keep.iter()
                .zip(s)
                .map(|(&k, &v)| if k { v } else { 0.0 })
                .collect::<Vec<_>>()
        };
        MaskValues {
            layer: pick(&binary.layers, &scores.layer),
            hidden: pick(&binary.hidden, &scores.hidden),
            head: binary.heads.iter().zip(&scores.head).map(|(k, s)| pick(k, s)).collect(),
            int: binary.int.iter().zip(&scores.int).map(|(k, s)| pick(k, s)).collect(),
            hidden_active: Some(binary.hidden.iter().filter(|&&k| k).count()),
        }
    }

    /// Sum of gate values per family; per-layer families return one sum per layer.
    pub fn sums(&self, g: Granularity) -> Vec<f64> {
        match g {
            Granularity::Layer => vec![self.layer.iter().sum()],
            Granularity::Hidden => vec![self.hidden.iter().sum()],
            Granularity::Head => self.head.iter().map(|r| r.iter().sum()).collect(),
            Granularity::Intermediate => self.int.iter().map(|r| r.iter().sum()).collect(),
        }
    }

    /// Records the values as constants.
    pub fn record(&self, tape: &mut Tape) -> Result<MaskVars> {
        let l = self.layer.len();
        let h = self.head.first().map_or(0, Vec::len);
        let m = self.int.first().map_or(0, Vec::len);
        let hidden_active = self
            .hidden_active
            .unwrap_or_else(|| self.hidden.iter().filter(|&&z| z != 0.0).count())
            .max(1);
        Ok(MaskVars {
            layer: tape.constant(vec![l], self.layer.clone())?,
            hidden: tape.constant(vec![self.hidden.len()], self.hidden.clone())?,
            head: tape.constant(vec![l, h], self.head.concat())?,
            int: tape.constant(vec![l, m], self.int.concat())?,
            hidden_active,
        })
    }
}

/// Keep/remove decisions at the target shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMaskSet {
    pub layers: Vec<bool>,
    pub hidden: Vec<bool>,
    /// One row per source layer; rows of removed layers are all `false`.
    pub heads: Vec<Vec<bool>>,
    pub int: Vec<Vec<bool>>,
}

impl BinaryMaskSet {
    pub fn kept_layers(&self) -> Vec<usize> {
        indices(&self.layers)
    }

    pub fn kept_hidden(&self) -> Vec<usize> {
        indices(&self.hidden)
    }

    pub fn kept_heads(&self, layer: usize) -> Vec<usize> {
        indices(&self.heads[layer])
    }

    pub fn kept_int(&self, layer: usize) -> Vec<usize> {
        indices(&self.int[layer])
    }

    /// Checks that keep-counts equal `target` exactly.
    pub fn matches(&self, target: &TargetShape) -> bool {
        let count = |v: &[bool]| v.iter().filter(|&&k| k).count();
        let layers = self.kept_layers();
        count(&self.layers) == target.n_layers
            && count(&self.hidden) == target.hidden_dim
            && layers.iter().all(|&l| count(&self.heads[l]) == target.n_heads)
            && layers.iter().all(|&l| count(&self.int[l]) == target.intermediate_dim)
            && (0..self.layers.len())
                .filter(|l| !self.layers[*l])
                .all(|l| count(&self.heads[l]) == 0 && count(&self.int[l]) == 0)
    }
}

fn indices(keep: &[bool]) -> Vec<usize> {
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// Keeps the `count` highest scores; equal scores prefer the lower index.
pub fn top_k(scores: &[f64], count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in order.iter().take(count) {
        keep[i] = true;
    }
    keep
}

/// Binarizes deterministic scores at exactly the target shape.
pub fn binarize(params: &HardConcreteMaskSet, target: &TargetShape) -> Result<BinaryMaskSet> {
    binarize_scores(&params.deterministic_scores(), target)
}

pub fn binarize_scores(scores: &MaskValues, target: &TargetShape) -> Result<BinaryMaskSet> {
    let check = |g, t: usize, s: usize| {
        if t > s {
            Err(MaskError::TargetTooLarge {
                granularity: g,
                target: t,
                source_count: s,
            })
        } else {
            Ok(())
        }
    };
    let n_heads = scores.head.first().map_or(0, Vec::len);
    let n_int = scores.int.first().map_or(0, Vec::len);
    check(Granularity::Layer, target.n_layers, scores.layer.len())?;
    check(Granularity::Hidden, target.hidden_dim, scores.hidden.len())?;
    check(Granularity::Head, target.n_heads, n_heads)?;
    check(Granularity::Intermediate, target.intermediate_dim, n_int)?;

    let layers = top_k(&scores.layer, target.n_layers);
    let hidden = top_k(&scores.hidden, target.hidden_dim);
    let per_layer = |rows: &[Vec<f64>], count: usize| {
        rows.iter()
            .zip(&layers)
            .map(|(r, &kept)| if kept { top_k(r, count) } else { vec![false; r.len()] })
            .collect::<Vec<_>>()
    };
    Ok(BinaryMaskSet {
        heads: per_layer(&scores.head, target.n_heads),
        int: per_layer(&scores.int, target.intermediate_dim),
        layers,
        hidden,
    })
}

/// Folds the scores of kept units into the output-side weights that follow
/// each gate, so that removing the pruned units leaves a model computing the
/// same function as the binary-times-score masked model.
///
/// * hidden score `j`: column `j` of the token and position embeddings and of
///   every attention output and down projection;
/// * layer score: the whole attention output and down projection of that layer;
/// * head score: the rows of the attention output projection fed by that head;
/// * intermediate score: the matching row of the down projection.
pub fn absorb(
    weights: &TransformerWeights,
    scores: &MaskValues,
    binary: &BinaryMaskSet,
) -> TransformerWeights {
    let mut w = weights.clone();
    let cfg = w.config.clone();
    let d = cfg.hidden_dim;
    let hd = cfg.head_dim;
    let scale_cols = |data: &mut [f64], cols: usize, j: usize, s: f64| {
        for row in data.chunks_mut(cols) {
            row[j] *= s;
        }
    };
    for j in binary.kept_hidden() {
        let s = scores.hidden[j];
        if s == 1.0 {
            continue;
        }
        scale_cols(w.tok_embed.data_mut(), d, j, s);
        scale_cols(w.pos_embed.data_mut(), d, j, s);
        for layer in &mut w.layers {
            scale_cols(layer.wo.data_mut(), d, j, s);
            scale_cols(layer.w_down.data_mut(), d, j, s);
        }
    }
    for l in binary.kept_layers() {
        let layer = &mut w.layers[l];
        let s = scores.layer[l];
        if s != 1.0 {
            layer.wo.data_mut().iter_mut().for_each(|x| *x *= s);
            layer.w_down.data_mut().iter_mut().for_each(|x| *x *= s);
        }
        for h in binary.kept_heads(l) {
            let s = scores.head[l][h];
            if s != 1.0 {
                let rows = &mut layer.wo.data_mut()[h * hd * d..(h + 1) * hd * d];
                rows.iter_mut().for_each(|x| *x *= s);
            }
        }
        for i in binary.kept_int(l) {
            let s = scores.int[l][i];
            if s != 1.0 {
                layer.w_down.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    w
}
