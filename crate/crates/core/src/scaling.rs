//! Domain-wise scaling law `L(N, D) = E + A/N^α + B/D^β`.
//!
//! Fits run Levenberg-Marquardt on the log-parameters from 16 seeded starts.
//! In fixed-D mode the data term folds into the constant `C0 = E + B/D^β`
//! and only `(C0, A, α)` are estimated.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScalingError {
    #[error("invalid observation: {0}")]
    Observation(String),
    #[error("{mode:?} fit needs at least {need} observations, got {got}")]
    Insufficient { mode: FitMode, need: usize, got: usize },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("fit did not converge after {starts} starts (best cost {best_cost:e})")]
    NotConverged { starts: usize, best_cost: f64 },
    #[error("prediction needs N > 0 and D > 0, got N={n}, D={d}")]
    Domain { n: f64, d: f64 },
}

pub type Result<T> = std::result::Result<T, ScalingError>;

pub const STARTS: usize = 16;
const MAX_ITERS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossObservation {
    pub domain: String,
    /// Non-embedding parameter count.
    pub model_size: f64,
    /// Training tokens.
    pub data_size: f64,
    pub loss: f64,
}

impl LossObservation {
    fn validate(&self) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if ok(self.model_size) && ok(self.data_size) && ok(self.loss) {
            Ok(())
        } else {
            Err(ScalingError::Observation(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    FixedD,
    Full,
}

impl FitMode {
    fn n_params(self) -> usize {
        match self {
            FitMode::FixedD => 3,
            FitMode::Full => 5,
        }
    }
}

/// Fitted law for one domain. In fixed-D mode `e` holds `C0` and `b = beta = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub domain: String,
    pub mode: FitMode,
    pub e: f64,
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub beta: f64,
    /// `prediction - observed` at each input point.
    pub residuals: Vec<f64>,
}

impl ScalingFit {
    pub fn c0(&self) -> f64 {
        self.e
    }

    fn from_log(domain: &str, mode: FitMode, p: &[f64]) -> Self {
        let (b, beta) = match mode {
            FitMode::FixedD => (0.0, 0.0),
            FitMode::Full => (p[3].exp(), p[4].exp()),
        };
        ScalingFit {
            domain: domain.to_string(),
            mode,
            e: p[0].exp(),
            a: p[1].exp(),
            alpha: p[2].exp(),
            b,
            beta,
            residuals: Vec::new(),
        }
    }

    fn law(&self, n: f64, d: f64) -> f64 {
        let data = match self.mode {
            FitMode::FixedD => 0.0,
            FitMode::Full => self.b * d.powf(-self.beta),
        };
        self.e + self.a * n.powf(-self.alpha) + data
    }
}

/// `E + A/N^α + B/D^β` (fixed-D: `C0 + A/N^α`, `D` ignored beyond validation).
pub fn predict(fit: &ScalingFit, n: f64, d: f64) -> Result<f64> {
    if !(n > 0.0 && d > 0.0) {
        return Err(ScalingError::Domain { n, d });
    }
    Ok(fit.law(n, d))
}

/// Residuals and Jacobian with respect to the log-parameters.
fn residuals_and_jacobian(mode: FitMode, p: &[f64], obs: &[LossObservation], jac: &mut Vec<Vec<f64>>) -> Vec<f64> {
    let (e, a, alpha) = (p[0].exp(), p[1].exp(), p[2].exp());
    jac.clear();
    obs.iter()
        .map(|o| {
            let ln_n = o.model_size.ln();
            let tn = a * (-alpha * ln_n).exp();
            let mut row = vec![e, tn, -tn * alpha * ln_n];
            let mut pred = e + tn;
            if mode == FitMode::Full {
                let (b, beta) = (p[3].exp(), p[4].exp());
                let ln_d = o.data_size.ln();
                let td = b * (-beta * ln_d).exp();
                row.extend([td, -td * beta * ln_d]);
                pred += td;
            }
            jac.push(row);
            pred - o.loss
        })
        .collect()
}

fn cost(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|x| x * x).sum::<f64>()
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        if m[piv][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct Solution {
    p: Vec<f64>,
    cost: f64,
    converged: bool,
}

fn levenberg_marquardt(mode: FitMode, mut p: Vec<f64>, obs: &[LossObservation]) -> Solution {
    let k = p.len();
    let mut jac = Vec::new();
    let mut r = residuals_and_jacobian(mode, &p, obs, &mut jac);
    let mut c = cost(&r);
    let mut mu = 1e-3;
    for _ in 0..MAX_ITERS {
        if !c.is_finite() {
            break;
        }
        if c < 1e-30 {
            return Solution { p, cost: c, converged: true };
        }
        let mut jtj = vec![vec![0.0; k]; k];
        let mut jtr = vec![0.0; k];
        for (row, &ri) in jac.iter().zip(&r) {
            for i in 0..k {
                jtr[i] += row[i] * ri;
                for j in 0..k {
                    jtj[i][j] += row[i] * row[j];
                }
            }
        }
        let mut improved = false;
        while mu < 1e16 {
            let mut m = jtj.clone();
            for i in 0..k {
                m[i][i] += mu * jtj[i][i].max(1e-12);
            }
            let Some(step) = solve(m, jtr.iter().map(|g| -g).collect()) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(&step).map(|(a, b)| a + b).collect();
            if trial.iter().any(|v| !v.is_finite() || v.abs() > 700.0) {
                mu *= 10.0;
                continue;
            }
            let mut tj = Vec::new();
            let tr = residuals_and_jacobian(mode, &trial, obs, &mut tj);
            let tc = cost(&tr);
            if tc.is_finite() && tc < c {
                let small_step = step.iter().map(|s| s * s).sum::<f64>().sqrt() < 1e-13;
                let small_gain = (c - tc) <= 1e-15 * c;
                p = trial;
                r = tr;
                jac = tj;
                c = tc;
                mu = (mu / 10.0).max(1e-15);
                improved = true;
                if small_step || small_gain {
                    return Solution { p, cost: c, converged: true };
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            // No descent direction at any damping: a stationary point.
            return Solution { p, cost: c, converged: c.is_finite() };
        }
    }
    Solution { p, cost: c, converged: false }
}

/// Linear least-squares coefficients given fixed exponents, used to seed a start.
fn linear_start(mode: FitMode, alpha: f64, beta: f64, obs: &[LossObservation]) -> Vec<f64> {
    let cols = |o: &LossObservation| -> Vec<f64> {
        let mut c = vec![1.0, o.model_size.powf(-alpha)];
        if mode == FitMode::Full {
            c.push(o.data_size.powf(-beta));
        }
        c
    };
    let k = if mode == FitMode::Full { 3 } else { 2 };
    let mut ata = vec![vec![0.0; k]; k];
    let mut aty = vec![0.0; k];
    for o in obs {
        let c = cols(o);
        for i in 0..k {
            aty[i] += c[i] * o.loss;
            for j in 0..k {
                ata[i][j] += c[i] * c[j];
            }
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] *= 1.0 + 1e-10;
    }
    let mean = obs.iter().map(|o| o.loss).sum::<f64>() / obs.len() as f64;
    let coef = solve(ata, aty).unwrap_or_else(|| vec![mean; k]);
    let pos = |x: f64, fallback: f64| if x > 0.0 && x.is_finite() { x.ln() } else { fallback.ln() };
    let mut p = vec![pos(coef[0], 0.5 * mean), pos(coef[1], 0.1 * mean), alpha.ln()];
    if mode == FitMode::Full {
        p.extend([pos(coef[2], 0.1 * mean), beta.ln()]);
    }
    p
}

/// Least-squares fit of one domain's observations.
pub fn fit(domain: &str, obs: &[LossObservation], mode: FitMode) -> Result<ScalingFit> {
    for o in obs {
        o.validate()?;
    }
    let need = mode.n_params();
    if obs.len() < need {
        return Err(ScalingError::Insufficient {
            mode,
            need,
            got: obs.len(),
        });
    }
    let distinct = |f: fn(&LossObservation) -> f64| {
        let mut v: Vec<f64> = obs.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct(|o| o.model_size) < 2 {
        return Err(ScalingError::Degenerate("all observations share one model size".into()));
    }
    if mode == FitMode::Full && distinct(|o| o.data_size) < 2 {
        return Err(ScalingError::Degenerate("full mode needs varying data sizes".into()));
    }
    let (lo, hi) = obs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| (lo.min(o.loss), hi.max(o.loss)));
    if hi - lo <= 1e-12 * hi {
        return Err(ScalingError::Degenerate("flat losses put A at the zero boundary".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1e);
    let mut best: Option<Solution> = None;
    for s in 0..STARTS {
        let (alpha, beta) = if s == 0 {
            (0.5, 0.5)
        } else {
            (
                (rng.gen_range((0.02f64).ln()..(2.0f64).ln())).exp(),
                (rng.gen_range((0.02f64).ln()..(2.0f64).ln())).exp(),
            )
        };
        let sol = levenberg_marquardt(mode, linear_start(mode, alpha, beta, obs), obs);
        if sol.converged && best.as_ref().map_or(true, |b| sol.cost < b.cost) {
            best = Some(sol);
        }
    }
    let Some(best) = best else {
        return Err(ScalingError::NotConverged {
            starts: STARTS,
            best_cost: f64::INFINITY,
        });
    };
    let mut out = ScalingFit::from_log(domain, mode, &best.p);
    if out.a < 1e-10 * out.e {
        return Err(ScalingError::Degenerate(format!("A collapsed to {:e}", out.a)));
    }
    out.residuals = obs.iter().map(|o| out.law(o.model_size, o.data_size) - o.loss).collect();
    Ok(out)
}

/// Fits every domain present in `obs`, keyed by domain name.
pub fn fit_domains(obs: &[LossObservation], mode: FitMode) -> Result<BTreeMap<String, ScalingFit>> {
    let mut by: BTreeMap<String, Vec<LossObservation>> = BTreeMap::new();
    for o in obs {
        by.entry(o.domain.clone()).or_default().push(o.clone());
    }
    by.into_iter().map(|(d, o)| Ok((d.clone(), fit(&d, &o, mode)?))).collect()
}

/// Predicted losses at `(n, d)` for `names`, in that order.
pub fn scaling_reference(fits: &BTreeMap<String, ScalingFit>, names: &[String], n: f64, d: f64) -> Result<Vec<f64>> {
    names
        .iter()
        .map(|name| {
            let f = fits
                .get(name)
                .ok_or_else(|| ScalingError::Observation(format!("no fit for domain {name}")))?;
            predict(f, n, d)
        })
        .collect()
}

/// Source-model validation loss per domain, in corpus order.
pub fn source_reference(
    weights: &crate::model::TransformerWeights,
    eval: &crate::trainer::EvalSet,
) -> crate::error::Result<Vec<f64>> {
    crate::trainer::evaluate(weights, None, eval)
}
