//! Logistic score calibration and two-system (ASV + CM) fusion.
//!
//! Both strategies maximize the prior-weighted logistic log-likelihood
//!
//! ```text
//! J(θ) = π/N₊ Σ₊ log σ(f(x) + logit π) + (1−π)/N₋ Σ₋ log σ(−f(x) − logit π)
//! ```
//!
//! with `f` affine in the scores, so the fitted outputs are log-likelihood
//! ratios. `J` is concave; it is maximized by Newton steps with backtracking,
//! which never lowers the objective.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{ScoreSet, TrialLabel, TrialSet};

pub const MAX_NEWTON_ITERS: usize = 200;
pub const GRAD_TOL: f64 = 1e-9;
/// Balanced effective prior used when none is given.
pub const DEFAULT_PRIOR: f64 = 0.5;
/// A fit whose every residual is below this is treated as separable.
const SEPARATION_RESIDUAL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineCalibration {
    pub scale: f64,
    pub bias: f64,
}

impl AffineCalibration {
    pub const IDENTITY: AffineCalibration = AffineCalibration {
        scale: 1.0,
        bias: 0.0,
    };

    pub fn apply(&self, s: f64) -> f64 {
        apply_affine(s, self)
    }
}

pub fn apply_affine(s: f64, c: &AffineCalibration) -> f64 {
    c.scale * s + c.bias
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointFusionModel {
    pub a_asv: f64,
    pub a_cm: f64,
    pub bias: f64,
}

impl JointFusionModel {
    pub fn apply(&self, asv: f64, cm: f64) -> f64 {
        self.a_asv * asv + self.a_cm * cm + self.bias
    }
}

/// Outcome of a logistic fit: weights per feature, bias, and the objective after each iteration.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [bool],
    offset: f64,
    w_pos: f64,
    w_neg: f64,
}

impl Problem<'_> {
    fn margin(&self, theta: &[f64], x: &[f64]) -> f64 {
        let k = x.len();
        x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + theta[k] + self.offset
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        self.features
            .iter()
            .zip(self.labels)
            .map(|(x, &y)| {
                let z = self.margin(theta, x);
                if y {
                    self.w_pos * log_sigmoid(z)
                } else {
                    self.w_neg * log_sigmoid(-z)
                }
            })
            .sum()
    }

    /// Wraps a stationary point. On separable data the likelihood has no
    /// finite maximizer: the gradient still vanishes numerically, but only
    /// once every residual is negligible, which never happens otherwise.
    fn finish(&self, theta: Vec<f64>, iterations: usize, trace: Vec<f64>) -> Result<LogisticFit> {
        let worst = self
            .features
            .iter()
            .zip(self.labels)
            .map(|(x, &y)| {
                let p = sigmoid(self.margin(&theta, x));
                if y {
                    1.0 - p
                } else {
                    p
                }
            })
            .fold(0.0, f64::max);
        if worst < SEPARATION_RESIDUAL {
            return Err(Error::NotConverged(format!(
                "classes are linearly separable (largest residual {worst:.1e}); \
                 the maximum-likelihood scale diverges"
            )));
        }
        let k = theta.len() - 1;
        Ok(LogisticFit {
            weights: theta[..k].to_vec(),
            bias: theta[k],
            iterations,
            objective_trace: trace,
        })
    }

    /// Gradient and negated Hessian of the objective.
    fn derivatives(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = theta.len();
        let mut g = vec![0.0; n];
        let mut h = vec![vec![0.0; n]; n];
        let mut xt = vec![1.0; n];
        for (x, &y) in self.features.iter().zip(self.labels) {
            xt[..n - 1].copy_from_slice(x);
            let z = self.margin(theta, x);
            let p = sigmoid(z);
            let (w, r) = if y {
                (self.w_pos, 1.0 - p)
            } else {
                (self.w_neg, -p)
            };
            let curv = w * p * (1.0 - p);
            for i in 0..n {
                g[i] += w * r * xt[i];
                for j in 0..n {
                    h[i][j] += curv * xt[i] * xt[j];
                }
            }
        }
        (g, h)
    }
}

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

/// Prior-weighted logistic regression on `features` (one row per trial).
pub fn fit_logistic(features: &[Vec<f64>], labels: &[bool], prior: f64) -> Result<LogisticFit> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::Config(format!("prior weighting {prior} not in (0, 1)")));
    }
    let k = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Empty("calibration scores".into()))?;
    if features.iter().any(|x| x.len() != k || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Shape("ragged or non-finite feature rows".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "calibration needs both positive and negative trials".into(),
        ));
    }
    let problem = Problem {
        features,
        labels,
        offset: logit(prior),
        w_pos: prior / n_pos as f64,
        w_neg: (1.0 - prior) / n_neg as f64,
    };

    let mut theta = vec![0.0; k + 1];
    let mut obj = problem.objective(&theta);
    let mut trace = vec![obj];
    for iter in 0..MAX_NEWTON_ITERS {
        let (g, mut h) = problem.derivatives(&theta);
        let g_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if g_max < GRAD_TOL {
            return problem.finish(theta, iter, trace);
        }
        // A tiny ridge keeps the system solvable when a feature is constant.
        let ridge = 1e-12 * (0..=k).map(|i| h[i][i]).fold(0.0, f64::max).max(1e-300);
        for (i, row) in h.iter_mut().enumerate() {
            row[i] += ridge;
        }
        let step = solve(h, g.clone())
            .ok_or_else(|| Error::NotConverged("singular Newton system".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            let c_obj = problem.objective(&cand);
            if c_obj.is_finite() && c_obj > obj {
                theta = cand;
                obj = c_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        trace.push(obj);
        if !accepted {
            if g_max < 1e-7 {
                return problem.finish(theta, iter + 1, trace);
            }
            return Err(Error::NotConverged(format!(
                "line search stalled with gradient {g_max:e}"
            )));
        }
    }
    Err(Error::NotConverged(format!(
        "no convergence in {MAX_NEWTON_ITERS} Newton iterations (separable data?)"
    )))
}

fn has_spread(v: &[f64]) -> bool {
    v.iter().any(|x| *x != v[0])
}

/// Fits `s ↦ a·s + b` by logistic regression; refuses non-discriminative fits (`a ≤ 0`).
pub fn fit_calibration(
    scores: &[f64],
    labels: &[bool],
    prior_weighting: f64,
) -> Result<AffineCalibration> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores".into()));
    }
    if !has_spread(scores) {
        return Err(Error::Degenerate("constant scores cannot be calibrated".into()));
    }
    let features: Vec<Vec<f64>> = scores.iter().map(|&s| vec![s]).collect();
    let fit = fit_logistic(&features, labels, prior_weighting)?;
    let c = AffineCalibration {
        scale: fit.weights[0],
        bias: fit.bias,
    };
    if !(c.scale > 0.0) {
        return Err(Error::Degenerate(format!(
            "fitted scale {:.4} <= 0: scores rank the classes backwards",
            c.scale
        )));
    }
    Ok(c)
}

/// Jointly fits `a_asv·s_asv + a_cm·s_cm + b`.
pub fn fit_joint_fusion(
    s_asv: &[f64],
    s_cm: &[f64],
    labels: &[bool],
    prior_weighting: f64,
) -> Result<JointFusionModel> {
    Ok(joint_fit_traced(s_asv, s_cm, labels, prior_weighting)?.0)
}

pub fn joint_fit_traced(
    s_asv: &[f64],
    s_cm: &[f64],
    labels: &[bool],
    prior_weighting: f64,
) -> Result<(JointFusionModel, LogisticFit)> {
    if s_asv.len() != s_cm.len() {
        return Err(Error::Shape(format!(
            "{} ASV scores vs {} CM scores",
            s_asv.len(),
            s_cm.len()
        )));
    }
    let features: Vec<Vec<f64>> = s_asv.iter().zip(s_cm).map(|(&a, &c)| vec![a, c]).collect();
    let fit = fit_logistic(&features, labels, prior_weighting)?;
    let model = JointFusionModel {
        a_asv: fit.weights[0],
        a_cm: fit.weights[1],
        bias: fit.bias,
    };
    Ok((model, fit))
}

/// How the two component scores are turned into one SASV score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionStrategy {
    /// Joint logistic fusion of the raw scores.
    Joint(JointFusionModel),
    /// Individually calibrated scores, then joint fusion.
    PreCalibrated {
        asv: AffineCalibration,
        cm: AffineCalibration,
        joint: JointFusionModel,
    },
}

impl FusionStrategy {
    pub fn fuse(&self, asv: f64, cm: f64) -> f64 {
        match self {
            FusionStrategy::Joint(m) => m.apply(asv, cm),
            FusionStrategy::PreCalibrated { asv: ca, cm: cc, joint } => {
                joint.apply(ca.apply(asv), cc.apply(cm))
            }
        }
    }
}

/// Fuses aligned score sets; higher output means more likely a bona fide target.
pub fn fuse_scores(
    s_asv: &ScoreSet,
    s_cm: &ScoreSet,
    strategy: &FusionStrategy,
    final_calibration: Option<&AffineCalibration>,
) -> Result<ScoreSet> {
    check_same_keys(s_asv, s_cm)?;
    let mut out = ScoreSet::new("fused");
    for (id, a) in s_asv.iter() {
        let c = s_cm.get(id).expect("keys checked");
        let mut f = strategy.fuse(a, c);
        if let Some(cal) = final_calibration {
            f = cal.apply(f);
        }
        out.insert(id, f)?;
    }
    Ok(out)
}

fn check_same_keys(a: &ScoreSet, b: &ScoreSet) -> Result<()> {
    let only_a: Vec<&str> = a.ids().iter().filter(|id| b.get(id).is_none()).map(String::as_str).collect();
    let only_b: Vec<&str> = b.ids().iter().filter(|id| a.get(id).is_none()).map(String::as_str).collect();
    if only_a.is_empty() && only_b.is_empty() {
        return Ok(());
    }
    let show = |v: &[&str]| {
        let head: Vec<&str> = v.iter().take(10).copied().collect();
        let more = if v.len() > 10 {
            format!(" (+{} more)", v.len() - 10)
        } else {
            String::new()
        };
        format!("[{}]{more}", head.join(", "))
    };
    Err(Error::KeyMismatch(format!(
        "only in {}: {}; only in {}: {}",
        a.system_tag,
        show(&only_a),
        b.system_tag,
        show(&only_b)
    )))
}

/// Binary labels for a calibration task. Trials with labels outside both sets are dropped.
pub fn binary_labels(
    scores: &ScoreSet,
    trials: &TrialSet,
    positive: &[TrialLabel],
    negative: &[TrialLabel],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for t in trials.trials() {
        let is_pos = positive.contains(&t.label);
        if !is_pos && !negative.contains(&t.label) {
            continue;
        }
        let v = scores.get(&t.trial_id).ok_or_else(|| {
            Error::KeyMismatch(format!("trial {} has no {} score", t.trial_id, scores.system_tag))
        })?;
        s.push(v);
        y.push(is_pos);
    }
    Ok((s, y))
}

/// Aligned ASV/CM scores with SASV labels (target vs nontarget ∪ spoof).
pub fn sasv_training_data(
    s_asv: &ScoreSet,
    s_cm: &ScoreSet,
    trials: &TrialSet,
) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
    let (mut a, mut c, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for t in trials.trials() {
        if t.label == TrialLabel::Unknown {
            continue;
        }
        let missing = |tag: &str| Error::KeyMismatch(format!("trial {} has no {tag} score", t.trial_id));
        a.push(s_asv.get(&t.trial_id).ok_or_else(|| missing("ASV"))?);
        c.push(s_cm.get(&t.trial_id).ok_or_else(|| missing("CM"))?);
        y.push(t.label == TrialLabel::Target);
    }
    Ok((a, c, y))
}

/// Log-likelihood-ratio cost in bits; a calibration diagnostic.
pub fn cllr(llrs: &[f64], labels: &[bool]) -> Result<f64> {
    let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
    for (&s, &y) in llrs.iter().zip(labels) {
        if y {
            pos -= log_sigmoid(s);
            np += 1;
        } else {
            neg -= log_sigmoid(-s);
            nn += 1;
        }
    }
    if np == 0 || nn == 0 {
        return Err(Error::Degenerate("cllr needs both classes".into()));
    }
    Ok((pos / np as f64 + neg / nn as f64) / (2.0 * std::f64::consts::LN_2))
}

/// A model file: two numbers for an affine calibration, three for joint fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelFile {
    Affine(AffineCalibration),
    Joint(JointFusionModel),
}

pub fn write_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<()> {
    let path = path.as_ref();
    let text = match model {
        ModelFile::Affine(c) => format!("{:.16e} {:.16e}\n", c.scale, c.bias),
        ModelFile::Joint(m) => format!("{:.16e} {:.16e} {:.16e}\n", m.a_asv, m.a_cm, m.bias),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format {
                    path: path.into(),
                    msg: format!("{t:?} is not a finite number"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    match values[..] {
        [scale, bias] => Ok(ModelFile::Affine(AffineCalibration { scale, bias })),
        [a_asv, a_cm, bias] => Ok(ModelFile::Joint(JointFusionModel { a_asv, a_cm, bias })),
        _ => Err(Error::Format {
            path: path.into(),
            msg: format!("expected 2 or 3 numbers, found {}", values.len()),
        }),
    }
}
