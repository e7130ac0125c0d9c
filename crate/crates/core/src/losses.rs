//! Task heads, their losses, and verification scoring.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, Rng};

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit; `bonafide` is the positive class.
/// Returns `(loss, ∂loss/∂logit)`.
pub fn bce_with_logit(logit: f64, bonafide: bool) -> (f64, f64) {
    let y = if bonafide { 1.0 } else { 0.0 };
    let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AamConfig {
    pub num_classes: usize,
    /// Additive angular margin, radians.
    pub margin: f64,
    pub scale: f64,
}

impl AamConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            margin: 0.2,
            scale: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("AAM needs at least one class".into()));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "AAM margin {} outside [0, pi/2)",
                self.margin
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("AAM scale must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AamOutput {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_weights: Matrix,
}

/// Additive angular margin softmax cross-entropy.
///
/// Logits are `s·cos θ_j` for `j ≠ y` and `s·cos(θ_y + m)` for the target,
/// where `θ_j` is the angle between `e` and class row `j` of `weights`.
pub fn aam_softmax(e: &[f64], weights: &Matrix, y: usize, cfg: &AamConfig) -> Result<AamOutput> {
    cfg.validate()?;
    if weights.cols() != e.len() || weights.rows() != cfg.num_classes {
        return Err(Error::Shape(format!(
            "AAM weights {:?} vs embedding {} and {} classes",
            weights.shape(),
            e.len(),
            cfg.num_classes
        )));
    }
    if y >= cfg.num_classes {
        return Err(Error::Config(format!("class {y} out of range")));
    }
    let e_norm = norm(e);
    if e_norm == 0.0 {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    let n = weights.rows();
    let mut w_norms = Vec::with_capacity(n);
    let mut cosines = Vec::with_capacity(n);
    for j in 0..n {
        let w = weights.row(j);
        let wn = norm(w);
        if wn == 0.0 {
            return Err(Error::Degenerate(format!("zero-norm class weight row {j}")));
        }
        w_norms.push(wn);
        cosines.push((dot(e, w) / (e_norm * wn)).clamp(-1.0, 1.0));
    }

    let (s, m) = (cfg.scale, cfg.margin);
    let cos_y = cosines[y];
    let sin_y = (1.0 - cos_y * cos_y).max(0.0).sqrt();
    let mut logits: Vec<f64> = cosines.iter().map(|c| s * c).collect();
    logits[y] = s * (cos_y * m.cos() - sin_y * m.sin());

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let loss = max + sum_exp.ln() - logits[y];

    // ∂loss/∂cos_j
    let mut d_cos: Vec<f64> = logits
        .iter()
        .map(|z| s * (z - max).exp() / sum_exp)
        .collect();
    d_cos[y] -= s;
    if m != 0.0 {
        // d cos(θ+m) / d cos θ = cos m + sin m · cos θ / sin θ
        let slope = if sin_y > 0.0 {
            m.cos() + m.sin() * cos_y / sin_y
        } else {
            m.cos()
        };
        d_cos[y] *= slope;
    }

    let mut grad_e = vec![0.0; e.len()];
    let mut grad_w = Matrix::zeros(n, e.len());
    for j in 0..n {
        let w = weights.row(j);
        let (wn, c, g) = (w_norms[j], cosines[j], d_cos[j]);
        if g == 0.0 {
            continue;
        }
        let gw = grad_w.row_mut(j);
        for k in 0..e.len() {
            grad_e[k] += g * (w[k] / (e_norm * wn) - c * e[k] / (e_norm * e_norm));
            gw[k] = g * (e[k] / (e_norm * wn) - c * w[k] / (wn * wn));
        }
    }
    Ok(AamOutput {
        loss,
        grad_embedding: grad_e,
        grad_weights: grad_w,
    })
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape("cosine of different-length vectors".into()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn top_k_stats(scores: &[f64], top_k: usize, side: &str) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty(format!("{side} cohort")));
    }
    if top_k == 0 || top_k > scores.len() {
        return Err(Error::Config(format!(
            "top_k {top_k} invalid for {side} cohort of {}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..top_k];
    let k = top_k as f64;
    let mean = top.iter().sum::<f64>() / k;
    let std = (top.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
    if std == 0.0 {
        return Err(Error::Degenerate(format!(
            "{side} cohort scores have zero spread"
        )));
    }
    Ok((mean, std))
}

/// Adaptive symmetric normalization over the `top_k` highest cohort scores of each side.
pub fn adaptive_snorm(
    raw: f64,
    enroll_cohort_scores: &[f64],
    test_cohort_scores: &[f64],
    top_k: usize,
) -> Result<f64> {
    let (mu_e, sd_e) = top_k_stats(enroll_cohort_scores, top_k, "enrollment")?;
    let (mu_t, sd_t) = top_k_stats(test_cohort_scores, top_k, "test")?;
    Ok(0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t))
}

#[derive(Debug, Clone)]
pub struct CohortEmbeddings {
    pub embeddings: Vec<Vec<f64>>,
    pub top_k: usize,
}

impl CohortEmbeddings {
    /// `top_k` defaults to `min(200, cohort size)`.
    pub fn new(embeddings: Vec<Vec<f64>>, top_k: Option<usize>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Empty("cohort".into()));
        }
        let top_k = top_k.unwrap_or(200).min(embeddings.len());
        if top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(Self { embeddings, top_k })
    }

    pub fn scores(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.embeddings.iter().map(|c| cosine_score(e, c)).collect()
    }

    /// Cosine score of the pair, normalized against this cohort.
    pub fn normalized_score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let raw = cosine_score(enroll, test)?;
        adaptive_snorm(raw, &self.scores(enroll)?, &self.scores(test)?, self.top_k)
    }
}

/// Linear bona fide/spoof classifier on the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CmHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl CmHead {
    pub fn init(embed_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        Self {
            weight: (0..embed_dim).map(|_| rng.uniform_range(-bound, bound)).collect(),
            bias: 0.0,
        }
    }

    pub fn logit(&self, e: &[f64]) -> f64 {
        dot(&self.weight, e) + self.bias
    }
}

/// Class-weight matrix for AAM-softmax speaker classification.
#[derive(Debug, Clone, PartialEq)]
pub struct AamHead {
    pub weights: Matrix,
    pub cfg: AamConfig,
}

impl AamHead {
    pub fn init(cfg: AamConfig, embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (embed_dim as f64).sqrt();
        Ok(Self {
            weights: Matrix::from_fn(cfg.num_classes, embed_dim, |_, _| {
                rng.uniform_range(-bound, bound)
            }),
            cfg,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Cm(CmHead),
    Aam(AamHead),
}

impl Head {
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Head::Cm(h) => vec![&h.weight, std::slice::from_ref(&h.bias)],
            Head::Aam(h) => vec![h.weights.as_slice()],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Head::Cm(h) => vec![&mut h.weight, std::slice::from_mut(&mut h.bias)],
            Head::Aam(h) => vec![h.weights.as_mut_slice()],
        }
    }

    pub fn zeros_like(&self) -> Head {
        match self {
            Head::Cm(h) => Head::Cm(CmHead {
                weight: vec![0.0; h.weight.len()],
                bias: 0.0,
            }),
            Head::Aam(h) => Head::Aam(AamHead {
                weights: Matrix::zeros(h.weights.rows(), h.weights.cols()),
                cfg: h.cfg,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        let (l, g) = bce_with_logit(0.0, true);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let (l, g) = bce_with_logit(40.0, true);
        assert!(l >= 0.0 && l < 1e-17);
        assert!(g.abs() < 1e-17);
        let (l, _) = bce_with_logit(-800.0, false);
        assert!(l.is_finite() && l < 1e-300);
        let (l, _) = bce_with_logit(800.0, false);
        assert!((l - 800.0).abs() < 1e-12);
        // ln(1 + e^1.5) at 50 digits (mpmath).
        let (l, g) = bce_with_logit(1.5, false);
        assert!((l - 1.701_413_277_982_752_4).abs() < 1e-15);
        assert!((g - sigmoid(1.5)).abs() == 0.0);
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -0.5];
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_score(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn snorm_examples() {
        assert_eq!(adaptive_snorm(2.0, &[0.0, 2.0], &[0.0, 2.0], 2).unwrap(), 1.0);
        assert_eq!(adaptive_snorm(1.0, &[0.0, 2.0], &[-1.0, 3.0], 2).unwrap(), 0.0);
        // Only the top two of each cohort count.
        assert_eq!(
            adaptive_snorm(2.0, &[-50.0, 0.0, 2.0], &[2.0, 0.0, -9.0], 2).unwrap(),
            1.0
        );
        assert!(matches!(
            adaptive_snorm(1.0, &[1.0, 1.0], &[0.0, 2.0], 2),
            Err(Error::Degenerate(_))
        ));
        assert!(adaptive_snorm(1.0, &[], &[0.0, 2.0], 1).is_err());
        assert!(adaptive_snorm(1.0, &[0.0, 2.0], &[0.0, 2.0], 3).is_err());
    }

    #[test]
    fn cohort_top_k_defaults_to_cohort_size_when_small() {
        let c = CohortEmbeddings::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        assert_eq!(c.top_k, 2);
    }

    #[test]
    fn aam_without_margin_is_scaled_cosine_softmax() {
        let mut rng = Rng::new(12);
        let e: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let w = Matrix::from_fn(4, 5, |_, _| rng.normal());
        let cfg = AamConfig { num_classes: 4, margin: 0.0, scale: 10.0 };
        let out = aam_softmax(&e, &w, 2, &cfg).unwrap();
        let logits: Vec<f64> = (0..4)
            .map(|j| 10.0 * dot(&e, w.row(j)) / (norm(&e) * norm(w.row(j))))
            .collect();
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        assert!((out.loss - (lse - logits[2])).abs() < 1e-12);
    }

    #[test]
    fn aam_aligned_embedding_has_vanishing_loss() {
        let w = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = AamConfig { num_classes: 2, margin: 0.0, scale: 100.0 };
        let out = aam_softmax(&[3.0, 0.0], &w, 0, &cfg).unwrap();
        assert!(out.loss < 1e-40);
    }

    #[test]
    fn aam_rejects_degenerate_inputs() {
        let w = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let cfg = AamConfig::new(2);
        assert!(aam_softmax(&[0.0, 0.0], &w, 0, &cfg).is_err());
        assert!(aam_softmax(&[1.0, 0.0], &w, 0, &cfg).is_err());
        assert!(AamConfig { margin: 2.0, ..cfg }.validate().is_err());
    }
}
