//! Distribution-uncertainty (DSU) feature augmentation.
//!
//! For a batch of `T×C` value-stream features, each instance's per-channel
//! mean `μ` and standard deviation `σ` over time are treated as uncertain.
//! Their spread across the batch gives per-channel uncertainties `Σ_μ` and
//! `Σ_σ`, and the instance is re-styled as
//!
//! ```text
//! μ̃ = μ + ε_μ·Σ_μ        σ̃ = max(0, σ + ε_σ·Σ_σ)        x̃ = σ̃·(x − μ)/(σ + eps_floor) + μ̃
//! ```
//!
//! with `ε ~ N(0, 1)` drawn per (instance, channel). The whole batch is
//! perturbed with probability `p`, otherwise passed through untouched.
//!
//! [`backward`] differentiates through every statistic, including the
//! batch-level `Σ` terms, with the sampled `ε` held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{column_stats, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsuConfig {
    pub p: f64,
    pub eps_floor: f64,
}

impl Default for DsuConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            eps_floor: 1e-6,
        }
    }
}

impl DsuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("DSU p = {} not in [0, 1]", self.p)));
        }
        if !(self.eps_floor > 0.0 && self.eps_floor.is_finite()) {
            return Err(Error::Config("DSU eps_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Instance statistics (`B×C`) and their batch-level uncertainties (`C`).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu: Matrix,
    pub sigma: Matrix,
    pub sigma_mu: Vec<f64>,
    pub sigma_sigma: Vec<f64>,
}

/// Standard-normal draws for one perturbation, `B×C` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DsuNoise {
    pub eps_mu: Matrix,
    pub eps_sigma: Matrix,
}

impl DsuNoise {
    pub fn sample(batch: usize, channels: usize, rng: &mut Rng) -> Self {
        let eps_mu = Matrix::from_fn(batch, channels, |_, _| rng.normal());
        let eps_sigma = Matrix::from_fn(batch, channels, |_, _| rng.normal());
        Self { eps_mu, eps_sigma }
    }
}

/// Everything [`backward`] needs from a triggered perturbation.
#[derive(Debug, Clone)]
pub struct DsuTrace {
    pub stats: BatchStats,
    pub noise: DsuNoise,
    pub sigma_tilde: Matrix,
    eps_floor: f64,
}

pub fn instance_stats(v: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    column_stats(v)
}

fn check_batch(batch: &[Matrix]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Empty("DSU batch".into()))?;
    let c = first.cols();
    if let Some(bad) = batch.iter().position(|m| m.cols() != c) {
        return Err(Error::Shape(format!(
            "DSU batch instance {bad} has {} channels, expected {c}",
            batch[bad].cols()
        )));
    }
    Ok(c)
}

pub fn batch_stats(batch: &[Matrix]) -> Result<BatchStats> {
    let c = check_batch(batch)?;
    let b = batch.len();
    let mut mu = Matrix::zeros(b, c);
    let mut sigma = Matrix::zeros(b, c);
    for (i, x) in batch.iter().enumerate() {
        let (m, s) = instance_stats(x)?;
        mu.row_mut(i).copy_from_slice(&m);
        sigma.row_mut(i).copy_from_slice(&s);
    }
    let (_, sigma_mu) = column_stats(&mu)?;
    let (_, sigma_sigma) = column_stats(&sigma)?;
    Ok(BatchStats {
        mu,
        sigma,
        sigma_mu,
        sigma_sigma,
    })
}

/// Perturbs the batch with probability `cfg.p` (one draw for the whole batch).
pub fn dsu_perturb(batch: &[Matrix], cfg: &DsuConfig, rng: &mut Rng) -> Result<Vec<Matrix>> {
    Ok(perturb_traced(batch, cfg, rng)?.0)
}

/// Like [`dsu_perturb`] but also returns the trace of a triggered perturbation.
pub fn perturb_traced(
    batch: &[Matrix],
    cfg: &DsuConfig,
    rng: &mut Rng,
) -> Result<(Vec<Matrix>, Option<DsuTrace>)> {
    cfg.validate()?;
    let c = check_batch(batch)?;
    if !rng.bernoulli(cfg.p) {
        return Ok((batch.to_vec(), None));
    }
    let noise = DsuNoise::sample(batch.len(), c, rng);
    let (out, trace) = apply_with_noise(batch, cfg, noise)?;
    Ok((out, Some(trace)))
}

/// Applies the re-styling with the given noise, unconditionally.
pub fn apply_with_noise(
    batch: &[Matrix],
    cfg: &DsuConfig,
    noise: DsuNoise,
) -> Result<(Vec<Matrix>, DsuTrace)> {
    let c = check_batch(batch)?;
    if noise.eps_mu.shape() != (batch.len(), c) || noise.eps_sigma.shape() != (batch.len(), c) {
        return Err(Error::Shape("DSU noise does not match batch".into()));
    }
    let stats = batch_stats(batch)?;
    let mut sigma_tilde = Matrix::zeros(batch.len(), c);
    let mut out = Vec::with_capacity(batch.len());
    for (b, x) in batch.iter().enumerate() {
        let mut y = x.clone();
        for ch in 0..c {
            let mu = stats.mu[(b, ch)];
            let sigma = stats.sigma[(b, ch)];
            let mu_t = mu + noise.eps_mu[(b, ch)] * stats.sigma_mu[ch];
            let sig_t = (sigma + noise.eps_sigma[(b, ch)] * stats.sigma_sigma[ch]).max(0.0);
            sigma_tilde[(b, ch)] = sig_t;
            let gain = sig_t / (sigma + cfg.eps_floor);
            for t in 0..x.rows() {
                y[(t, ch)] = gain * (x[(t, ch)] - mu) + mu_t;
            }
        }
        out.push(y);
    }
    let trace = DsuTrace {
        stats,
        noise,
        sigma_tilde,
        eps_floor: cfg.eps_floor,
    };
    Ok((out, trace))
}

/// Gradient of the loss with respect to the unperturbed inputs.
pub fn backward(trace: &DsuTrace, inputs: &[Matrix], grad_out: &[Matrix]) -> Result<Vec<Matrix>> {
    let c = check_batch(inputs)?;
    let b_n = inputs.len();
    if grad_out.len() != b_n
        || grad_out
            .iter()
            .zip(inputs)
            .any(|(g, x)| g.shape() != x.shape())
        || trace.stats.mu.shape() != (b_n, c)
    {
        return Err(Error::Shape("DSU backward: trace/batch mismatch".into()));
    }
    let st = &trace.stats;
    let eps = trace.eps_floor;

    // Gradients w.r.t. each instance's (μ, σ), and the direct path to x.
    let mut g_mu = Matrix::zeros(b_n, c);
    let mut g_sigma = Matrix::zeros(b_n, c);
    let mut g_sigma_mu = vec![0.0; c];
    let mut g_sigma_sigma = vec![0.0; c];
    let mut grads: Vec<Matrix> = Vec::with_capacity(b_n);
    for (b, (x, g)) in inputs.iter().zip(grad_out).enumerate() {
        let mut gx = Matrix::zeros(x.rows(), c);
        for ch in 0..c {
            let mu = st.mu[(b, ch)];
            let sigma = st.sigma[(b, ch)];
            let denom = sigma + eps;
            let sig_t = trace.sigma_tilde[(b, ch)];
            let clamped = sig_t == 0.0
                && sigma + trace.noise.eps_sigma[(b, ch)] * st.sigma_sigma[ch] < 0.0;
            let (mut g_mu_t, mut g_sig_t, mut sum_dn, mut sum_dn_xc) = (0.0, 0.0, 0.0, 0.0);
            for t in 0..x.rows() {
                let xc = x[(t, ch)] - mu;
                let gy = g[(t, ch)];
                g_mu_t += gy;
                g_sig_t += gy * xc / denom;
                let dn = gy * sig_t;
                gx[(t, ch)] = dn / denom;
                sum_dn += dn;
                sum_dn_xc += dn * xc;
            }
            if clamped {
                g_sig_t = 0.0;
            }
            g_sigma_mu[ch] += g_mu_t * trace.noise.eps_mu[(b, ch)];
            g_sigma_sigma[ch] += g_sig_t * trace.noise.eps_sigma[(b, ch)];
            g_mu[(b, ch)] = g_mu_t - sum_dn / denom;
            g_sigma[(b, ch)] = g_sig_t - sum_dn_xc / (denom * denom);
        }
        grads.push(gx);
    }

    // Σ = population std over the batch: dΣ/dm_b = (m_b − m̄)/(B·Σ).
    let bf = b_n as f64;
    for ch in 0..c {
        let mean_mu = (0..b_n).map(|b| st.mu[(b, ch)]).sum::<f64>() / bf;
        let mean_sigma = (0..b_n).map(|b| st.sigma[(b, ch)]).sum::<f64>() / bf;
        for b in 0..b_n {
            if st.sigma_mu[ch] > 0.0 {
                g_mu[(b, ch)] +=
                    g_sigma_mu[ch] * (st.mu[(b, ch)] - mean_mu) / (bf * st.sigma_mu[ch]);
            }
            if st.sigma_sigma[ch] > 0.0 {
                g_sigma[(b, ch)] += g_sigma_sigma[ch] * (st.sigma[(b, ch)] - mean_sigma)
                    / (bf * st.sigma_sigma[ch]);
            }
        }
    }

    // μ = mean_t x, σ = sqrt(mean_t (x − μ)²).
    for (b, (x, gx)) in inputs.iter().zip(grads.iter_mut()).enumerate() {
        let tf = x.rows() as f64;
        for ch in 0..c {
            let mu = st.mu[(b, ch)];
            let sigma = st.sigma[(b, ch)];
            for t in 0..x.rows() {
                let mut v = g_mu[(b, ch)] / tf;
                if sigma > 0.0 {
                    v += g_sigma[(b, ch)] * (x[(t, ch)] - mu) / (tf * sigma);
                }
                gx[(t, ch)] += v;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut Rng, b: usize, t: usize, c: usize) -> Vec<Matrix> {
        (0..b)
            .map(|i| Matrix::from_fn(t, c, |_, ch| (i as f64) * 0.3 + ch as f64 + rng.normal()))
            .collect()
    }

    #[test]
    fn instance_stats_examples() {
        let (m, s) = instance_stats(&Matrix::new(3, 2, vec![5.0; 6]).unwrap()).unwrap();
        assert_eq!((m, s), (vec![5.0, 5.0], vec![0.0, 0.0]));
        let (_, s) = instance_stats(&Matrix::new(1, 2, vec![1.0, 9.0]).unwrap()).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        let (m, s) = instance_stats(&Matrix::new(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        assert_eq!((m[0], s[0]), (1.0, 1.0));
        assert!(instance_stats(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn p_zero_is_bit_identical() {
        let mut rng = Rng::new(5);
        let batch = random_batch(&mut rng, 4, 6, 3);
        let cfg = DsuConfig { p: 0.0, ..Default::default() };
        for _ in 0..20 {
            assert_eq!(dsu_perturb(&batch, &cfg, &mut rng).unwrap(), batch);
        }
    }

    #[test]
    fn single_instance_batch_only_rescales_by_eps_floor() {
        let mut rng = Rng::new(6);
        let batch = random_batch(&mut rng, 1, 8, 3);
        let cfg = DsuConfig { p: 1.0, eps_floor: 1e-6 };
        let out = dsu_perturb(&batch, &cfg, &mut rng).unwrap();
        let (mu, sigma) = instance_stats(&batch[0]).unwrap();
        for t in 0..8 {
            for c in 0..3 {
                let x = batch[0][(t, c)];
                let expect = sigma[c] * (x - mu[c]) / (sigma[c] + 1e-6) + mu[c];
                assert!((out[0][(t, c)] - expect).abs() < 1e-12);
                assert!((out[0][(t, c)] - x).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_sigma_channel_stays_finite() {
        let batch = vec![
            Matrix::new(3, 1, vec![2.0; 3]).unwrap(),
            Matrix::new(3, 1, vec![1.0, 2.0, 4.0]).unwrap(),
        ];
        let mut rng = Rng::new(1);
        let cfg = DsuConfig { p: 1.0, ..Default::default() };
        let out = dsu_perturb(&batch, &cfg, &mut rng).unwrap();
        assert!(out.iter().all(Matrix::is_finite));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let batch = vec![Matrix::zeros(2, 3), Matrix::zeros(2, 4)];
        let cfg = DsuConfig { p: 1.0, ..Default::default() };
        assert!(matches!(
            dsu_perturb(&batch, &cfg, &mut Rng::new(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn perturbation_preserves_frame_order_within_channel() {
        let mut rng = Rng::new(9);
        let batch = random_batch(&mut rng, 3, 10, 4);
        let cfg = DsuConfig { p: 1.0, ..Default::default() };
        let (out, trace) = perturb_traced(&batch, &cfg, &mut rng).unwrap();
        let trace = trace.unwrap();
        for (b, (x, y)) in batch.iter().zip(&out).enumerate() {
            for c in 0..4 {
                if trace.sigma_tilde[(b, c)] == 0.0 {
                    continue;
                }
                for t in 1..10 {
                    let before = x[(t, c)].partial_cmp(&x[(t - 1, c)]);
                    let after = y[(t, c)].partial_cmp(&y[(t - 1, c)]);
                    assert_eq!(before, after);
                }
            }
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = Rng::new(21);
        let batch = random_batch(&mut rng, 3, 5, 2);
        let cfg = DsuConfig { p: 1.0, eps_floor: 1e-6 };
        let noise = DsuNoise::sample(3, 2, &mut rng);
        let weights: Vec<Matrix> = (0..3)
            .map(|_| Matrix::from_fn(5, 2, |_, _| rng.normal()))
            .collect();
        let loss = |b: &[Matrix]| -> f64 {
            let (out, _) = apply_with_noise(b, &cfg, noise.clone()).unwrap();
            out.iter()
                .zip(&weights)
                .map(|(o, w)| crate::numerics::dot(o.as_slice(), w.as_slice()))
                .sum()
        };
        let (_, trace) = apply_with_noise(&batch, &cfg, noise.clone()).unwrap();
        let grads = backward(&trace, &batch, &weights).unwrap();
        let h = 1e-6;
        for b in 0..3 {
            for i in 0..10 {
                let mut plus = batch.clone();
                plus[b].as_mut_slice()[i] += h;
                let mut minus = batch.clone();
                minus[b].as_mut_slice()[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads[b].as_slice()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "b={b} i={i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
