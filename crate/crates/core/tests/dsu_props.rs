use proptest::prelude::*;
use sasv::dsu::{batch_stats, dsu_perturb, instance_stats, DsuConfig};
use sasv::{Matrix, Rng};

fn random_batch(rng: &mut Rng, b: usize, t: usize, c: usize) -> Vec<Matrix> {
    (0..b)
        .map(|_| Matrix::from_fn(t, c, |_, _| 2.0 * rng.normal() + 1.0))
        .collect()
}

#[test]
fn p_zero_is_bit_identical() {
    let mut rng = Rng::new(1);
    let cfg = DsuConfig { p: 0.0, ..DsuConfig::default() };
    for _ in 0..50 {
        let batch = random_batch(&mut rng, 4, 7, 5);
        let out = dsu_perturb(&batch, &cfg, &mut rng).unwrap();
        for (a, b) in out.iter().zip(&batch) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn single_instance_only_rescales_by_eps_floor() {
    let mut rng = Rng::new(2);
    let cfg = DsuConfig { p: 1.0, ..DsuConfig::default() };
    let batch = random_batch(&mut rng, 1, 9, 4);
    let out = dsu_perturb(&batch, &cfg, &mut rng).unwrap();
    let (mu, sigma) = instance_stats(&batch[0]).unwrap();
    for t in 0..9 {
        for c in 0..4 {
            let x = batch[0][(t, c)];
            let want = sigma[c] * (x - mu[c]) / (sigma[c] + cfg.eps_floor) + mu[c];
            assert!((out[0][(t, c)] - want).abs() < 1e-12);
            assert!((out[0][(t, c)] - x).abs() < 1e-5);
        }
    }
}

#[test]
fn two_frame_statistics() {
    let m = Matrix::new(2, 1, vec![0.0, 2.0]).unwrap();
    let (mu, sigma) = instance_stats(&m).unwrap();
    assert_eq!((mu[0], sigma[0]), (1.0, 1.0));
}

/// E[x̃] = x: draw ε 10k times for a fixed two-instance batch and compare
/// the per-entry sample mean with x at three standard errors. The batch has
/// close instance stds, so the clamp σ̃ ≥ 0 is practically never active.
#[test]
fn monte_carlo_expectation_preserved() {
    let first = Matrix::new(3, 2, vec![0.0, 1.0, 1.0, 2.5, 2.0, 0.5]).unwrap();
    let second = Matrix::from_fn(3, 2, |t, c| 1.1 * first[(2 - t, c)] + 0.5 * c as f64 - 0.3);
    let batch = vec![first, second];
    let stats = batch_stats(&batch).unwrap();
    for c in 0..2 {
        let lo = (0..2).map(|b| stats.sigma[(b, c)]).fold(f64::INFINITY, f64::min);
        assert!(lo > 6.0 * stats.sigma_sigma[c], "clamp would bias the mean");
    }
    let cfg = DsuConfig { p: 1.0, ..DsuConfig::default() };
    let mut rng = Rng::new(3);
    let n = 10_000;
    let mut sum = vec![vec![0.0; 6]; 2];
    let mut sq = vec![vec![0.0; 6]; 2];
    for _ in 0..n {
        let out = dsu_perturb(&batch, &cfg, &mut rng).unwrap();
        for b in 0..2 {
            for (k, v) in out[b].as_slice().iter().enumerate() {
                sum[b][k] += v;
                sq[b][k] += v * v;
            }
        }
    }
    for b in 0..2 {
        let (mu, sigma) = instance_stats(&batch[b]).unwrap();
        for k in 0..6 {
            let mean = sum[b][k] / n as f64;
            let var = (sq[b][k] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            // The eps floor shrinks (x − μ) by σ/(σ + eps); that is the exact mean.
            let c = k % 2;
            let x = batch[b].as_slice()[k];
            let expect = sigma[c] * (x - mu[c]) / (sigma[c] + cfg.eps_floor) + mu[c];
            assert!(
                (mean - expect).abs() <= 3.0 * se,
                "instance {b} entry {k}: mean {mean} vs {expect} (se {se})"
            );
        }
    }
}

#[test]
fn zero_sigma_channel_stays_finite() {
    let batch = vec![
        Matrix::new(3, 2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]).unwrap(),
        Matrix::new(3, 2, vec![4.0, 3.0, 4.0, 1.0, 4.0, 0.0]).unwrap(),
    ];
    let cfg = DsuConfig { p: 1.0, ..DsuConfig::default() };
    let mut rng = Rng::new(4);
    for _ in 0..100 {
        let out = dsu_perturb(&batch, &cfg, &mut rng).unwrap();
        assert!(out.iter().all(Matrix::is_finite));
    }
}

#[test]
fn same_seed_same_output() {
    let mut rng = Rng::new(5);
    let batch = random_batch(&mut rng, 3, 6, 4);
    let cfg = DsuConfig::default();
    let a = dsu_perturb(&batch, &cfg, &mut Rng::new(9)).unwrap();
    let b = dsu_perturb(&batch, &cfg, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn standardized_order_preserved(seed in 0u64..1000, b in 2usize..5, t in 2usize..8, c in 1usize..4) {
        let mut rng = Rng::new(seed);
        let batch = random_batch(&mut rng, b, t, c);
        let cfg = DsuConfig { p: 1.0, ..DsuConfig::default() };
        let out = dsu_perturb(&batch, &cfg, &mut rng).unwrap();
        for (x, y) in batch.iter().zip(&out) {
            for ch in 0..c {
                for t1 in 0..t {
                    for t2 in 0..t {
                        if x[(t1, ch)] < x[(t2, ch)] {
                            // σ̃ ≥ 0, so order is kept or collapsed, never flipped.
                            prop_assert!(y[(t1, ch)] <= y[(t2, ch)] + 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batch_uncertainties_nonnegative(seed in 0u64..1000, b in 1usize..6) {
        let mut rng = Rng::new(seed);
        let s = batch_stats(&random_batch(&mut rng, b, 5, 3)).unwrap();
        prop_assert!(s.sigma_mu.iter().chain(&s.sigma_sigma).all(|v| *v >= 0.0));
        prop_assert!(s.sigma.as_slice().iter().all(|v| *v >= 0.0));
        if b == 1 {
            prop_assert!(s.sigma_mu.iter().chain(&s.sigma_sigma).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn channel_mismatch_rejected(c1 in 1usize..5, c2 in 1usize..5) {
        prop_assume!(c1 != c2);
        let batch = vec![Matrix::zeros(3, c1), Matrix::zeros(3, c2)];
        let cfg = DsuConfig { p: 1.0, ..DsuConfig::default() };
        prop_assert!(dsu_perturb(&batch, &cfg, &mut Rng::new(0)).is_err());
    }
}
