mod common;

use sasv::calibration::{cllr, fit_calibration, fit_logistic, DEFAULT_PRIOR};
use sasv::Rng;

use common::{fused, min_adcf, sasv_set, strategies};

#[test]
fn pre_calibration_does_not_change_joint_fusion() {
    for seed in 0..12 {
        let s = sasv_set(seed, 300);
        let (joint, pre) = strategies(&s);
        let fj = fused(&s, &joint);
        let fp = fused(&s, &pre);
        for (a, b) in fj.iter().zip(&fp) {
            assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
        }
        let (dj, dp) = (min_adcf(&fj, &s.label), min_adcf(&fp, &s.label));
        assert!((dj - dp).abs() <= 1e-6, "seed {seed}: {dj} vs {dp}");
    }
}

#[test]
fn fusion_beats_each_single_system() {
    for seed in 0..10 {
        let s = sasv_set(100 + seed, 400);
        let (joint, _) = strategies(&s);
        let f = min_adcf(&fused(&s, &joint), &s.label);
        let a = min_adcf(&s.asv, &s.label);
        let c = min_adcf(&s.cm, &s.label);
        assert!(f < a.min(c), "seed {seed}: fused {f}, asv {a}, cm {c}");
    }
}

#[test]
fn calibration_improves_cllr_of_shifted_scores() {
    let mut rng = Rng::new(4);
    let mut s = vec![];
    let mut y = vec![];
    for i in 0..2000 {
        let pos = i % 2 == 0;
        let llr = if pos { 2.0 } else { -2.0 } + 2.0 * rng.normal();
        // A badly scaled and shifted llr.
        s.push(0.2 * llr + 5.0);
        y.push(pos);
    }
    let c = fit_calibration(&s, &y, DEFAULT_PRIOR).unwrap();
    let cal: Vec<f64> = s.iter().map(|v| c.apply(*v)).collect();
    let before = cllr(&s, &y).unwrap();
    let after = cllr(&cal, &y).unwrap();
    assert!(after < before && after < 1.0, "{before} -> {after}");
    // Class-conditional Gaussians with shared variance have llr = 2·x here.
    assert!((c.scale - 5.0).abs() < 0.5, "scale {}", c.scale);
    assert!((c.bias + 25.0).abs() < 2.5, "bias {}", c.bias);
}

#[test]
fn logistic_fit_likelihood_never_decreases() {
    for seed in 0..10 {
        let s = sasv_set(200 + seed, 100);
        let x: Vec<Vec<f64>> = s.asv.iter().zip(&s.cm).map(|(a, c)| vec![*a, *c]).collect();
        let y: Vec<bool> = s.label.iter().map(|l| *l == 0).collect();
        let fit = fit_logistic(&x, &y, 0.3).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "seed {seed}: {:?}", fit.objective_trace);
        }
    }
}

#[test]
fn separable_and_reversed_inputs_are_rejected() {
    let s = [0.0, 1.0, 2.0, 3.0];
    assert!(fit_calibration(&s, &[false, false, true, true], DEFAULT_PRIOR).is_err());
    let noisy = [0.0, 1.0, 2.0, 3.0, 1.5, 0.5];
    let rev = [true, true, false, false, false, true];
    assert!(fit_calibration(&noisy, &rev, DEFAULT_PRIOR).is_err());
    assert!(fit_calibration(&[1.0, 1.0], &[true, false], DEFAULT_PRIOR).is_err());
}
