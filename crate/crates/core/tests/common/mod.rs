//! Shared test fixtures.
//!
//! The metric oracles enumerate thresholds straight from the definitions:
//! accept iff score > τ, τ ranging over −∞ and every distinct score.

#![allow(dead_code)]

use sasv::calibration::{fit_calibration, fit_joint_fusion, FusionStrategy, DEFAULT_PRIOR};
use sasv::metrics::{a_dcf_from_scores, ADcfParams, DcfParams};
use sasv::Rng;

pub struct ThreeClass {
    pub tar: Vec<f64>,
    pub non: Vec<f64>,
    pub spf: Vec<f64>,
}

pub fn random_set(rng: &mut Rng) -> ThreeClass {
    let n = 3 + (rng.next_u64() % 198) as usize;
    // Coarse grids force ties; fine ones keep scores distinct.
    let grid = [0.0, 0.5, 0.1, 1e-3][(rng.next_u64() % 4) as usize];
    let q = |v: f64| if grid == 0.0 { v } else { (v / grid).round() * grid };
    let (mut tar, mut non, mut spf) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        match i % 3 {
            0 => tar.push(q(1.0 + rng.normal())),
            1 => non.push(q(rng.normal())),
            _ => spf.push(q(0.5 + 1.5 * rng.normal())),
        }
    }
    ThreeClass { tar, non, spf }
}

pub fn thresholds(groups: &[&[f64]]) -> Vec<f64> {
    let mut t: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.insert(0, f64::NEG_INFINITY);
    t
}

pub fn rejected(scores: &[f64], tau: f64) -> usize {
    scores.iter().filter(|&&s| !(s > tau)).count()
}

/// EER in exact integer arithmetic, rounded once at the end.
pub fn oracle_eer(pos: &[f64], neg: &[f64]) -> f64 {
    let (np, nn) = (pos.len() as i128, neg.len() as i128);
    let pts: Vec<(i128, i128)> = thresholds(&[pos, neg])
        .into_iter()
        .map(|t| (rejected(pos, t) as i128, nn - rejected(neg, t) as i128))
        .collect();
    // P_miss ≥ P_fa  ⇔  miss·nn ≥ fa·np
    let i = pts.iter().position(|&(m, f)| m * nn >= f * np).unwrap();
    let (m1, f1) = pts[i];
    if i == 0 || m1 * nn == f1 * np {
        return m1 as f64 / np as f64;
    }
    let (m0, f0) = pts[i - 1];
    // Segment from (m0/np, f0/nn) to (m1/np, f1/nn) meets P_miss = P_fa at
    // m0/np + α(m1 − m0)/np with α = A/B, both scaled by np·nn.
    let a = f0 * np - m0 * nn;
    let b = (m1 - m0) * nn + (f0 - f1) * np;
    let num = m0 * b + a * (m1 - m0);
    let den = np * b;
    num as f64 / den as f64
}

pub fn oracle_min_dcf(pos: &[f64], neg: &[f64], p: &DcfParams) -> (f64, f64) {
    let w_miss = p.c_miss * p.p_target;
    let w_fa = p.c_fa * (1.0 - p.p_target);
    let norm = w_miss.min(w_fa);
    let mut best = (f64::INFINITY, f64::NAN);
    for t in thresholds(&[pos, neg]) {
        let pm = rejected(pos, t) as f64 / pos.len() as f64;
        let pf = (neg.len() - rejected(neg, t)) as f64 / neg.len() as f64;
        let c = (w_miss * pm + w_fa * pf) / norm;
        if c < best.0 {
            best = (c, t);
        }
    }
    best
}

pub fn oracle_a_dcf(s: &ThreeClass, p: &ADcfParams) -> (f64, f64) {
    let w = (
        p.c_miss * p.pi_target,
        p.c_fa_nontarget * p.pi_nontarget,
        p.c_fa_spoof * p.pi_spoof,
    );
    let norm = w.0.min(w.1 + w.2);
    let mut best = (f64::INFINITY, f64::NAN);
    for t in thresholds(&[&s.tar, &s.non, &s.spf]) {
        let pm = rejected(&s.tar, t) as f64 / s.tar.len() as f64;
        let pn = (s.non.len() - rejected(&s.non, t)) as f64 / s.non.len() as f64;
        let ps = (s.spf.len() - rejected(&s.spf, t)) as f64 / s.spf.len() as f64;
        let c = (w.0 * pm + w.1 * pn + w.2 * ps) / norm;
        if c < best.0 {
            best = (c, t);
        }
    }
    best
}

pub fn random_dcf(rng: &mut Rng) -> DcfParams {
    DcfParams {
        p_target: rng.uniform_range(0.01, 0.99),
        c_miss: rng.uniform_range(0.1, 10.0),
        c_fa: rng.uniform_range(0.1, 10.0),
    }
}

pub fn random_adcf(rng: &mut Rng) -> ADcfParams {
    let a = rng.uniform_range(0.05, 1.0);
    let b = rng.uniform_range(0.05, 1.0);
    let c = rng.uniform_range(0.05, 1.0);
    let s = a + b + c;
    ADcfParams {
        pi_target: a / s,
        pi_nontarget: b / s,
        pi_spoof: 1.0 - a / s - b / s,
        c_miss: rng.uniform_range(0.5, 10.0),
        c_fa_nontarget: rng.uniform_range(0.5, 10.0),
        c_fa_spoof: rng.uniform_range(0.5, 10.0),
    }
}

pub fn monotone_maps() -> Vec<(&'static str, Box<dyn Fn(f64) -> f64>)> {
    vec![
        ("affine", Box::new(|x| 3.0 * x - 7.0)),
        ("shrink", Box::new(|x| 0.25 * x + 100.0)),
        ("exp", Box::new(|x: f64| (x / 2.0).exp())),
        ("cubic", Box::new(|x: f64| x * x * x + x)),
        ("sinh", Box::new(f64::sinh)),
        ("wiggle", Box::new(|x: f64| x + 0.3 * x.sin())),
        ("logistic", Box::new(|x: f64| 1.0 / (1.0 + (-x / 3.0).exp()))),
        ("exp2", Box::new(f64::exp2)),
        ("cbrt", Box::new(f64::cbrt)),
        ("atan", Box::new(|x: f64| (x / 4.0).atan())),
    ]
}

pub struct SasvSet {
    pub asv: Vec<f64>,
    pub cm: Vec<f64>,
    /// 0 target, 1 nontarget, 2 spoof.
    pub label: Vec<u8>,
}

/// ASV separates targets from nontargets; CM separates bona fide from spoofs.
pub fn sasv_set(seed: u64, n: usize) -> SasvSet {
    let mut rng = Rng::new(seed);
    let mut s = SasvSet {
        asv: vec![],
        cm: vec![],
        label: vec![],
    };
    let scale = 1.0 + 0.3 * (seed % 4) as f64;
    for i in 0..3 * n {
        let class = (i % 3) as u8;
        let (ma, mc) = match class {
            0 => (2.0, 1.5),
            1 => (-2.0, 1.5),
            _ => (1.5, -2.0),
        };
        s.asv.push(scale * (ma + rng.normal()) - 0.7);
        s.cm.push(0.5 * (mc + rng.normal()) + 3.0);
        s.label.push(class);
    }
    s
}

pub fn by_class(scores: &[f64], labels: &[u8], class: u8) -> Vec<f64> {
    scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == class)
        .map(|(s, _)| *s)
        .collect()
}

pub fn min_adcf(scores: &[f64], labels: &[u8]) -> f64 {
    a_dcf_from_scores(
        &by_class(scores, labels, 0),
        &by_class(scores, labels, 1),
        &by_class(scores, labels, 2),
        &ADcfParams::default(),
    )
    .unwrap()
    .0
}

pub fn strategies(s: &SasvSet) -> (FusionStrategy, FusionStrategy) {
    let y_sasv: Vec<bool> = s.label.iter().map(|l| *l == 0).collect();
    let joint = fit_joint_fusion(&s.asv, &s.cm, &y_sasv, DEFAULT_PRIOR).unwrap();

    let (sv_s, sv_y): (Vec<f64>, Vec<bool>) = s
        .asv
        .iter()
        .zip(&s.label)
        .filter(|(_, l)| **l != 2)
        .map(|(v, l)| (*v, *l == 0))
        .unzip();
    let cal_asv = fit_calibration(&sv_s, &sv_y, DEFAULT_PRIOR).unwrap();
    let cm_y: Vec<bool> = s.label.iter().map(|l| *l != 2).collect();
    let cal_cm = fit_calibration(&s.cm, &cm_y, DEFAULT_PRIOR).unwrap();
    let a: Vec<f64> = s.asv.iter().map(|v| cal_asv.apply(*v)).collect();
    let c: Vec<f64> = s.cm.iter().map(|v| cal_cm.apply(*v)).collect();
    let pre_joint = fit_joint_fusion(&a, &c, &y_sasv, DEFAULT_PRIOR).unwrap();
    (
        FusionStrategy::Joint(joint),
        FusionStrategy::PreCalibrated {
            asv: cal_asv,
            cm: cal_cm,
            joint: pre_joint,
        },
    )
}

pub fn fused(s: &SasvSet, f: &FusionStrategy) -> Vec<f64> {
    s.asv.iter().zip(&s.cm).map(|(a, c)| f.fuse(*a, *c)).collect()
}
