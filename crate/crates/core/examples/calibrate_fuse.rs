//! Calibrates ASV and CM scores and fuses them into one SASV score, both ways.

use sasv::calibration::{cllr, fit_calibration, fit_joint_fusion, FusionStrategy, DEFAULT_PRIOR};
use sasv::metrics::{a_dcf, LabeledScores};
use sasv::{Rng, TrialLabel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Target, nontarget and spoof trials: ASV separates speakers, CM flags spoofs.
    let mut rng = Rng::new(11);
    let (mut asv, mut cm, mut labels) = (vec![], vec![], vec![]);
    for i in 0..3000 {
        let (label, a, c) = match i % 3 {
            0 => (TrialLabel::Target, 3.0, 2.0),
            1 => (TrialLabel::Nontarget, 0.0, 2.0),
            _ => (TrialLabel::Spoof, 2.5, -1.0),
        };
        asv.push(0.3 * (a + rng.normal()) + 1.0);
        cm.push(4.0 * (c + 1.5 * rng.normal()));
        labels.push(label);
    }

    let sv: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != TrialLabel::Spoof).collect();
    let pick = |v: &[f64], idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| v[i]).collect() };
    let asv_y: Vec<bool> = sv.iter().map(|&i| labels[i] == TrialLabel::Target).collect();
    let cm_y: Vec<bool> = labels.iter().map(|l| *l != TrialLabel::Spoof).collect();
    let ca = fit_calibration(&pick(&asv, &sv), &asv_y, DEFAULT_PRIOR)?;
    let cc = fit_calibration(&cm, &cm_y, DEFAULT_PRIOR)?;
    let cal_asv: Vec<f64> = pick(&asv, &sv).iter().map(|s| ca.apply(*s)).collect();
    println!("ASV Cllr {:.3} -> {:.3}", cllr(&pick(&asv, &sv), &asv_y)?, cllr(&cal_asv, &asv_y)?);
    println!("CM  Cllr {:.3} -> {:.3}", cllr(&cm, &cm_y)?, cllr(&cm.iter().map(|s| cc.apply(*s)).collect::<Vec<_>>(), &cm_y)?);

    let y: Vec<bool> = labels.iter().map(|l| *l == TrialLabel::Target).collect();
    let joint = FusionStrategy::Joint(fit_joint_fusion(&asv, &cm, &y, DEFAULT_PRIOR)?);
    let ca_all: Vec<f64> = asv.iter().map(|s| ca.apply(*s)).collect();
    let cc_all: Vec<f64> = cm.iter().map(|s| cc.apply(*s)).collect();
    let pre = FusionStrategy::PreCalibrated { asv: ca, cm: cc, joint: fit_joint_fusion(&ca_all, &cc_all, &y, DEFAULT_PRIOR)? };

    let report = |name: &str, s: Vec<f64>| -> Result<(), Box<dyn std::error::Error>> {
        let (d, tau) = a_dcf(&LabeledScores::new(s, labels.clone())?, &Default::default())?;
        println!("{name:<14} min a-DCF {d:.5} at threshold {tau:+.3}");
        Ok(())
    };
    report("ASV only", asv.clone())?;
    report("CM only", cm.clone())?;
    for (name, f) in [("joint", &joint), ("pre-calibrated", &pre)] {
        report(name, asv.iter().zip(&cm).map(|(a, c)| f.fuse(*a, *c)).collect())?;
    }
    Ok(())
}
