//! Computes EER, minDCF and a-DCF on a labeled score list and renders a report table.

use sasv::metrics::{
    a_dcf, det_sweep, eer_with, min_dcf, render_report, ADcfParams, Classes, DcfParams,
    LabeledScores, ReportRow, TableFormat,
};
use sasv::{Rng, TrialLabel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = Rng::new(21);
    let (mut scores, mut labels) = (vec![], vec![]);
    for (label, mean, n) in [(TrialLabel::Target, 2.0, 200), (TrialLabel::Nontarget, -1.0, 400), (TrialLabel::Spoof, 0.5, 300)] {
        for _ in 0..n {
            scores.push(mean + rng.normal());
            labels.push(label);
        }
    }
    let s = LabeledScores::new(scores, labels)?;

    for (name, classes) in [("SV", Classes::SV), ("SASV", Classes::SASV)] {
        println!("{name}-EER {:.2}%", 100.0 * eer_with(&s, classes)?);
    }
    let (d, tau) = min_dcf(&s, Classes::SV, &DcfParams::default())?;
    println!("minDCF {d:.4} at {tau:+.3}");
    let curve = det_sweep(&s, Classes::SV)?;
    println!("DET sweep has {} operating points", curve.len());

    let (adcf, _) = a_dcf(&s, &ADcfParams::default())?;
    let row = ReportRow {
        cm_model: "synthetic".into(),
        cm_calibrated_on: "-".into(),
        asv_model: "synthetic".into(),
        asv_calibrated_on: "-".into(),
        fusion_on: "-".into(),
        a_dcf: adcf,
    };
    print!("{}", render_report(&[row], TableFormat::Text));
    Ok(())
}
