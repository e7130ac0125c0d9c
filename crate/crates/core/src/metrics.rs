//! Detection metrics: threshold sweeps, EER, minDCF and the three-class a-DCF.
//!
//! A trial is accepted iff `score > threshold`; ties are rejected. The sweep
//! visits `-∞` (accept everything) and then every distinct score, which
//! enumerates every operating point a single threshold can reach.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{ScoreSet, TrialLabel, TrialSet};

/// Which labels count as positive and negative for a binary metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classes {
    pub positive: &'static [TrialLabel],
    pub negative: &'static [TrialLabel],
}

impl Classes {
    /// Speaker verification: target vs nontarget, spoofs ignored.
    pub const SV: Classes = Classes {
        positive: &[TrialLabel::Target],
        negative: &[TrialLabel::Nontarget],
    };
    /// Countermeasure: bona fide (target or nontarget) vs spoof.
    pub const CM: Classes = Classes {
        positive: &[TrialLabel::Target, TrialLabel::Nontarget],
        negative: &[TrialLabel::Spoof],
    };
    /// Spoofing-robust verification: target vs everything else.
    pub const SASV: Classes = Classes {
        positive: &[TrialLabel::Target],
        negative: &[TrialLabel::Nontarget, TrialLabel::Spoof],
    };
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<TrialLabel>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<TrialLabel>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        Ok(Self { scores, labels })
    }

    /// Joins a score file with a trial list; every trial must be scored.
    pub fn join(scores: &ScoreSet, trials: &TrialSet) -> Result<Self> {
        let mut out = Self::default();
        let mut missing = Vec::new();
        for t in trials.trials() {
            match scores.get(&t.trial_id) {
                Some(s) => {
                    out.scores.push(s);
                    out.labels.push(t.label);
                }
                None => missing.push(t.trial_id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::KeyMismatch(format!(
                "{} trials have no score (first: {})",
                missing.len(),
                missing[0]
            )));
        }
        Ok(out)
    }

    pub fn of_class(&self, labels: &[TrialLabel]) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| labels.contains(l))
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn split(&self, classes: Classes) -> (Vec<f64>, Vec<f64>) {
        (self.of_class(classes.positive), self.of_class(classes.negative))
    }

    /// Applies `f` to every score.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            scores: self.scores.iter().map(|&s| f(s)).collect(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// For every threshold of the sweep, how many scores of each group are rejected.
fn sweep_rejections(groups: &[&[f64]]) -> Vec<(f64, Vec<usize>)> {
    let mut all: Vec<(f64, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, s)| s.iter().map(move |&v| (v, g)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut counts = vec![0usize; groups.len()];
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push((f64::NEG_INFINITY, counts.clone()));
    let mut i = 0;
    while i < all.len() {
        let tau = all[i].0;
        while i < all.len() && all[i].0 == tau {
            counts[all[i].1] += 1;
            i += 1;
        }
        out.push((tau, counts.clone()));
    }
    out
}

fn require(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        Err(Error::Empty(format!("no {what} scores")))
    } else {
        Ok(())
    }
}

/// Miss and false-alarm rates at every distinct threshold, in increasing threshold order.
pub fn det_curve(positives: &[f64], negatives: &[f64]) -> Result<Vec<DetPoint>> {
    require(positives, "positive")?;
    require(negatives, "negative")?;
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok(sweep_rejections(&[positives, negatives])
        .into_iter()
        .map(|(threshold, c)| DetPoint {
            threshold,
            p_miss: c[0] as f64 / np,
            p_fa: (negatives.len() - c[1]) as f64 / nn,
        })
        .collect())
}

pub fn det_sweep(s: &LabeledScores, classes: Classes) -> Result<Vec<DetPoint>> {
    let (p, n) = s.split(classes);
    det_curve(&p, &n)
}

/// EER of a DET curve, linearly interpolated between the two sweep points
/// that bracket the `P_miss = P_fa` crossing.
pub fn eer_from_curve(curve: &[DetPoint]) -> Result<f64> {
    let i = curve
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .ok_or_else(|| Error::Degenerate("DET curve never crosses".into()))?;
    let hi = curve[i];
    if hi.p_miss == hi.p_fa || i == 0 {
        return Ok(hi.p_miss);
    }
    let lo = curve[i - 1];
    let alpha = (lo.p_fa - lo.p_miss) / ((hi.p_miss - lo.p_miss) + (lo.p_fa - hi.p_fa));
    Ok(lo.p_miss + alpha * (hi.p_miss - lo.p_miss))
}

pub fn eer_from_scores(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    eer_from_curve(&det_curve(positives, negatives)?)
}

/// Target vs nontarget EER.
pub fn eer(s: &LabeledScores) -> Result<f64> {
    eer_with(s, Classes::SV)
}

pub fn eer_with(s: &LabeledScores, classes: Classes) -> Result<f64> {
    eer_from_curve(&det_sweep(s, classes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config("p_target must lie in (0, 1)".into()));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config("DCF costs must be > 0".into()));
        }
        Ok(())
    }
}

/// Normalized minimum DCF and the threshold attaining it.
pub fn min_dcf_from_scores(
    positives: &[f64],
    negatives: &[f64],
    params: &DcfParams,
) -> Result<(f64, f64)> {
    params.validate()?;
    let w_miss = params.c_miss * params.p_target;
    let w_fa = params.c_fa * (1.0 - params.p_target);
    let norm = w_miss.min(w_fa);
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for p in det_curve(positives, negatives)? {
        let c = (w_miss * p.p_miss + w_fa * p.p_fa) / norm;
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok(best)
}

pub fn min_dcf(s: &LabeledScores, classes: Classes, params: &DcfParams) -> Result<(f64, f64)> {
    let (p, n) = s.split(classes);
    min_dcf_from_scores(&p, &n, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ADcfParams {
    pub pi_target: f64,
    pub pi_nontarget: f64,
    pub pi_spoof: f64,
    pub c_miss: f64,
    pub c_fa_nontarget: f64,
    pub c_fa_spoof: f64,
}

impl Default for ADcfParams {
    fn default() -> Self {
        Self {
            pi_target: 0.9405,
            pi_nontarget: 0.0095,
            pi_spoof: 0.05,
            c_miss: 1.0,
            c_fa_nontarget: 10.0,
            c_fa_spoof: 10.0,
        }
    }
}

impl ADcfParams {
    pub fn validate(&self) -> Result<()> {
        let priors = [self.pi_target, self.pi_nontarget, self.pi_spoof];
        if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("a-DCF priors must be a probability simplex".into()));
        }
        if [self.c_miss, self.c_fa_nontarget, self.c_fa_spoof]
            .iter()
            .any(|c| !(*c > 0.0))
        {
            return Err(Error::Config("a-DCF costs must be > 0".into()));
        }
        Ok(())
    }

    fn weights(&self) -> (f64, f64, f64) {
        (
            self.c_miss * self.pi_target,
            self.c_fa_nontarget * self.pi_nontarget,
            self.c_fa_spoof * self.pi_spoof,
        )
    }

    /// Cost of the better of accept-all and reject-all.
    pub fn uninformed_cost(&self) -> f64 {
        let (m, n, s) = self.weights();
        m.min(n + s)
    }
}

/// Normalized minimum a-DCF over a single shared threshold, with its argmin.
pub fn a_dcf_from_scores(
    targets: &[f64],
    nontargets: &[f64],
    spoofs: &[f64],
    params: &ADcfParams,
) -> Result<(f64, f64)> {
    params.validate()?;
    require(targets, "target")?;
    require(nontargets, "nontarget")?;
    require(spoofs, "spoof")?;
    let (w_miss, w_non, w_spf) = params.weights();
    let norm = params.uninformed_cost();
    let (nt, nn, ns) = (
        targets.len() as f64,
        nontargets.len() as f64,
        spoofs.len() as f64,
    );
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for (tau, c) in sweep_rejections(&[targets, nontargets, spoofs]) {
        let p_miss = c[0] as f64 / nt;
        let p_fa_non = (nontargets.len() - c[1]) as f64 / nn;
        let p_fa_spf = (spoofs.len() - c[2]) as f64 / ns;
        let cost = (w_miss * p_miss + w_non * p_fa_non + w_spf * p_fa_spf) / norm;
        if cost < best.0 {
            best = (cost, tau);
        }
    }
    Ok(best)
}

pub fn a_dcf(s: &LabeledScores, params: &ADcfParams) -> Result<(f64, f64)> {
    a_dcf_from_scores(
        &s.of_class(&[TrialLabel::Target]),
        &s.of_class(&[TrialLabel::Nontarget]),
        &s.of_class(&[TrialLabel::Spoof]),
        params,
    )
}

/// One line of a fusion/calibration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cm_model: String,
    pub cm_calibrated_on: String,
    pub asv_model: String,
    pub asv_calibrated_on: String,
    pub fusion_on: String,
    pub a_dcf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableFormat {
    #[default]
    Text,
    Tsv,
}

pub const REPORT_HEADER: [&str; 6] = [
    "CM model",
    "CM calibrate on",
    "ASV model",
    "ASV calibrate on",
    "fusion/cali. on",
    "a-DCF",
];

/// Renders rows as an aligned text table or as TSV; a-DCF always has five decimals.
pub fn render_report(rows: &[ReportRow], format: TableFormat) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.cm_model.clone(),
                r.cm_calibrated_on.clone(),
                r.asv_model.clone(),
                r.asv_calibrated_on.clone(),
                r.fusion_on.clone(),
                format!("{:.5}", r.a_dcf),
            ]
        })
        .collect();
    render_table(&REPORT_HEADER, &cells, format)
}

pub fn render_table<const N: usize>(
    header: &[&str; N],
    rows: &[[String; N]],
    format: TableFormat,
) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Tsv => {
            out.push_str(&header.join("\t"));
            out.push('\n');
            for r in rows {
                out.push_str(&r.join("\t"));
                out.push('\n');
            }
        }
        TableFormat::Text => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for r in rows {
                for (w, c) in widths.iter_mut().zip(r) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let line = |cells: Vec<&str>| -> String {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect::<Vec<_>>()
                    .join(" | ")
                    .trim_end()
                    .to_string()
            };
            out.push_str(&line(header.to_vec()));
            out.push('\n');
            out.push_str(
                &widths
                    .iter()
                    .map(|w| "-".repeat(*w))
                    .collect::<Vec<_>>()
                    .join("-+-"),
            );
            out.push('\n');
            for r in rows {
                out.push_str(&line(r.iter().map(String::as_str).collect()));
                out.push('\n');
            }
        }
    }
    out
}

impl fmt::Display for ReportRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_report(std::slice::from_ref(self), TableFormat::Text))
    }
}
