//! The `sasv` command line: `synth → train → score → calibrate → fuse → eval`,
//! plus `gradcheck` and `replay`.
//!
//! Data goes to stdout. Failures print one line to stderr,
//! `sasv: error[<kind>]: <message>`, and exit with status 1; usage errors
//! exit with status 2. Commands that write files also write a
//! `<output>.run.json` manifest (or `run.json` inside an output directory)
//! from which `sasv replay` re-runs them.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    binary_labels, fit_calibration, fit_joint_fusion, fuse_scores, sasv_training_data,
    write_model, AffineCalibration, FusionStrategy, ModelFile, DEFAULT_PRIOR,
};
use crate::dsu::DsuConfig;
use crate::error::{Error, Result};
use crate::losses::{cosine_score, CohortEmbeddings, Head};
use crate::metrics::{
    a_dcf, eer_with, min_dcf, render_report, render_table, ADcfParams, Classes, DcfParams,
    LabeledScores, ReportRow, TableFormat,
};
use crate::mhfa::{MhfaConfig, DEFAULT_COMPRESSION_DIM, DEFAULT_EMBED_DIM, DEFAULT_HEADS};
use crate::model::{read_checkpoint, write_checkpoint};
use crate::protocol::{parse_trials, read_scores, write_scores, ScoreSet, TrialLabel};
use crate::synthgen::{read_manifest, synth_corpus, SynthConfig};
use crate::trainer::{grad_check, grad_check_config, train_with, Corpus, Task, TrainConfig, TRAIN_LOG_HEADER};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "SASV_THREADS";

/// Gradient checks pass below this relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "sasv", version, about = "Spoofing-robust speaker verification back-end toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic layered-feature corpus with trials.
    Synth(SynthArgs),
    /// Train an MHFA back-end (CM or speaker head).
    Train(TrainArgs),
    /// Score a trial list with a trained back-end.
    Score(ScoreArgs),
    /// Fit an affine calibration to one score file.
    Calibrate(CalibrateArgs),
    /// Fuse ASV and CM scores into SASV scores.
    Fuse(FuseArgs),
    /// Compute EER, minDCF or a-DCF.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-run a command from its run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Output directory (features/, manifest.txt, trials.txt).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub num_speakers: Option<usize>,
    #[arg(long)]
    pub utts_per_speaker: Option<usize>,
    #[arg(long)]
    pub spoof_fraction: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub speaker_scale: Option<f64>,
    #[arg(long)]
    pub artifact_scale: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub artifact_layer: Option<usize>,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            num_speakers: self.num_speakers.unwrap_or(d.num_speakers),
            utts_per_speaker: self.utts_per_speaker.unwrap_or(d.utts_per_speaker),
            spoof_fraction: self.spoof_fraction.unwrap_or(d.spoof_fraction),
            num_layers: self.layers.unwrap_or(d.num_layers),
            num_frames: self.frames.unwrap_or(d.num_frames),
            dim: self.dim.unwrap_or(d.dim),
            speaker_scale: self.speaker_scale.unwrap_or(d.speaker_scale),
            spoof_artifact_scale: self.artifact_scale.unwrap_or(d.spoof_artifact_scale),
            noise_scale: self.noise_scale.unwrap_or(d.noise_scale),
            artifact_layer: self.artifact_layer.unwrap_or(d.artifact_layer),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum TaskArg {
    #[value(name = "cm_bce")]
    CmBce,
    #[value(name = "asv_aam")]
    AsvAam,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::CmBce => Task::CmBce,
            TaskArg::AsvAam => Task::AsvAam,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Corpus manifest (`utt_id speaker_id bonafide|spoof path`).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to write (MHFA1 format).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "cm_bce")]
    pub task: TaskArg,
    /// Also write the training log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5.0e-4)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 1.0e-5)]
    pub final_lr: f64,
    #[arg(long, default_value_t = 2)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 1.0e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dev_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Enable DSU on the value stream (CM training only).
    #[arg(long)]
    pub dsu: bool,
    #[arg(long, default_value_t = 0.5)]
    pub dsu_p: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub dsu_eps: f64,
    #[arg(long, default_value_t = 0.2)]
    pub aam_margin: f64,
    #[arg(long, default_value_t = 30.0)]
    pub aam_scale: f64,
    #[arg(long, default_value_t = DEFAULT_HEADS)]
    pub heads: usize,
    #[arg(long, default_value_t = DEFAULT_COMPRESSION_DIM)]
    pub compression_dim: usize,
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    pub embed_dim: usize,
    /// Frontend learning-rate factor; rejected, as no frontend is trained.
    #[arg(long)]
    pub frontend_lr_scale: Option<f64>,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            final_lr: self.final_lr,
            warmup_epochs: self.warmup_epochs,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            task: self.task.into(),
            dsu: self.dsu.then_some(DsuConfig {
                p: self.dsu_p,
                eps_floor: self.dsu_eps,
            }),
            aam_margin: self.aam_margin,
            aam_scale: self.aam_scale,
            dev_fraction: self.dev_fraction,
            seed: self.seed,
            frontend_lr_scale: self.frontend_lr_scale,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest resolving the trial utterance ids.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cohort manifest; enables adaptive s-norm of cosine scores.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Cohort scores kept per side (default min(200, cohort size)).
    #[arg(long)]
    pub snorm_topk: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum KindArg {
    Asv,
    Cm,
}

#[derive(Args, Debug, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    /// `asv`: target vs nontarget. `cm`: bona fide vs spoof.
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Model file to write (`a b`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PRIOR)]
    pub prior: f64,
    /// Also write calibrated scores here.
    #[arg(long)]
    pub apply: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum StrategyArg {
    /// Calibrate each system, then fuse jointly.
    Pre,
    /// Fuse the raw scores jointly.
    Joint,
}

#[derive(Args, Debug, Serialize)]
pub struct FuseArgs {
    #[arg(long)]
    pub asv: PathBuf,
    #[arg(long)]
    pub cm: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long, value_enum, default_value = "joint")]
    pub strategy: StrategyArg,
    /// Fused score file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the joint fusion model (`a_asv a_cm b`) here.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Fit and apply an affine calibration to the fused scores.
    #[arg(long)]
    pub final_calibration: bool,
    #[arg(long, default_value_t = DEFAULT_PRIOR)]
    pub prior: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum MetricArg {
    Eer,
    Mindcf,
    Adcf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ProtocolArg {
    Sv,
    Cm,
    Sasv,
}

impl ProtocolArg {
    fn classes(self) -> Classes {
        match self {
            ProtocolArg::Sv => Classes::SV,
            ProtocolArg::Cm => Classes::CM,
            ProtocolArg::Sasv => Classes::SASV,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ProtocolArg::Sv => "sv",
            ProtocolArg::Cm => "cm",
            ProtocolArg::Sasv => "sasv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum FormatArg {
    Text,
    Tsv,
}

impl From<FormatArg> for TableFormat {
    fn from(f: FormatArg) -> TableFormat {
        match f {
            FormatArg::Text => TableFormat::Text,
            FormatArg::Tsv => TableFormat::Tsv,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    /// Positive/negative classes for EER and minDCF.
    #[arg(long, value_enum, default_value = "sv")]
    pub protocol: ProtocolArg,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    #[arg(long, default_value_t = 0.05)]
    pub p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_fa: f64,
    #[arg(long, default_value_t = 0.9405)]
    pub adcf_pi_tar: f64,
    #[arg(long, default_value_t = 0.0095)]
    pub adcf_pi_non: f64,
    #[arg(long, default_value_t = 0.05)]
    pub adcf_pi_spf: f64,
    #[arg(long, default_value_t = 1.0)]
    pub adcf_c_miss: f64,
    #[arg(long, default_value_t = 10.0)]
    pub adcf_c_fa_non: f64,
    #[arg(long, default_value_t = 10.0)]
    pub adcf_c_fa_spf: f64,
    /// Report row labels for `--metric adcf`.
    #[arg(long, default_value = "-")]
    pub cm_model: String,
    #[arg(long, default_value = "-")]
    pub cm_calibrated_on: String,
    #[arg(long, default_value = "-")]
    pub asv_model: String,
    #[arg(long, default_value = "-")]
    pub asv_calibrated_on: String,
    #[arg(long, default_value = "-")]
    pub fusion_on: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DsuModeArg {
    On,
    Off,
    Both,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Restrict to one task; both by default.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, value_enum, default_value = "both")]
    pub dsu: DsuModeArg,
}

#[derive(Args, Debug, Serialize)]
pub struct ReplayArgs {
    /// A `.run.json` file written by an earlier command.
    pub manifest: PathBuf,
}

/// Provenance written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })
    }
}

/// `<file>.run.json` for a file output.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

struct Ctx<'a> {
    argv: &'a [String],
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn record(
        &self,
        at: &Path,
        subcommand: &str,
        config: impl Serialize,
        inputs: &[&Path],
        outputs: &[&Path],
        seed: Option<u64>,
    ) -> Result<()> {
        RunManifest {
            subcommand: subcommand.into(),
            argv: self.argv.to_vec(),
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
        }
        .write(at)
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut ctx = Ctx {
        argv: &argv,
        out,
        err,
    };
    match run(cli.command, &mut ctx) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(ctx.err, "sasv: error[{}]: {msg}", e.kind());
            1
        }
    }
}

/// Re-runs the command recorded in a run manifest.
pub fn replay(manifest: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let m = RunManifest::read(manifest)?;
    if m.argv.is_empty() {
        return Err(Error::Format {
            path: manifest.into(),
            msg: "empty argv".into(),
        });
    }
    Ok(dispatch(m.argv, out, err))
}

/// Sizes the global thread pool from `SASV_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(command: Command, ctx: &mut Ctx<'_>) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(a, ctx),
        Command::Train(a) => train(a, ctx),
        Command::Score(a) => score(a, ctx),
        Command::Calibrate(a) => calibrate(a, ctx),
        Command::Fuse(a) => fuse(a, ctx),
        Command::Eval(a) => eval(a, ctx),
        Command::Gradcheck(a) => gradcheck(a, ctx),
        Command::Replay(a) => replay(&a.manifest, ctx.out, ctx.err),
    }
}

fn synth(a: SynthArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let cfg = a.config();
    let manifest = synth_corpus(&cfg, &a.out)?;
    let trials = parse_trials(a.out.join("trials.txt"))?;
    ctx.record(&a.out.join("run.json"), "synth", &cfg, &[], &[&a.out], Some(cfg.seed))?;
    writeln!(
        ctx.out,
        "utterances {} spoof {} trials {} (target {} nontarget {} spoof {})",
        manifest.len(),
        manifest.spoof_count(),
        trials.len(),
        trials.count(TrialLabel::Target),
        trials.count(TrialLabel::Nontarget),
        trials.count(TrialLabel::Spoof),
    )
    .map_err(stdout_err)?;
    Ok(0)
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    train: &'a TrainConfig,
    mhfa: &'a MhfaConfig,
}

fn train(a: TrainArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let cfg = a.config();
    cfg.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    let corpus = Corpus::load(&manifest)?;
    let first = corpus
        .features
        .first()
        .ok_or_else(|| Error::Empty(format!("{}", a.manifest.display())))?;
    let mhfa_cfg = MhfaConfig {
        num_layers: first.num_layers(),
        input_dim: first.dim(),
        num_heads: a.heads,
        compression_dim: a.compression_dim,
        embed_dim: a.embed_dim,
    };
    let mut lines = vec![TRAIN_LOG_HEADER.to_string()];
    writeln!(ctx.out, "{TRAIN_LOG_HEADER}").map_err(stdout_err)?;
    let mut io_err = None;
    let outcome = train_with(&corpus, &cfg, &mhfa_cfg, |e| {
        lines.push(e.to_string());
        if let Err(err) = writeln!(ctx.out, "{e}").and_then(|_| ctx.out.flush()) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(stdout_err(e));
    }
    write_checkpoint(&a.out, &outcome.model)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(log) = &a.log {
        fs::write(log, lines.join("\n") + "\n").map_err(|e| Error::io(log, e))?;
        outputs.push(log);
    }
    let best = &outcome.log[outcome.best_epoch - 1];
    let _ = writeln!(
        ctx.err,
        "best epoch {} dev_eer {:.6}",
        best.epoch, best.dev_eer
    );
    ctx.record(
        &manifest_path_for(&a.out),
        "train",
        TrainRecord {
            train: &cfg,
            mhfa: &mhfa_cfg,
        },
        &[&a.manifest],
        &outputs,
        Some(cfg.seed),
    )?;
    Ok(0)
}

fn system_tag(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scores".into())
}

fn score(a: ScoreArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let model = read_checkpoint(&a.checkpoint)?;
    let manifest = read_manifest(&a.manifest)?;
    let trials = parse_trials(&a.trials)?;
    let is_cm = matches!(model.head, Head::Cm(_));
    if is_cm && (a.cohort.is_some() || a.snorm_topk.is_some()) {
        return Err(Error::Config("s-norm applies to speaker (cosine) scoring only".into()));
    }
    if a.snorm_topk.is_some() && a.cohort.is_none() {
        return Err(Error::Config("--snorm-topk needs --cohort".into()));
    }

    let mut needed = BTreeSet::new();
    for t in trials.trials() {
        needed.insert(t.test_id.as_str());
        if !is_cm {
            needed.insert(t.enroll_id.as_str());
        }
    }
    let entries = needed
        .iter()
        .map(|id| {
            manifest
                .find(id)
                .ok_or_else(|| Error::KeyMismatch(format!("utterance {id} not in {}", a.manifest.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let embedded = entries
        .par_iter()
        .map(|e| {
            let x = manifest.load_features(e)?;
            Ok((e.utt_id.clone(), model.embed(&x)?))
        })
        .collect::<Result<HashMap<_, _>>>()?;

    let cohort = match &a.cohort {
        None => None,
        Some(path) => {
            let cm = read_manifest(path)?;
            let emb = cm
                .entries
                .par_iter()
                .filter(|e| !e.spoof)
                .map(|e| Ok(model.embed(&cm.load_features(e)?)?.0))
                .collect::<Result<Vec<_>>>()?;
            Some(CohortEmbeddings::new(emb, a.snorm_topk)?)
        }
    };

    let mut scores = ScoreSet::new(system_tag(&a.out));
    for t in trials.trials() {
        let test = &embedded[t.test_id.as_str()];
        let s = match (&model.head, &cohort) {
            (Head::Cm(h), _) => h.logit(test),
            (Head::Aam(_), None) => cosine_score(&embedded[t.enroll_id.as_str()], test)?,
            (Head::Aam(_), Some(c)) => c.normalized_score(&embedded[t.enroll_id.as_str()], test)?,
        };
        scores.insert(&t.trial_id, s)?;
    }
    write_scores(&a.out, &scores)?;
    let mut inputs = vec![a.checkpoint.as_path(), a.manifest.as_path(), a.trials.as_path()];
    if let Some(c) = &a.cohort {
        inputs.push(c);
    }
    ctx.record(&manifest_path_for(&a.out), "score", &a, &inputs, &[&a.out], None)?;
    writeln!(ctx.out, "scored {} trials -> {}", scores.len(), a.out.display()).map_err(stdout_err)?;
    Ok(0)
}

fn calibration_classes(kind: KindArg) -> Classes {
    match kind {
        KindArg::Asv => Classes::SV,
        KindArg::Cm => Classes::CM,
    }
}

fn apply_affine_set(scores: &ScoreSet, c: &AffineCalibration, tag: String) -> Result<ScoreSet> {
    let mut out = ScoreSet::new(tag);
    for (id, s) in scores.iter() {
        out.insert(id, c.apply(s))?;
    }
    Ok(out)
}

fn fit_for(scores: &ScoreSet, trials: &crate::protocol::TrialSet, classes: Classes, prior: f64) -> Result<AffineCalibration> {
    let (s, y) = binary_labels(scores, trials, classes.positive, classes.negative)?;
    fit_calibration(&s, &y, prior)
}

fn calibrate(a: CalibrateArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let scores = read_scores(&a.scores)?;
    let trials = parse_trials(&a.trials)?;
    let cal = fit_for(&scores, &trials, calibration_classes(a.kind), a.prior)?;
    write_model(&a.out, &ModelFile::Affine(cal))?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(path) = &a.apply {
        write_scores(path, &apply_affine_set(&scores, &cal, system_tag(path))?)?;
        outputs.push(path);
    }
    ctx.record(
        &manifest_path_for(&a.out),
        "calibrate",
        &a,
        &[&a.scores, &a.trials],
        &outputs,
        None,
    )?;
    writeln!(ctx.out, "{:.10} {:.10}", cal.scale, cal.bias).map_err(stdout_err)?;
    Ok(0)
}

fn fuse(a: FuseArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let asv = read_scores(&a.asv)?;
    let cm = read_scores(&a.cm)?;
    let trials = parse_trials(&a.trials)?;
    let strategy = match a.strategy {
        StrategyArg::Joint => {
            let (sa, sc, y) = sasv_training_data(&asv, &cm, &trials)?;
            FusionStrategy::Joint(fit_joint_fusion(&sa, &sc, &y, a.prior)?)
        }
        StrategyArg::Pre => {
            let ca = fit_for(&asv, &trials, Classes::SV, a.prior)?;
            let cc = fit_for(&cm, &trials, Classes::CM, a.prior)?;
            let asv_c = apply_affine_set(&asv, &ca, asv.system_tag.clone())?;
            let cm_c = apply_affine_set(&cm, &cc, cm.system_tag.clone())?;
            let (sa, sc, y) = sasv_training_data(&asv_c, &cm_c, &trials)?;
            FusionStrategy::PreCalibrated {
                asv: ca,
                cm: cc,
                joint: fit_joint_fusion(&sa, &sc, &y, a.prior)?,
            }
        }
    };
    let mut fused = fuse_scores(&asv, &cm, &strategy, None)?;
    let final_cal = if a.final_calibration {
        let c = fit_for(&fused, &trials, Classes::SASV, a.prior)?;
        fused = fuse_scores(&asv, &cm, &strategy, Some(&c))?;
        Some(c)
    } else {
        None
    };
    fused.system_tag = system_tag(&a.out);
    write_scores(&a.out, &fused)?;
    let joint = match strategy {
        FusionStrategy::Joint(m) => m,
        FusionStrategy::PreCalibrated { joint, .. } => joint,
    };
    let mut outputs = vec![a.out.as_path()];
    if let Some(path) = &a.model {
        write_model(path, &ModelFile::Joint(joint))?;
        outputs.push(path);
    }
    ctx.record(
        &manifest_path_for(&a.out),
        "fuse",
        &a,
        &[&a.asv, &a.cm, &a.trials],
        &outputs,
        None,
    )?;
    writeln!(ctx.out, "{:.10} {:.10} {:.10}", joint.a_asv, joint.a_cm, joint.bias).map_err(stdout_err)?;
    if let Some(c) = final_cal {
        writeln!(ctx.out, "final {:.10} {:.10}", c.scale, c.bias).map_err(stdout_err)?;
    }
    Ok(0)
}

fn eval(a: EvalArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let scores = read_scores(&a.scores)?;
    let trials = parse_trials(&a.trials)?;
    let labeled = LabeledScores::join(&scores, &trials)?;
    let format = TableFormat::from(a.format);
    let text = match a.metric {
        MetricArg::Adcf => {
            let params = ADcfParams {
                pi_target: a.adcf_pi_tar,
                pi_nontarget: a.adcf_pi_non,
                pi_spoof: a.adcf_pi_spf,
                c_miss: a.adcf_c_miss,
                c_fa_nontarget: a.adcf_c_fa_non,
                c_fa_spoof: a.adcf_c_fa_spf,
            };
            let (value, _) = a_dcf(&labeled, &params)?;
            render_report(
                &[ReportRow {
                    cm_model: a.cm_model.clone(),
                    cm_calibrated_on: a.cm_calibrated_on.clone(),
                    asv_model: a.asv_model.clone(),
                    asv_calibrated_on: a.asv_calibrated_on.clone(),
                    fusion_on: a.fusion_on.clone(),
                    a_dcf: value,
                }],
                format,
            )
        }
        MetricArg::Eer => {
            let v = eer_with(&labeled, a.protocol.classes())?;
            render_table(
                &["metric", "protocol", "value", "threshold"],
                &[[
                    "eer".into(),
                    a.protocol.name().into(),
                    format!("{v:.6}"),
                    "-".into(),
                ]],
                format,
            )
        }
        MetricArg::Mindcf => {
            let params = DcfParams {
                p_target: a.p_target,
                c_miss: a.c_miss,
                c_fa: a.c_fa,
            };
            let (v, thr) = min_dcf(&labeled, a.protocol.classes(), &params)?;
            render_table(
                &["metric", "protocol", "value", "threshold"],
                &[[
                    "mindcf".into(),
                    a.protocol.name().into(),
                    format!("{v:.6}"),
                    format!("{thr:.6}"),
                ]],
                format,
            )
        }
    };
    write!(ctx.out, "{text}").map_err(stdout_err)?;
    Ok(0)
}

fn gradcheck(a: GradcheckArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let tasks = match a.task {
        Some(t) => vec![Task::from(t)],
        None => vec![Task::CmBce, Task::AsvAam],
    };
    let dsu_modes = match a.dsu {
        DsuModeArg::On => vec![true],
        DsuModeArg::Off => vec![false],
        DsuModeArg::Both => vec![false, true],
    };
    let cfg = grad_check_config();
    let mut worst: f64 = 0.0;
    for seed in a.seed..a.seed + a.seeds.max(1) {
        for &task in &tasks {
            for &dsu in &dsu_modes {
                let r = grad_check(&cfg, task, seed, dsu)?;
                writeln!(
                    ctx.out,
                    "seed {seed} task {task} dsu {} max_rel_error {:.3e}",
                    if dsu { "on" } else { "off" },
                    r.max_rel_error
                )
                .map_err(stdout_err)?;
                // NaN must fail the check.
                worst = if r.max_rel_error.is_nan() {
                    f64::INFINITY
                } else {
                    worst.max(r.max_rel_error)
                };
            }
        }
    }
    writeln!(ctx.out, "max_rel_error {worst:.3e}").map_err(stdout_err)?;
    if worst < GRAD_CHECK_TOLERANCE {
        Ok(0)
    } else {
        let _ = writeln!(
            ctx.err,
            "sasv: error[gradcheck]: max relative error {worst:.3e} >= {GRAD_CHECK_TOLERANCE:e}"
        );
        Ok(1)
    }
}
