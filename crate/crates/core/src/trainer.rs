//! Training of MHFA back-ends: AdamW, warmup plus cosine annealing, seeded
//! batching, best-dev checkpoint selection and finite-difference checks.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsu::{DsuConfig, DsuNoise};
use crate::error::{Error, Result};
use crate::losses::{aam_softmax, bce_with_logit, cosine_score, AamConfig, AamHead, CmHead, Head};
use crate::metrics::eer_from_scores;
use crate::mhfa::{init_mhfa, mhfa_backward_batch, mhfa_forward_batch, DsuHook, MhfaConfig, MhfaParams};
use crate::model::Backend;
use crate::numerics::Rng;
use crate::protocol::LayeredFeatures;
use crate::synthgen::{Manifest, ManifestEntry};

/// Rng stream for parameter initialization; `Rng::derive(seed, STREAM_INIT)` rebuilds the initial model.
pub const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_DSU: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CmBce,
    AsvAam,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::CmBce => "cm_bce",
            Task::AsvAam => "asv_aam",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub task: Task,
    /// DSU on the value stream; only used for `cm_bce`.
    pub dsu: Option<DsuConfig>,
    pub aam_margin: f64,
    pub aam_scale: f64,
    /// Fraction of utterances held out for dev EER and checkpoint selection.
    pub dev_fraction: f64,
    pub seed: u64,
    /// Learning-rate factor for a trainable frontend. There is none, so
    /// setting it is a configuration error.
    pub frontend_lr_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 8,
            batch_size: 128,
            base_lr: 5.0e-4,
            final_lr: 1.0e-5,
            warmup_epochs: 2,
            weight_decay: 1.0e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            task: Task::CmBce,
            dsu: None,
            aam_margin: 0.2,
            aam_scale: 30.0,
            dev_fraction: 0.2,
            seed: 0,
            frontend_lr_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_epochs == 0 {
            return bad("max_epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr && self.base_lr.is_finite()) {
            return bad(format!(
                "need 0 < final_lr ≤ base_lr, got {} and {}",
                self.final_lr, self.base_lr
            ));
        }
        if self.warmup_epochs >= self.max_epochs {
            return bad(format!(
                "warmup_epochs {} must be < max_epochs {}",
                self.warmup_epochs, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be > 0 and weight_decay ≥ 0".into());
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return bad(format!("dev_fraction {} not in (0, 1)", self.dev_fraction));
        }
        if let Some(f) = self.frontend_lr_scale {
            return bad(format!(
                "frontend_lr_scale = {f} given, but there is no trainable frontend"
            ));
        }
        if let Some(d) = &self.dsu {
            d.validate()?;
        }
        self.aam(2).validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn aam(&self, num_classes: usize) -> AamConfig {
        AamConfig {
            num_classes,
            margin: self.aam_margin,
            scale: self.aam_scale,
        }
    }
}

/// Learning rate for optimizer step `step` (0-based).
///
/// Linear warmup from 0 over `warmup_epochs` epochs, then per-step cosine
/// annealing that reaches `final_lr` on the last step of `max_epochs`.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let total = cfg.max_epochs * steps_per_epoch;
    let span = total.saturating_sub(1).saturating_sub(warm);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warm) as f64 / span as f64).min(1.0)
    };
    cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        TrainConfig::default().adamw()
    }
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_tensors(tensors: &[&[f64]]) -> Self {
        Self::new(&tensors.iter().map(|t| t.len()).collect::<Vec<_>>())
    }
}

/// One AdamW step: `p ← p·(1 − lr·wd)`, then the bias-corrected Adam update.
pub fn adamw_update(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::Shape(format!(
                "tensor {i}: {} params, {} grads, {} moments",
                p.len(),
                g.len(),
                state.first[i].len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient tensor {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for j in 0..p.len() {
            p[j] *= decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Supervision for one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// CM label; `true` is bona fide.
    Cm(bool),
    /// Speaker class index.
    Speaker(usize),
}

/// Gradients shaped like a [`Backend`]'s trainable tensors.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub params: MhfaParams,
    pub head: Head,
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.params.tensors().to_vec();
        v.extend(self.head.tensors());
        v
    }
}

/// Mean task loss over a batch and its gradients.
pub fn batch_objective(
    model: &Backend,
    xs: &[&LayeredFeatures],
    targets: &[Target],
    dsu: Option<DsuHook<'_>>,
) -> Result<(f64, ModelGrads)> {
    if xs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            xs.len(),
            targets.len()
        )));
    }
    let (embeddings, cache) = mhfa_forward_batch(xs, &model.params, &model.cfg, dsu)?;
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut head_grad = model.head.zeros_like();
    let mut grad_e = Vec::with_capacity(xs.len());
    for (e, t) in embeddings.iter().zip(targets) {
        match (&model.head, t, &mut head_grad) {
            (Head::Cm(h), Target::Cm(y), Head::Cm(g)) => {
                let (l, dz) = bce_with_logit(h.logit(e), *y);
                loss += l / n;
                let dz = dz / n;
                for (gw, ek) in g.weight.iter_mut().zip(e.iter()) {
                    *gw += dz * ek;
                }
                g.bias += dz;
                grad_e.push(h.weight.iter().map(|w| dz * w).collect());
            }
            (Head::Aam(h), Target::Speaker(y), Head::Aam(g)) => {
                let mut out = aam_softmax(e, &h.weights, *y, &h.cfg)?;
                loss += out.loss / n;
                out.grad_weights.scale(1.0 / n);
                g.weights.add_assign(&out.grad_weights)?;
                grad_e.push(out.grad_embedding.iter().map(|v| v / n).collect());
            }
            _ => {
                return Err(Error::Config(format!(
                    "target {t:?} does not match the model head"
                )))
            }
        }
    }
    let grads = mhfa_backward_batch(&cache, &model.params, &grad_e, false)?;
    Ok((
        loss,
        ModelGrads {
            params: grads.params,
            head: head_grad,
        },
    ))
}

/// Utterances with their features, in manifest order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    pub features: Vec<LayeredFeatures>,
}

impl Corpus {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let features = manifest
            .entries
            .par_iter()
            .map(|e| manifest.load_features(e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries: manifest.entries.clone(),
            features,
        })
    }

    pub fn from_pairs(pairs: Vec<(ManifestEntry, LayeredFeatures)>) -> Self {
        let (entries, features) = pairs.into_iter().unzip();
        Self { entries, features }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted speaker ids; a speaker's class index is its position here.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeMap<&str, ()> = self
            .entries
            .iter()
            .map(|e| (e.speaker_id.as_str(), ()))
            .collect();
        set.into_keys().map(str::to_owned).collect()
    }
}

/// Train/dev partition of corpus indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
}

fn held_out(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Stratified split: by class for CM, by speaker over bona fide utterances
/// for ASV (spoofed audio carries no usable speaker label).
pub fn split_corpus(corpus: &Corpus, task: Task, dev_fraction: f64, seed: u64) -> DataSplit {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in corpus.entries.iter().enumerate() {
        let key = match task {
            Task::CmBce => e.spoof.to_string(),
            Task::AsvAam if e.spoof => continue,
            Task::AsvAam => e.speaker_id.clone(),
        };
        groups.entry(key).or_default().push(i);
    }
    let mut rng = Rng::derive(seed, STREAM_SPLIT);
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for mut idx in groups.into_values() {
        rng.shuffle(&mut idx);
        let k = held_out(idx.len(), dev_fraction);
        dev.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    dev.sort_unstable();
    DataSplit { train, dev }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub dev_eer: f64,
    /// Mean task loss on the dev split; breaks dev-EER ties.
    pub dev_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6} {:.6e}",
            self.epoch, self.loss, self.dev_eer, self.lr
        )
    }
}

pub const TRAIN_LOG_HEADER: &str = "epoch loss dev_eer lr";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev EER.
    pub model: Backend,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
    /// Batch loss at every optimizer step.
    pub step_losses: Vec<f64>,
    pub split: DataSplit,
}

fn targets_for(corpus: &Corpus, task: Task) -> Vec<Target> {
    let speakers = corpus.speakers();
    corpus
        .entries
        .iter()
        .map(|e| match task {
            Task::CmBce => Target::Cm(!e.spoof),
            Task::AsvAam => Target::Speaker(speakers.binary_search(&e.speaker_id).unwrap()),
        })
        .collect()
}

fn check_corpus(
    corpus: &Corpus,
    split: &DataSplit,
    targets: &[Target],
    task: Task,
    mhfa_cfg: &MhfaConfig,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    for (e, x) in corpus.entries.iter().zip(&corpus.features) {
        if x.num_layers() != mhfa_cfg.num_layers || x.dim() != mhfa_cfg.input_dim {
            return Err(Error::Shape(format!(
                "{}: features {}x{}x{} but the model expects L={} D={}",
                e.utt_id,
                x.num_layers(),
                x.num_frames(),
                x.dim(),
                mhfa_cfg.num_layers,
                mhfa_cfg.input_dim
            )));
        }
    }
    match task {
        Task::CmBce => {
            for (name, idx) in [("train", &split.train), ("dev", &split.dev)] {
                let bona = idx.iter().filter(|&&i| targets[i] == Target::Cm(true)).count();
                if bona == 0 || bona == idx.len() {
                    return Err(Error::Config(format!(
                        "{name} split needs both bona fide and spoof utterances"
                    )));
                }
            }
        }
        Task::AsvAam => {
            let spk = |idx: &[usize]| {
                let mut s: Vec<_> = idx.iter().map(|&i| targets[i]).collect();
                s.sort_unstable_by_key(|t| match t {
                    Target::Speaker(k) => *k,
                    Target::Cm(_) => usize::MAX,
                });
                s.dedup();
                s.len()
            };
            if spk(&split.train) < 2 {
                return Err(Error::Config(
                    "speaker training needs bona fide utterances from ≥ 2 speakers".into(),
                ));
            }
            let dev_spk = spk(&split.dev);
            if dev_spk < 2 || dev_spk == split.dev.len() {
                return Err(Error::Config(
                    "dev split needs same-speaker and different-speaker pairs".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Dev EER and mean dev loss of `model` on `idx`.
fn evaluate(model: &Backend, corpus: &Corpus, targets: &[Target], idx: &[usize]) -> Result<(f64, f64)> {
    let embeddings = idx
        .par_iter()
        .map(|&i| model.embed(&corpus.features[i]))
        .collect::<Result<Vec<_>>>()?;
    let n = idx.len() as f64;
    match &model.head {
        Head::Cm(h) => {
            let (mut pos, mut neg, mut loss) = (Vec::new(), Vec::new(), 0.0);
            for (e, &i) in embeddings.iter().zip(idx) {
                let z = h.logit(e);
                let bona = targets[i] == Target::Cm(true);
                loss += bce_with_logit(z, bona).0 / n;
                if bona {
                    pos.push(z);
                } else {
                    neg.push(z);
                }
            }
            Ok((eer_from_scores(&pos, &neg)?, loss))
        }
        Head::Aam(h) => {
            let mut loss = 0.0;
            for (e, &i) in embeddings.iter().zip(idx) {
                if let Target::Speaker(y) = targets[i] {
                    loss += aam_softmax(e, &h.weights, y, &h.cfg)?.loss / n;
                }
            }
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    let s = cosine_score(&embeddings[a], &embeddings[b])?;
                    if targets[idx[a]] == targets[idx[b]] {
                        pos.push(s);
                    } else {
                        neg.push(s);
                    }
                }
            }
            Ok((eer_from_scores(&pos, &neg)?, loss))
        }
    }
}

/// Fresh back-end for `task`; the speaker head gets `num_classes` rows.
pub fn init_backend(
    mhfa_cfg: &MhfaConfig,
    cfg: &TrainConfig,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<Backend> {
    let params = init_mhfa(mhfa_cfg, rng)?;
    let head = match cfg.task {
        Task::CmBce => Head::Cm(CmHead::init(mhfa_cfg.embed_dim, rng)),
        Task::AsvAam => Head::Aam(AamHead::init(cfg.aam(num_classes), mhfa_cfg.embed_dim, rng)?),
    };
    Ok(Backend {
        cfg: *mhfa_cfg,
        params,
        head,
    })
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig, mhfa_cfg: &MhfaConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, mhfa_cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mhfa_cfg: &MhfaConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    mhfa_cfg.validate()?;
    let targets = targets_for(corpus, cfg.task);
    let split = split_corpus(corpus, cfg.task, cfg.dev_fraction, cfg.seed);
    check_corpus(corpus, &split, &targets, cfg.task, mhfa_cfg)?;

    let mut rng = Rng::derive(cfg.seed, STREAM_INIT);
    let mut model = init_backend(mhfa_cfg, cfg, corpus.speakers().len(), &mut rng)?;
    let mut opt = OptimizerState::for_tensors(&model.tensors());
    let adamw = cfg.adamw();
    let mut shuffle_rng = Rng::derive(cfg.seed, STREAM_SHUFFLE);
    let mut dsu_rng = Rng::derive(cfg.seed, STREAM_DSU);
    let use_dsu = match cfg.task {
        Task::CmBce => cfg.dsu,
        Task::AsvAam => None,
    };

    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let mut order = split.train.clone();
    let (mut log, mut lr_trace, mut step_losses) = (Vec::new(), Vec::new(), Vec::new());
    let mut best: Option<(f64, f64, usize, Backend)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lr = lr_at(step, steps_per_epoch, cfg);
            let xs: Vec<&LayeredFeatures> = batch.iter().map(|&i| &corpus.features[i]).collect();
            let ts: Vec<Target> = batch.iter().map(|&i| targets[i]).collect();
            let hook = use_dsu.map(|d| DsuHook::Sample {
                cfg: d,
                rng: &mut dsu_rng,
            });
            let (loss, grads) = batch_objective(&model, &xs, &ts, hook)?;
            adamw_update(&mut model.tensors_mut(), &grads.tensors(), &mut opt, lr, &adamw)?;
            epoch_loss += loss;
            step_losses.push(loss);
            lr_trace.push(lr);
            step += 1;
        }
        let (dev_eer, dev_loss) = evaluate(&model, corpus, &targets, &split.dev)?;
        let entry = EpochLog {
            epoch,
            loss: epoch_loss / steps_per_epoch as f64,
            dev_eer,
            dev_loss,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
        let better = match &best {
            None => true,
            Some((e, l, _, _)) => dev_eer < *e || (dev_eer == *e && dev_loss < *l),
        };
        if better {
            best = Some((dev_eer, dev_loss, epoch, model.clone()));
        }
    }
    let (_, _, best_epoch, model) = best.expect("max_epochs ≥ 1");
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
        lr_trace,
        step_losses,
        split,
    })
}

/// Model size used by [`grad_check`]: L=2, D=6, H=2, C=4, E=3.
pub fn grad_check_config() -> MhfaConfig {
    MhfaConfig {
        num_layers: 2,
        input_dim: 6,
        num_heads: 2,
        compression_dim: 4,
        embed_dim: 3,
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
const GRAD_CHECK_FRAMES: usize = 4;
const GRAD_CHECK_BATCH: usize = 3;
/// Denominator floor so exact zeros compare by absolute error.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor index (MHFA tensors then head) and element of the worst entry.
    pub worst: (usize, usize),
    /// Analytic and finite-difference values at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares analytic gradients of the mean batch loss with central
/// differences over every parameter. With `dsu`, a fixed noise draw is
/// applied to the whole batch so ε stays constant.
pub fn grad_check(mhfa_cfg: &MhfaConfig, task: Task, seed: u64, dsu: bool) -> Result<GradCheckReport> {
    mhfa_cfg.validate()?;
    let mut rng = Rng::new(seed);
    let cfg = TrainConfig {
        task,
        ..TrainConfig::default()
    };
    let mut model = init_backend(mhfa_cfg, &cfg, GRAD_CHECK_BATCH, &mut rng)?;
    for w in model
        .params
        .layer_keys
        .iter_mut()
        .chain(model.params.layer_values.iter_mut())
        .chain(model.params.output_bias.iter_mut())
    {
        *w = 0.5 * rng.normal();
    }
    if let Head::Cm(h) = &mut model.head {
        h.bias = 0.5 * rng.normal();
    }
    let xs: Vec<LayeredFeatures> = (0..GRAD_CHECK_BATCH)
        .map(|_| {
            let n = mhfa_cfg.num_layers * GRAD_CHECK_FRAMES * mhfa_cfg.input_dim;
            let data = (0..n).map(|_| rng.normal()).collect();
            LayeredFeatures::new(mhfa_cfg.num_layers, GRAD_CHECK_FRAMES, mhfa_cfg.input_dim, data)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&LayeredFeatures> = xs.iter().collect();
    let targets: Vec<Target> = (0..GRAD_CHECK_BATCH)
        .map(|i| match task {
            Task::CmBce => Target::Cm(i % 2 == 0),
            Task::AsvAam => Target::Speaker(i),
        })
        .collect();
    let noise = dsu.then(|| DsuNoise::sample(GRAD_CHECK_BATCH, mhfa_cfg.input_dim, &mut rng));
    let dsu_cfg = DsuConfig::default();
    let objective = |m: &Backend| -> Result<(f64, ModelGrads)> {
        let hook = noise.clone().map(|noise| DsuHook::Fixed { cfg: dsu_cfg, noise });
        batch_objective(m, &refs, &targets, hook)
    };

    let (_, grads) = objective(&model)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for (ti, a_t) in analytic.iter().enumerate() {
        for j in 0..a_t.len() {
            let mut plus = model.clone();
            plus.tensors_mut()[ti][j] += GRAD_CHECK_STEP;
            let mut minus = model.clone();
            minus.tensors_mut()[ti][j] -= GRAD_CHECK_STEP;
            let numeric = (objective(&plus)?.0 - objective(&minus)?.0) / (2.0 * GRAD_CHECK_STEP);
            let a = a_t[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (ti, j);
                report.worst_values = (a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        let cfg = TrainConfig::default();
        let spe = 13;
        assert_eq!(lr_at(0, spe, &cfg), 0.0);
        assert_eq!(lr_at(2 * spe, spe, &cfg), 5.0e-4);
        assert_eq!(lr_at(8 * spe - 1, spe, &cfg), 1.0e-5);
        assert_eq!(lr_at(10 * spe, spe, &cfg), 1.0e-5);
    }

    #[test]
    fn lr_warmup_is_linear_and_decay_monotone() {
        let cfg = TrainConfig::default();
        let spe = 10;
        assert!((lr_at(10, spe, &cfg) - 2.5e-4).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 20..80 {
            let lr = lr_at(s, spe, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_invariants_enforced() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { final_lr: 1e-3, ..ok.clone() },
            TrainConfig { final_lr: 0.0, ..ok.clone() },
            TrainConfig { warmup_epochs: 8, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { frontend_lr_scale: Some(0.05), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut st = OptimizerState::new(&[1]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_update(&mut [&mut p[..]], &[&[1.0][..]], &mut st, 0.1, &cfg).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_zero_grad_decays() {
        let mut p = vec![2.0, -4.0];
        let mut st = OptimizerState::new(&[2]);
        let cfg = AdamWConfig::default();
        for _ in 0..3 {
            adamw_update(&mut [&mut p[..]], &[&[0.0, 0.0][..]], &mut st, 0.5, &cfg).unwrap();
        }
        let f = 1.0 - 0.5 * 1e-4;
        assert_eq!(p, vec![2.0 * f * f * f, -4.0 * f * f * f]);
    }

    #[test]
    fn adamw_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut st = OptimizerState::new(&[2]);
        let r = adamw_update(&mut [&mut p[..]], &[&[1.0][..]], &mut st, 0.1, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn grad_check_small() {
        let cfg = grad_check_config();
        for task in [Task::CmBce, Task::AsvAam] {
            for dsu in [false, true] {
                let r = grad_check(&cfg, task, 3, dsu).unwrap();
                assert!(r.max_rel_error < 1e-4, "{task} dsu={dsu}: {r:?}");
            }
        }
    }
}
