use proptest::prelude::*;
use sasv::dsu::DsuConfig;
use sasv::model::checkpoint_bytes;
use sasv::synthgen::{synth_features, SynthConfig};
use sasv::trainer::{
    adamw_update, batch_objective, init_backend, lr_at, split_corpus, train, train_with,
    AdamWConfig, Corpus, OptimizerState, Target, STREAM_INIT,
};
use sasv::{Backend, Error, LayeredFeatures, MhfaConfig, Rng, Task, TrainConfig};

fn synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_speakers: 6,
        utts_per_speaker: 12,
        num_layers: 3,
        num_frames: 6,
        dim: 8,
        artifact_layer: 1,
        seed,
        ..SynthConfig::default()
    }
}

fn corpus(seed: u64) -> Corpus {
    Corpus::from_pairs(synth_features(&synth(seed)).unwrap())
}

fn mhfa() -> MhfaConfig {
    MhfaConfig {
        num_layers: 3,
        input_dim: 8,
        num_heads: 2,
        compression_dim: 4,
        embed_dim: 6,
    }
}

fn fast(task: Task, seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        batch_size: 8,
        base_lr: 1e-2,
        final_lr: 2e-4,
        warmup_epochs: 1,
        task,
        seed,
        // Two bona fide dev utterances per speaker give same-speaker pairs.
        dev_fraction: if task == Task::AsvAam { 0.34 } else { 0.2 },
        ..TrainConfig::default()
    }
}

#[test]
fn lr_trace_follows_schedule() {
    let c = corpus(0);
    let cfg = fast(Task::CmBce, 1);
    let out = train(&c, &cfg, &mhfa()).unwrap();
    let spe = out.split.train.len().div_ceil(cfg.batch_size);
    assert_eq!(out.lr_trace.len(), spe * cfg.max_epochs);
    for (step, lr) in out.lr_trace.iter().enumerate() {
        assert_eq!(*lr, lr_at(step, spe, &cfg));
    }
    assert_eq!(out.lr_trace[0], 0.0);
    assert_eq!(*out.lr_trace.last().unwrap(), cfg.final_lr);
    assert!((out.lr_trace[spe] - cfg.base_lr).abs() < 1e-15);
    assert_eq!(out.log.len(), cfg.max_epochs);
    assert_eq!(out.log.last().unwrap().lr, cfg.final_lr);
}

#[test]
fn same_seed_same_checkpoint_bytes() {
    let c = corpus(2);
    for task in [Task::CmBce, Task::AsvAam] {
        let mut cfg = fast(task, 4);
        if task == Task::CmBce {
            cfg.dsu = Some(DsuConfig::default());
        }
        let a = train(&c, &cfg, &mhfa()).unwrap();
        let b = train(&c, &cfg, &mhfa()).unwrap();
        assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model), "{task}");
        assert_eq!(a.step_losses, b.step_losses);
        cfg.seed = 5;
        let d = train(&c, &cfg, &mhfa()).unwrap();
        assert_ne!(checkpoint_bytes(&a.model), checkpoint_bytes(&d.model), "{task}");
    }
}

fn train_set_loss(model: &Backend, c: &Corpus, idx: &[usize], task: Task) -> f64 {
    let speakers = c.speakers();
    let xs: Vec<&LayeredFeatures> = idx.iter().map(|&i| &c.features[i]).collect();
    let ts: Vec<Target> = idx
        .iter()
        .map(|&i| match task {
            Task::CmBce => Target::Cm(!c.entries[i].spoof),
            Task::AsvAam => {
                Target::Speaker(speakers.binary_search(&c.entries[i].speaker_id).unwrap())
            }
        })
        .collect();
    batch_objective(model, &xs, &ts, None).unwrap().0
}

/// Linear-interpolation percentile of an unsorted sample.
fn percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

#[test]
fn first_epoch_reduces_training_loss() {
    let c = corpus(3);
    for task in [Task::CmBce, Task::AsvAam] {
        let deltas: Vec<f64> = (0..10)
            .map(|seed| {
                let cfg = TrainConfig {
                    max_epochs: 1,
                    warmup_epochs: 0,
                    ..fast(task, seed)
                };
                let out = train(&c, &cfg, &mhfa()).unwrap();
                let classes = c.speakers().len();
                let mut rng = Rng::derive(seed, STREAM_INIT);
                let init = init_backend(&mhfa(), &cfg, classes, &mut rng).unwrap();
                let before = train_set_loss(&init, &c, &out.split.train, task);
                let after = train_set_loss(&out.model, &c, &out.split.train, task);
                after - before
            })
            .collect();
        let p95 = percentile(&deltas, 0.95);
        assert!(p95 < 0.0, "{task}: loss changes {deltas:?}");
    }
}

#[test]
fn best_epoch_minimizes_dev_eer() {
    let c = corpus(6);
    let out = train(&c, &fast(Task::CmBce, 0), &mhfa()).unwrap();
    let best = &out.log[out.best_epoch - 1];
    for e in &out.log {
        assert!(
            best.dev_eer < e.dev_eer || (best.dev_eer == e.dev_eer && best.dev_loss <= e.dev_loss)
        );
    }
}

#[test]
fn splits_are_disjoint_and_stratified() {
    let c = corpus(7);
    let cm = split_corpus(&c, Task::CmBce, 0.25, 1);
    let mut all: Vec<usize> = cm.train.iter().chain(&cm.dev).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..c.len()).collect::<Vec<_>>());
    let spoof_dev = cm.dev.iter().filter(|&&i| c.entries[i].spoof).count();
    let spoof_all = c.entries.iter().filter(|e| e.spoof).count();
    assert_eq!(spoof_dev, (spoof_all as f64 * 0.25).round() as usize);

    let asv = split_corpus(&c, Task::AsvAam, 0.25, 1);
    assert!(asv.train.iter().chain(&asv.dev).all(|&i| !c.entries[i].spoof));
    for spk in c.speakers() {
        let n_dev = asv.dev.iter().filter(|&&i| c.entries[i].speaker_id == spk).count();
        assert!(n_dev >= 1, "{spk}");
    }
    assert_eq!(split_corpus(&c, Task::AsvAam, 0.25, 1), asv);
}

fn fails_before_first_epoch(c: &Corpus, cfg: &TrainConfig, m: &MhfaConfig) -> Error {
    let mut epochs = 0;
    let err = train_with(c, cfg, m, |_| epochs += 1).unwrap_err();
    assert_eq!(epochs, 0);
    err
}

#[test]
fn corpus_problems_surface_before_training() {
    let cfg = fast(Task::CmBce, 0);
    let empty = Corpus::from_pairs(vec![]);
    assert!(matches!(fails_before_first_epoch(&empty, &cfg, &mhfa()), Error::Empty(_)));

    let wrong_dim = MhfaConfig {
        input_dim: 9,
        ..mhfa()
    };
    assert!(matches!(
        fails_before_first_epoch(&corpus(0), &cfg, &wrong_dim),
        Error::Shape(_)
    ));

    let bona_only = Corpus::from_pairs(
        synth_features(&SynthConfig {
            spoof_fraction: 0.0,
            ..synth(0)
        })
        .unwrap(),
    );
    assert!(matches!(fails_before_first_epoch(&bona_only, &cfg, &mhfa()), Error::Config(_)));

    let one_speaker = Corpus::from_pairs(
        synth_features(&SynthConfig {
            num_speakers: 1,
            ..synth(0)
        })
        .unwrap(),
    );
    let asv = fast(Task::AsvAam, 0);
    assert!(matches!(fails_before_first_epoch(&one_speaker, &asv, &mhfa()), Error::Config(_)));

    let mut ragged = corpus(0);
    ragged.features[3] = LayeredFeatures::new(2, 6, 8, vec![0.0; 96]).unwrap();
    assert!(matches!(fails_before_first_epoch(&ragged, &cfg, &mhfa()), Error::Shape(_)));

    let bad = TrainConfig {
        frontend_lr_scale: Some(0.1),
        ..cfg
    };
    assert!(matches!(fails_before_first_epoch(&corpus(0), &bad, &mhfa()), Error::Config(_)));
}

proptest! {
    /// A constant gradient makes every bias-corrected moment exact, so each
    /// step is a decay followed by a move of `lr·g/(|g| + eps)`.
    #[test]
    fn adamw_constant_gradient_closed_form(
        p0 in -10.0f64..10.0,
        g in prop_oneof![-5.0f64..-1e-3, 1e-3f64..5.0],
        lr in 1e-5f64..1e-1,
        wd in 0.0f64..1e-1,
        steps in 1usize..20,
    ) {
        let cfg = AdamWConfig { weight_decay: wd, ..AdamWConfig::default() };
        let mut p = vec![p0];
        let mut state = OptimizerState::new(&[1]);
        let mut want = p0;
        for _ in 0..steps {
            adamw_update(&mut [&mut p[..]], &[&[g]], &mut state, lr, &cfg).unwrap();
            want = want * (1.0 - lr * wd) - lr * g / (g.abs() + cfg.eps);
        }
        prop_assert!((p[0] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        prop_assert_eq!(state.step, steps as u64);
    }

    #[test]
    fn lr_schedule_bounds(spe in 1usize..20, epochs in 1usize..10, warm in 0usize..4, step in 0usize..400) {
        let cfg = TrainConfig { max_epochs: epochs, warmup_epochs: warm.min(epochs), ..TrainConfig::default() };
        let lr = lr_at(step, spe, &cfg);
        prop_assert!(lr >= 0.0 && lr <= cfg.base_lr);
        if step >= cfg.warmup_epochs * spe {
            prop_assert!(lr >= cfg.final_lr);
        }
    }
}
