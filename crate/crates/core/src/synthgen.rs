//! Synthetic corpora standing in for SSL-encoder outputs.
//!
//! Every utterance is
//!
//! ```text
//! x[l,t,:] = base[l,t,:] + speaker[s] + spoof·artifact·[l == artifact_layer] + noise·z[l,t,:]
//! ```
//!
//! where `base` is one fixed Gaussian tensor per corpus, `speaker[s]` a fixed
//! Gaussian direction per speaker broadcast over layers and frames, and
//! `artifact` a single fixed vector present only in spoofed utterances and
//! only at one layer. The corpus-level draws use stream 0 of the seed, and
//! utterance `i` draws its noise from stream `i + 1`, so output does not
//! depend on how generation is scheduled.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::protocol::{write_features, write_trials, LayeredFeatures, Trial, TrialLabel, TrialSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub spoof_fraction: f64,
    pub num_layers: usize,
    pub num_frames: usize,
    pub dim: usize,
    pub speaker_scale: f64,
    pub spoof_artifact_scale: f64,
    pub noise_scale: f64,
    pub artifact_layer: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_speakers: 40,
            utts_per_speaker: 50,
            spoof_fraction: 0.5,
            num_layers: 4,
            num_frames: 32,
            dim: 32,
            speaker_scale: 1.0,
            spoof_artifact_scale: 1.0,
            noise_scale: 1.0,
            artifact_layer: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_speakers", self.num_speakers),
            ("utts_per_speaker", self.utts_per_speaker),
            ("num_layers", self.num_layers),
            ("num_frames", self.num_frames),
            ("dim", self.dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.spoof_fraction) {
            return Err(Error::Config("spoof_fraction must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("speaker_scale", self.speaker_scale),
            ("spoof_artifact_scale", self.spoof_artifact_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.artifact_layer >= self.num_layers {
            return Err(Error::Config(format!(
                "artifact_layer {} out of range for {} layers",
                self.artifact_layer, self.num_layers
            )));
        }
        Ok(())
    }

    pub fn total_utterances(&self) -> usize {
        self.num_speakers * self.utts_per_speaker
    }

    /// Utterance `i` is spoofed iff `round((i+1)f) - round(i f) == 1`; the
    /// telescoping sum gives exactly `round(N f)` spoofs spread over the corpus.
    pub fn is_spoof(&self, utt_index: usize) -> bool {
        let f = self.spoof_fraction;
        ((utt_index + 1) as f64 * f).round() - (utt_index as f64 * f).round() >= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub spoof: bool,
    /// As written in the manifest; relative paths resolve against the manifest directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn spoof_count(&self) -> usize {
        self.entries.iter().filter(|e| e.spoof).count()
    }

    pub fn find(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }

    pub fn load_features(&self, entry: &ManifestEntry) -> Result<LayeredFeatures> {
        crate::protocol::read_features(self.resolve(entry))
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &manifest.entries {
        let kind = if e.spoof { "spoof" } else { "bonafide" };
        writeln!(w, "{} {} {} {}", e.utt_id, e.speaker_id, kind, e.path.display())
            .map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let [utt, spk, kind, file] = fields[..] else {
            return Err(parse_err(
                "expected `utt_id speaker_id {bonafide|spoof} path`".into(),
            ));
        };
        let spoof = match kind {
            "bonafide" => false,
            "spoof" => true,
            other => return Err(parse_err(format!("unknown utterance kind {other:?}"))),
        };
        if !seen.insert(utt.to_string()) {
            return Err(parse_err(format!("duplicate utterance id {utt}")));
        }
        entries.push(ManifestEntry {
            utt_id: utt.into(),
            speaker_id: spk.into(),
            spoof,
            path: file.into(),
        });
    }
    Ok(Manifest { root, entries })
}

/// Fixed corpus-level tensors shared by all utterances.
struct CorpusDraws {
    base: Vec<f64>,
    speakers: Vec<Vec<f64>>,
    artifact: Vec<f64>,
}

impl CorpusDraws {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = Rng::derive(cfg.seed, 0);
        let n = cfg.num_layers * cfg.num_frames * cfg.dim;
        let base = (0..n).map(|_| rng.normal()).collect();
        let speakers = (0..cfg.num_speakers)
            .map(|_| {
                (0..cfg.dim)
                    .map(|_| cfg.speaker_scale * rng.normal())
                    .collect()
            })
            .collect();
        let artifact = (0..cfg.dim)
            .map(|_| cfg.spoof_artifact_scale * rng.normal())
            .collect();
        Self {
            base,
            speakers,
            artifact,
        }
    }
}

fn utterance(cfg: &SynthConfig, draws: &CorpusDraws, index: usize) -> LayeredFeatures {
    let speaker = &draws.speakers[index / cfg.utts_per_speaker];
    let spoof = cfg.is_spoof(index);
    let mut rng = Rng::derive(cfg.seed, index as u64 + 1);
    let (t_n, d_n) = (cfg.num_frames, cfg.dim);
    let mut data = Vec::with_capacity(draws.base.len());
    for l in 0..cfg.num_layers {
        let with_artifact = spoof && l == cfg.artifact_layer;
        for t in 0..t_n {
            for d in 0..d_n {
                let mut v = draws.base[(l * t_n + t) * d_n + d] + speaker[d];
                if with_artifact {
                    v += draws.artifact[d];
                }
                v += cfg.noise_scale * rng.normal();
                data.push(v);
            }
        }
    }
    LayeredFeatures::new(cfg.num_layers, t_n, d_n, data).expect("generated tensor is valid")
}

/// Generates the utterance tensors in memory without touching disk.
pub fn synth_features(cfg: &SynthConfig) -> Result<Vec<(ManifestEntry, LayeredFeatures)>> {
    cfg.validate()?;
    let draws = CorpusDraws::new(cfg);
    Ok((0..cfg.total_utterances())
        .into_par_iter()
        .map(|i| (entry_for(cfg, i), utterance(cfg, &draws, i)))
        .collect())
}

fn entry_for(cfg: &SynthConfig, index: usize) -> ManifestEntry {
    let utt_id = format!("u{index:06}");
    ManifestEntry {
        path: PathBuf::from("features").join(format!("{utt_id}.lft")),
        utt_id,
        speaker_id: format!("spk{:04}", index / cfg.utts_per_speaker),
        spoof: cfg.is_spoof(index),
    }
}

/// Enrollment/verification trials over a manifest.
///
/// Each speaker enrolls with its first bona fide utterance. Every other
/// utterance of that speaker is tested against it (target or spoof), and every
/// other bona fide utterance is also tested against one other speaker's
/// enrollment (nontarget). Speakers without a bona fide utterance cannot enroll
/// and contribute no trials.
pub fn build_trials(manifest: &Manifest, seed: u64) -> TrialSet {
    let mut speakers: Vec<&str> = Vec::new();
    let mut enroll: std::collections::HashMap<&str, &str> = Default::default();
    for e in &manifest.entries {
        if !speakers.contains(&e.speaker_id.as_str()) {
            speakers.push(&e.speaker_id);
        }
        if !e.spoof {
            enroll.entry(&e.speaker_id).or_insert(&e.utt_id);
        }
    }
    let enrolled: Vec<&str> = speakers
        .iter()
        .copied()
        .filter(|s| enroll.contains_key(s))
        .collect();

    let mut rng = Rng::derive(seed, u64::MAX);
    let mut set = TrialSet::new();
    let mut next_id = 0usize;
    let mut push = |set: &mut TrialSet, enroll_id: &str, test_id: &str, label| {
        set.push(Trial {
            trial_id: format!("T{next_id:07}"),
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            label,
        })
        .expect("generated trial ids are unique");
        next_id += 1;
    };
    for e in &manifest.entries {
        let Some(&own) = enroll.get(e.speaker_id.as_str()) else {
            continue;
        };
        if own == e.utt_id {
            continue;
        }
        let label = if e.spoof {
            TrialLabel::Spoof
        } else {
            TrialLabel::Target
        };
        push(&mut set, own, &e.utt_id, label);
        if !e.spoof && enrolled.len() > 1 {
            let others: Vec<&str> = enrolled
                .iter()
                .copied()
                .filter(|s| *s != e.speaker_id)
                .collect();
            let pick = others[(rng.next_u64() % others.len() as u64) as usize];
            push(&mut set, enroll[pick], &e.utt_id, TrialLabel::Nontarget);
        }
    }
    set
}

/// Writes `features/*.lft`, `manifest.txt` and `trials.txt` under `out_dir`.
pub fn synth_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let draws = CorpusDraws::new(cfg);
    let entries = (0..cfg.total_utterances())
        .into_par_iter()
        .map(|i| {
            let entry = entry_for(cfg, i);
            write_features(out_dir.join(&entry.path), &utterance(cfg, &draws, i))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    write_manifest(out_dir.join("manifest.txt"), &manifest)?;
    write_trials(out_dir.join("trials.txt"), &build_trials(&manifest, cfg.seed))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spoof_count_is_rounded_fraction() {
        for (n, f) in [(10, 0.5), (7, 0.3), (9, 1.0), (9, 0.0), (13, 0.77)] {
            let cfg = SynthConfig {
                num_speakers: 1,
                utts_per_speaker: n,
                spoof_fraction: f,
                ..SynthConfig::default()
            };
            let count = (0..n).filter(|&i| cfg.is_spoof(i)).count();
            assert_eq!(count as f64, (n as f64 * f).round(), "n={n} f={f}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SynthConfig {
                num_speakers: 0,
                ..Default::default()
            },
            SynthConfig {
                spoof_fraction: 1.5,
                ..Default::default()
            },
            SynthConfig {
                artifact_layer: 4,
                num_layers: 4,
                ..Default::default()
            },
            SynthConfig {
                noise_scale: -1.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn degenerate_config_gives_identical_utterances() {
        let cfg = SynthConfig {
            num_speakers: 3,
            utts_per_speaker: 4,
            speaker_scale: 0.0,
            spoof_artifact_scale: 0.0,
            noise_scale: 0.0,
            ..Default::default()
        };
        let utts = synth_features(&cfg).unwrap();
        for (_, f) in &utts[1..] {
            assert_eq!(f, &utts[0].1);
        }
    }

    #[test]
    fn trials_cover_all_classes() {
        let cfg = SynthConfig {
            num_speakers: 4,
            utts_per_speaker: 6,
            ..Default::default()
        };
        let manifest = Manifest {
            root: PathBuf::new(),
            entries: (0..cfg.total_utterances()).map(|i| entry_for(&cfg, i)).collect(),
        };
        let trials = build_trials(&manifest, 1);
        for label in [TrialLabel::Target, TrialLabel::Nontarget, TrialLabel::Spoof] {
            assert!(trials.count(label) > 0, "{label}");
        }
        for t in trials.trials() {
            let enroll = manifest.find(&t.enroll_id).unwrap();
            let test = manifest.find(&t.test_id).unwrap();
            assert!(!enroll.spoof);
            match t.label {
                TrialLabel::Target => assert!(!test.spoof && test.speaker_id == enroll.speaker_id),
                TrialLabel::Nontarget => {
                    assert!(!test.spoof && test.speaker_id != enroll.speaker_id)
                }
                TrialLabel::Spoof => assert!(test.spoof),
                TrialLabel::Unknown => unreachable!(),
            }
        }
    }
}
