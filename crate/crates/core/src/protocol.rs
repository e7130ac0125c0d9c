//! On-disk formats: layered feature tensors (LFT1), trial lists and score files.
//!
//! LFT1 layout, all little-endian:
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"LFT1\0\0\0\0"
//! 8       4           L (u32, layers)
//! 12      4           T (u32, frames)
//! 16      4           D (u32, channels)
//! 20      4·L·T·D     f32 payload, layer-major, then frame, then channel
//! ```
//!
//! Trial lists hold one `trial_id enroll_id test_id label` per line and score
//! files one `trial_id score` per line, whitespace separated.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const LFT1_MAGIC: &[u8; 8] = b"LFT1\0\0\0\0";
pub const LFT1_HEADER_LEN: usize = 20;

/// All-layer frame features of one utterance, indexed `(layer, frame, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredFeatures {
    layers: usize,
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LayeredFeatures {
    pub fn new(layers: usize, frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "layered features need L, T, D >= 1, got {layers}x{frames}x{dim}"
            )));
        }
        if data.len() != layers * frames * dim {
            return Err(Error::Shape(format!(
                "{layers}x{frames}x{dim} features need {} values, got {}",
                layers * frames * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layered features".into()));
        }
        Ok(Self {
            layers,
            frames,
            dim,
            data,
        })
    }

    pub fn from_layers(layers: &[Matrix]) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Shape("no layers given".into()))?;
        let (frames, dim) = first.shape();
        let mut data = Vec::with_capacity(layers.len() * frames * dim);
        for m in layers {
            if m.shape() != (frames, dim) {
                return Err(Error::Shape(format!(
                    "layer shape {:?} differs from {:?}",
                    m.shape(),
                    (frames, dim)
                )));
            }
            data.extend_from_slice(m.as_slice());
        }
        Self::new(layers.len(), frames, dim, data)
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The `T×D` slice of one layer.
    pub fn layer(&self, l: usize) -> &[f64] {
        let n = self.frames * self.dim;
        &self.data[l * n..(l + 1) * n]
    }

    pub fn layer_matrix(&self, l: usize) -> Matrix {
        Matrix::new(self.frames, self.dim, self.layer(l).to_vec())
            .expect("layer slice has valid shape")
    }

    pub fn get(&self, l: usize, t: usize, d: usize) -> f64 {
        self.data[(l * self.frames + t) * self.dim + d]
    }

    /// Reorders frames: output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.frames {
            return Err(Error::Shape("frame permutation length".into()));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for l in 0..self.layers {
            let layer = self.layer(l);
            for &t in order {
                data.extend_from_slice(&layer[t * self.dim..(t + 1) * self.dim]);
            }
        }
        Self::new(self.layers, self.frames, self.dim, data)
    }

    /// Serializes to LFT1. Values are narrowed to `f32`.
    pub fn to_lft1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LFT1_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(LFT1_MAGIC);
        for n in [self.layers, self.frames, self.dim] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_lft1_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != LFT1_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "LFT1\\0\\0\\0\\0".into(),
            });
        }
        if bytes.len() < LFT1_HEADER_LEN {
            return Err(Error::Truncated {
                path: path.into(),
                expected: LFT1_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let dim_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (layers, frames, dim) = (dim_at(8), dim_at(12), dim_at(16));
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("header declares empty tensor {layers}x{frames}x{dim}"),
            });
        }
        let count = layers
            .checked_mul(frames)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| Error::Format {
                path: path.into(),
                msg: "header dimensions overflow".into(),
            })?;
        let expected = LFT1_HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                path: path.into(),
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("{} trailing bytes after payload", bytes.len() - expected),
            });
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes[LFT1_HEADER_LEN..].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{}: payload value {}",
                    path.display(),
                    data.len()
                )));
            }
            data.push(v as f64);
        }
        Self::new(layers, frames, dim, data)
    }
}

pub fn write_features(path: impl AsRef<Path>, f: &LayeredFeatures) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, f.to_lft1_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<LayeredFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LayeredFeatures::from_lft1_bytes(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Spoof,
    Unknown,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Spoof => "spoof",
            TrialLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            "spoof" => Ok(TrialLabel::Spoof),
            "unknown" => Ok(TrialLabel::Unknown),
            other => Err(format!(
                "unknown label {other:?} (expected target, nontarget, spoof or unknown)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub trial_id: String,
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialSet {
    trials: Vec<Trial>,
    index: HashMap<String, usize>,
}

impl TrialSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trial: Trial) -> Result<()> {
        if trial.trial_id.is_empty() || trial.enroll_id.is_empty() || trial.test_id.is_empty() {
            return Err(Error::Config("trial ids must be non-empty".into()));
        }
        if self.index.contains_key(&trial.trial_id) {
            return Err(Error::Config(format!(
                "duplicate trial id {}",
                trial.trial_id
            )));
        }
        self.index.insert(trial.trial_id.clone(), self.trials.len());
        self.trials.push(trial);
        Ok(())
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn get(&self, trial_id: &str) -> Option<&Trial> {
        self.index.get(trial_id).map(|&i| &self.trials[i])
    }

    pub fn count(&self, label: TrialLabel) -> usize {
        self.trials.iter().filter(|t| t.label == label).count()
    }
}

pub fn parse_trials(path: impl AsRef<Path>) -> Result<TrialSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials_str(&text, path)
}

pub fn parse_trials_str(text: &str, path: &Path) -> Result<TrialSet> {
    let mut set = TrialSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: line_no,
            msg,
        };
        let [trial_id, enroll_id, test_id, label] = fields[..] else {
            return Err(parse_err(format!(
                "expected `trial_id enroll_id test_id label`, got {} fields",
                fields.len()
            )));
        };
        let label = label.parse::<TrialLabel>().map_err(parse_err)?;
        if set.index.contains_key(trial_id) {
            return Err(parse_err(format!("duplicate trial id {trial_id}")));
        }
        set.push(Trial {
            trial_id: trial_id.into(),
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            label,
        })?;
    }
    Ok(set)
}

pub fn write_trials(path: impl AsRef<Path>, set: &TrialSet) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in set.trials() {
        writeln!(w, "{} {} {} {}", t.trial_id, t.enroll_id, t.test_id, t.label)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-trial scores of one system, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub system_tag: String,
    ids: Vec<String>,
    scores: Vec<f64>,
    index: HashMap<String, usize>,
}

impl ScoreSet {
    pub fn new(system_tag: impl Into<String>) -> Self {
        Self {
            system_tag: system_tag.into(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, trial_id: impl Into<String>, score: f64) -> Result<()> {
        let trial_id = trial_id.into();
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score of {trial_id}")));
        }
        if self.index.contains_key(&trial_id) {
            return Err(Error::Config(format!("duplicate score for {trial_id}")));
        }
        self.index.insert(trial_id.clone(), self.ids.len());
        self.ids.push(trial_id);
        self.scores.push(score);
        Ok(())
    }

    pub fn get(&self, trial_id: &str) -> Option<f64> {
        self.index.get(trial_id).map(|&i| self.scores[i])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids.iter().map(String::as_str).zip(self.scores.iter().copied())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_scores_str(&text, path, tag)
}

pub fn parse_scores_str(text: &str, path: &Path, tag: impl Into<String>) -> Result<ScoreSet> {
    let mut set = ScoreSet::new(tag);
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
        let [id, score] = fields[..] else {
            return Err(parse_err(format!(
                "expected `trial_id score`, got {} fields",
                fields.len()
            )));
        };
        let score: f64 = score
            .parse()
            .map_err(|_| parse_err(format!("score {score:?} is not a number")))?;
        if !score.is_finite() {
            return Err(parse_err(format!("score for {id} is not finite")));
        }
        if set.index.contains_key(id) {
            return Err(parse_err(format!("duplicate trial id {id}")));
        }
        set.insert(id, score)?;
    }
    Ok(set)
}

/// Writes `trial_id score` lines with 17 significant digits, which round-trips `f64` exactly.
pub fn write_scores(path: impl AsRef<Path>, set: &ScoreSet) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, s) in set.iter() {
        writeln!(w, "{id} {s:.16e}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
