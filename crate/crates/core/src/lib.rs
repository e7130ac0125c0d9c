//! Spoofing-robust speaker verification back-ends over layered SSL features.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`protocol`]: the `LFT1` feature format, trial lists and score files
//! - [`synthgen`]: synthetic corpora with a spoof artifact injected at one layer
//! - [`mhfa`]: multi-head factorized attentive pooling, forward and backward
//! - [`dsu`]: feature-statistics perturbation for domain generalization
//! - [`losses`]: BCE, AAM-softmax, cosine scoring and adaptive s-norm
//! - [`trainer`]: AdamW with warmup and cosine annealing, gradient checks
//! - [`metrics`]: EER, minDCF and a-DCF
//! - [`calibration`]: logistic calibration and ASV/CM score fusion
//! - [`cli`]: the `sasv` command-line front end
//!
//! ```
//! use sasv::metrics::eer_from_scores;
//!
//! let eer = eer_from_scores(&[3.0, 2.0, 1.0], &[2.5, 0.5, 0.0]).unwrap();
//! assert!((eer - 1.0 / 3.0).abs() < 1e-12);
//! ```

pub mod calibration;
pub mod cli;
pub mod dsu;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mhfa;
pub mod model;
pub mod numerics;
pub mod protocol;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use mhfa::{MhfaConfig, MhfaParams};
pub use model::Backend;
pub use numerics::{Matrix, Rng};
pub use protocol::{LayeredFeatures, ScoreSet, TrialLabel, TrialSet};
pub use trainer::{Task, TrainConfig};
