//! Dataset generation, storage, and sampling for offline training.
//!
//! A [`Dataset`] is an ordered list of complete episodes collected from one
//! or more environment configurations by a scripted behavioral policy. Five
//! named behavioral distributions cover the competence spectrum from uniform
//! random to a tuned controller; datasets serialize to a single binary file
//! with a JSON header and a checksummed payload, and training code draws
//! either single-transition batches or contiguous sequence batches from them.

mod collect;
mod dataset;
mod sampling;
mod storage;

pub use collect::{apply_distraction_mixture, collect, make_distribution, probe_mean_return};
pub use dataset::{Dataset, DatasetHeader, EpisodeMeta, EpisodeRecord, ReturnStats};
pub use sampling::{sample_batch, sample_sequences, SequenceBatch, TransitionBatch};
pub use storage::{load, save, DATA_FORMAT_VERSION, DATA_MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvError};

/// Errors from dataset generation, serialization, and sampling.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("environment error: {0}")]
    Env(#[from] EnvError),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("dataset is empty")]
    Empty,
    #[error("datasets are incompatible: {0}")]
    ConfigMismatch(String),
    #[error(
        "calibration failed for {label} on {task}: mean return {achieved:.1} \
         outside [{lo:.0}, {hi:.0}] after {tried} candidate policies"
    )]
    CalibrationFailed {
        label: Distribution,
        task: String,
        achieved: f64,
        lo: f64,
        hi: f64,
        tried: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset format version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file is truncated: {0}")]
    Truncated(String),
    #[error("payload checksum mismatch: header says {header}, payload hashes to {actual}")]
    ChecksumMismatch { header: String, actual: String },
    #[error("header is inconsistent with content: {0}")]
    HeaderMismatch(String),
}

/// The five named behavioral distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Actions drawn uniformly from the action box.
    Random,
    /// One buffer whose exploration noise anneals from random-level to
    /// medium-level across the collection run.
    Mixed,
    /// A detuned controller with heavy action noise, calibrated so the mean
    /// episode return lands mid-scale.
    Medium,
    /// Equal parts medium and expert data.
    Medexp,
    /// The tuned controller with light action noise.
    Expert,
}

impl Distribution {
    /// All five labels in generation order.
    pub const ALL: [Distribution; 5] = [
        Distribution::Random,
        Distribution::Mixed,
        Distribution::Medium,
        Distribution::Medexp,
        Distribution::Expert,
    ];

    /// The lowercase label used in filenames and reports.
    pub fn label(self) -> &'static str {
        match self {
            Distribution::Random => "random",
            Distribution::Mixed => "mixed",
            Distribution::Medium => "medium",
            Distribution::Medexp => "medexp",
            Distribution::Expert => "expert",
        }
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Distribution {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Distribution::ALL
            .into_iter()
            .find(|d| d.label() == s)
            .ok_or_else(|| DataError::BadRequest(format!("unknown distribution label '{s}'")))
    }
}

/// A scripted behavioral policy used for data collection.
///
/// Policies are cheap, stateless functions of the proprioceptive simulator
/// state; the pixel observations in the dataset are what downstream agents
/// learn from, not what the collector looked at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BehavioralPolicy {
    /// Uniform over the action box `[-1, 1]^d`.
    Random,
    /// A PD tracking controller with zero-mean Gaussian noise of standard
    /// deviation `noise` added per action dimension, then clamped to the box.
    Pd { kp: f64, kd: f64, noise: f64 },
}

impl BehavioralPolicy {
    /// Draws one action for the environment's current state. Fails only if
    /// the environment has not been reset (the PD controller needs a state).
    pub fn action<R: Rng>(&self, env: &Env, rng: &mut R) -> Result<Vec<f64>, EnvError> {
        let dim = env.action_dim();
        Ok(match *self {
            BehavioralPolicy::Random => (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            BehavioralPolicy::Pd { kp, kd, noise } => {
                let mut a = env.pd_action(kp, kd)?;
                for v in &mut a {
                    let eps: f64 = rng.sample(rand_distr::StandardNormal);
                    *v = (*v + noise * eps).clamp(-1.0, 1.0);
                }
                a
            }
        })
    }

    /// One-line human-readable description for dataset headers.
    pub fn describe(&self) -> String {
        match *self {
            BehavioralPolicy::Random => "uniform random".to_string(),
            BehavioralPolicy::Pd { kp, kd, noise } => {
                format!("pd(kp={kp}, kd={kd}, noise={noise})")
            }
        }
    }
}

/// Splits a base seed into a stream of per-episode seeds.
///
/// This is the 64-bit finalizer from splitmix64; consecutive indices give
/// uncorrelated seeds, and the mapping is stable across platforms so datasets
/// regenerate bit-identically.
pub(crate) fn split_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15_u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
