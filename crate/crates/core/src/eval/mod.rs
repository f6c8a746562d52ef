//! Evaluation: episode rollouts, the offline-epoch clock, ranking metrics,
//! and the experiment protocols (standard grid, distraction robustness,
//! multitask dynamics, dataset scaling, model-epoch sweep).
//!
//! Training never touches a simulator; evaluation is the only place episodes
//! are rolled, always with deterministic actions. Every protocol emits an
//! [`EvalReport`] whose serialized form is byte-identical across runs with
//! the same inputs and seeds, and whose purity log records both the
//! environment-step count during training (which must be zero) and exactly
//! which distractors and dynamics variants appeared in training data.

mod evaluate;
mod protocols;
mod report;
mod run;
mod settings;
mod store;

pub use evaluate::{evaluate, ReturnSummary};
pub use protocols::{
    protocol_distraction, protocol_multitask, protocol_scaling, protocol_standard,
    sweep_model_epochs,
};
pub use report::{
    final_performance, median, CellStats, CurvePoint, EvalReport, GainStats, PurityLog,
};
pub use run::{train_and_eval, RunOutcome};
pub use settings::EvalSettings;
pub use store::DataStore;

use crate::agents::AgentError;
use crate::data::DataError;
use crate::env::EnvError;

/// Errors from evaluation, protocol orchestration, and report I/O.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    /// An argument is structurally invalid (empty seed list, bad fraction…).
    #[error("bad evaluation request: {0}")]
    BadRequest(String),
    /// A protocol needs a dataset that is not on disk and generation is off.
    #[error("missing dataset for {cell} (expected at {path}); generate it first or enable generation")]
    MissingDataset { cell: String, path: std::path::PathBuf },
    /// A raw return fell outside the `[0, 1000]` scale.
    #[error("return {0} is outside the [0, 1000] scale")]
    OutOfRange(f64),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Training progress normalized to a fixed `[0, 1000]` scale, so runs with
/// different gradient-step totals land on comparable curve axes.
///
/// Progress is `1000 · current / total`; it is nondecreasing and reaches
/// exactly 1000 when the last planned step completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfflineEpochClock {
    total: u64,
    current: u64,
}

impl OfflineEpochClock {
    pub fn new(total_steps: u64) -> Result<OfflineEpochClock, EvalError> {
        if total_steps == 0 {
            return Err(EvalError::BadRequest(
                "a training clock needs at least one planned step".into(),
            ));
        }
        Ok(OfflineEpochClock {
            total: total_steps,
            current: 0,
        })
    }

    /// Records `n` completed gradient steps; stepping past the planned total
    /// is an error so curve axes can never leave the scale.
    pub fn advance(&mut self, n: u64) -> Result<(), EvalError> {
        let next = self.current.saturating_add(n);
        if next > self.total {
            return Err(EvalError::BadRequest(format!(
                "clock advanced to step {next} of {} planned",
                self.total
            )));
        }
        self.current = next;
        Ok(())
    }

    /// Progress on the `[0, 1000]` scale.
    pub fn progress(&self) -> f64 {
        1000.0 * self.current as f64 / self.total as f64
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.current == self.total
    }
}

/// Maps a raw episode return from `[0, 1000]` to the `[0, 100]` report
/// scale. Anything outside the raw scale (including NaN) is rejected.
pub fn normalize_return(raw: f64) -> Result<f64, EvalError> {
    if !(0.0..=1000.0).contains(&raw) {
        return Err(EvalError::OutOfRange(raw));
    }
    Ok(raw / 10.0)
}

/// Competition ranks for one dataset: the highest value gets rank 1, and
/// tied values share the average of the positions they span, so
/// `{10, 20, 20}` ranks as `{3, 1.5, 1.5}` and the ranks of `A` entries
/// always sum to `A(A+1)/2`.
pub fn rank_with_ties(values: &[f64]) -> Result<Vec<f64>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::BadRequest("cannot rank zero entries".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(EvalError::BadRequest(format!(
            "cannot rank non-finite value {bad}"
        )));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("values are finite")
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based positions i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Mean rank per entry across several datasets. Every inner slice must rank
/// the same entries in the same order.
pub fn average_ranks(per_dataset_values: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
    let first = per_dataset_values
        .first()
        .ok_or_else(|| EvalError::BadRequest("cannot average ranks over zero datasets".into()))?;
    let n = first.len();
    let mut sums = vec![0.0; n];
    for values in per_dataset_values {
        if values.len() != n {
            return Err(EvalError::BadRequest(format!(
                "rank table is ragged: {} entries vs {n}",
                values.len()
            )));
        }
        for (s, r) in sums.iter_mut().zip(rank_with_ties(values)?) {
            *s += r;
        }
    }
    let count = per_dataset_values.len() as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}
