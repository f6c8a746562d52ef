//! Offline agents trained purely from logged pixel datasets.
//!
//! Four learners share this module: behavioral cloning ([`BcAgent`]), an
//! augmented actor-critic with a cloning term ([`DrqBcAgent`]), a
//! conservative Q-learner ([`CqlAgent`]), and a model-based actor-critic
//! that optimizes a policy inside a learned latent world model
//! ([`OfflineDv2Agent`]). All of them consume a [`Dataset`] and never touch
//! an environment: the thread-local env-step counter stays flat during
//! training, and every trainer records the delta so callers can assert it.
//!
//! Each agent comes as a pair: an agent struct (networks + `act`) and a
//! trainer that owns the optimizer state and can be driven in segments
//! (`train_steps`), so evaluation code can snapshot checkpoints mid-run.

mod bc;
mod common;
mod cql;
mod drqbc;
mod dv2;

pub use bc::{bc_train, BcAgent, BcConfig, BcTrainer};
pub use common::{
    adaptive_bc_weight, frames_to_obs, peek_agent_kind, random_shift, NoiseSchedule, VisualConfig,
};
pub(crate) use common::mix_seed;
pub use cql::{cql_alpha_for, cql_train, CqlAgent, CqlConfig, CqlTrainer};
pub use drqbc::{drqbc_train, ActorLossParts, DrqBcAgent, DrqBcConfig, DrqBcTrainer};
pub use dv2::{
    default_penalty_lambda, offline_dv2_train, Dv2Config, Dv2Trainer, OfflineDv2Agent, TrainPhase,
};

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::data::DataError;
use crate::env::Frame;
use crate::nn::NnError;
use crate::world_model::WmError;

/// Errors from agent construction, training, inference, and checkpoints.
#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    /// A configuration value is structurally invalid.
    #[error("bad agent config: {0}")]
    BadConfig(String),
    /// A runtime argument (batch, frames, dataset) does not fit the agent.
    #[error("bad request: {0}")]
    BadRequest(String),
    /// Training produced a non-finite quantity; the run must stop rather
    /// than continue on poisoned numbers. Reports exactly where.
    #[error("non-finite {quantity} in {agent} {phase} update at step {step}")]
    NonFinite {
        agent: &'static str,
        phase: &'static str,
        step: u64,
        quantity: String,
    },
    /// The file is not an agent checkpoint.
    #[error("not an agent checkpoint (bad magic bytes)")]
    BadMagic,
    /// Checkpoint format version mismatch.
    #[error("agent checkpoint version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    /// The checkpoint holds a different agent kind than requested.
    #[error("checkpoint holds a {found} agent, expected {expected}")]
    WrongKind {
        found: AgentKind,
        expected: AgentKind,
    },
    /// The stored kind label is not one this build knows.
    #[error("unknown agent kind {0:?} in checkpoint")]
    UnknownKind(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wm(#[from] WmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four agent families, used for checkpoint tagging and CLI dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AgentKind {
    /// Behavioral cloning: supervised regression onto logged actions.
    Bc,
    /// Augmented twin-critic TD learning plus a behavioral-cloning term.
    DrqBc,
    /// Conservative Q-learning on the same augmented pipeline.
    Cql,
    /// Model-based actor-critic trained on imagined latent rollouts.
    OfflineDv2,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::Bc,
        AgentKind::DrqBc,
        AgentKind::Cql,
        AgentKind::OfflineDv2,
    ];

    /// Stable lowercase label used in checkpoints, file names, and reports.
    pub fn label(self) -> &'static str {
        match self {
            AgentKind::Bc => "bc",
            AgentKind::DrqBc => "drqbc",
            AgentKind::Cql => "cql",
            AgentKind::OfflineDv2 => "odv2",
        }
    }

    /// Parses a label produced by [`AgentKind::label`].
    pub fn parse(s: &str) -> Result<AgentKind, AgentError> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| AgentError::UnknownKind(s.to_string()))
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A trained policy that maps a frame stack to an action.
///
/// `act` is deterministic: the same observation (and, for recurrent agents,
/// the same history since `reset`) always yields the same action, and every
/// component lies in `[-1, 1]`.
pub trait Agent {
    /// Clears any recurrent inference state. Stateless agents ignore it.
    fn reset(&mut self);
    /// Maps an environment frame stack (oldest first) to an action.
    fn act(&mut self, frames: &[Frame]) -> Result<Vec<f64>, AgentError>;
    /// Which family this agent belongs to.
    fn kind(&self) -> AgentKind;
}

/// How long to train, expressed in epochs over the dataset.
///
/// One epoch is a nominal pass over the data: `ceil(transitions / batch)`
/// gradient steps for flat-batch agents, and `ceil(transitions / (batch *
/// seq_len))` for the sequence phases of the model-based agent. Both phases
/// of that agent share `batch`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainSchedule {
    /// World-model epochs. Only the model-based agent reads this.
    pub model_epochs: usize,
    /// Policy / value epochs (every agent).
    pub agent_epochs: usize,
    /// Minibatch size (transitions, or sequences for the model-based agent).
    pub batch: usize,
}

impl TrainSchedule {
    /// Full-scale schedule for the model-based agent.
    pub fn model_based() -> TrainSchedule {
        TrainSchedule {
            model_epochs: 800,
            agent_epochs: 2400,
            batch: 64,
        }
    }

    /// Full-scale schedule for the flat-batch agents.
    pub fn model_free() -> TrainSchedule {
        TrainSchedule {
            model_epochs: 0,
            agent_epochs: 256,
            batch: 256,
        }
    }

    /// Checks the counts; `needs_model` additionally requires model epochs.
    pub fn validate(&self, needs_model: bool) -> Result<(), AgentError> {
        if self.agent_epochs == 0 || self.batch == 0 {
            return Err(AgentError::BadConfig(
                "agent epochs and batch size must be positive".into(),
            ));
        }
        if needs_model && self.model_epochs == 0 {
            return Err(AgentError::BadConfig(
                "model epochs must be positive for the model-based agent".into(),
            ));
        }
        Ok(())
    }
}

/// Gradient steps in one nominal pass over `transitions` at `per_step`
/// samples per step (rounded up, minimum 1).
pub(crate) fn steps_per_epoch(transitions: usize, per_step: usize) -> u64 {
    (transitions.div_ceil(per_step).max(1)) as u64
}

/// One logged training step: the step index plus one value per column of
/// the owning [`TrainReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub values: Vec<f64>,
}

/// Loss curves and bookkeeping from one training run.
///
/// `env_steps` counts environment transitions taken on this thread while
/// the trainer was running; offline training must leave it at zero.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub kind: AgentKind,
    /// Column names for [`CurveRow::values`], not counting the step index.
    pub columns: Vec<String>,
    pub rows: Vec<CurveRow>,
    pub env_steps: u64,
}

impl TrainReport {
    pub(crate) fn new(kind: AgentKind, columns: &[&str]) -> TrainReport {
        TrainReport {
            kind,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            env_steps: 0,
        }
    }

    pub(crate) fn push(&mut self, step: u64, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(CurveRow { step, values });
    }

    /// Renders the curve as CSV: a `step` column plus one per loss term.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.step.to_string());
            for v in &row.values {
                out.push(',');
                out.push_str(&format!("{v:.6e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Writes [`TrainReport::to_csv`] to `path`.
    pub fn write_csv(&self, path: &Path) -> Result<(), AgentError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_csv().as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

/// Fails with [`AgentError::NonFinite`] if any named quantity is NaN or
/// infinite. Trainers call this on every loss before applying gradients, so
/// a numeric blow-up aborts the run with its exact step index.
pub(crate) fn ensure_finite(
    agent: &'static str,
    phase: &'static str,
    step: u64,
    quantities: &[(&str, f64)],
) -> Result<(), AgentError> {
    for (name, value) in quantities {
        if !value.is_finite() {
            return Err(AgentError::NonFinite {
                agent,
                phase,
                step,
                quantity: format!("{name} = {value}"),
            });
        }
    }
    Ok(())
}

/// Attaches agent/phase/step context to a non-finite-gradient rejection from
/// the optimizer. A blow-up can slip through the loss checks (a NaN weight
/// still renders finite losses when sampling and clamping mask it) yet the
/// gradients always carry it; this keeps the abort message uniform either way.
pub(crate) fn grad_abort(
    agent: &'static str,
    phase: &'static str,
    step: u64,
    err: crate::nn::NnError,
) -> AgentError {
    match err {
        crate::nn::NnError::NonFiniteGradient { param, .. } => AgentError::NonFinite {
            agent,
            phase,
            step,
            quantity: format!("gradient of {param}"),
        },
        other => AgentError::Nn(other),
    }
}
