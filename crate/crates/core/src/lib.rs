//! Desk-scale offline reinforcement learning from synthetic pixels.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: dense f64 tensors, tape-based reverse-mode differentiation,
//!   network descriptions, Adam, gradient checking, checkpoints.
//! - [`env`]: two pixel-rendered control tasks (point mass, two-link arm)
//!   with dynamics variants and procedural visual distractions.
//! - [`data`]: behavioral policies, the five offline dataset distributions,
//!   dataset files, and batch/sequence sampling.
//! - [`world_model`]: recurrent latent dynamics with an ensemble of
//!   transition heads whose disagreement penalizes imagined rewards.
//! - [`agents`]: four offline agents trained purely from dataset files —
//!   behavioral cloning, two augmented TD learners, and a model-based
//!   actor-critic on imagined rollouts.

pub mod agents;
pub mod data;
pub mod env;
pub mod nn;
pub mod world_model;

pub use agents::{Agent, AgentError, AgentKind, TrainReport, TrainSchedule};
pub use data::{BehavioralPolicy, DataError, Dataset, Distribution};
pub use env::{
    DistractionConfig, DistractorId, DynamicsVariant, Env, EnvConfig, Frame, ProprioState,
    Severity, Task,
};
pub use nn::{Adam, Network, NetworkSpec, Tape, Tensor, Var};
pub use world_model::{LatentState, WmError, WorldModel, WorldModelConfig};
