//! Behavioral cloning: a conv encoder and a deterministic policy head
//! trained by plain mean-squared regression onto the logged actions. No
//! critic, no augmentation — this is the floor every value-based agent is
//! compared against, and the ceiling on expert data.

use std::path::Path;

use crate::data::{sample_batch, Dataset};
use crate::env::{env_steps_on_thread, Frame};
use crate::nn::{read_section, Adam, Network, Tape, Tensor};

use super::common::{mix_seed, open_agent_as, save_agent, VisualConfig};
use super::{
    ensure_finite, steps_per_epoch, Agent, AgentError, AgentKind, TrainReport, TrainSchedule,
};

/// Configuration for [`BcAgent`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BcConfig {
    pub net: VisualConfig,
    /// Adam learning rate for encoder and policy.
    pub lr: f64,
}

impl BcConfig {
    pub fn new(net: VisualConfig) -> BcConfig {
        BcConfig { net, lr: 3e-4 }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        self.net.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AgentError::BadConfig(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Encoder plus deterministic policy trained by cloning.
pub struct BcAgent {
    cfg: BcConfig,
    pub(crate) encoder: Network,
    pub(crate) actor: Network,
}

impl BcAgent {
    pub fn init(cfg: BcConfig, seed: u64) -> Result<BcAgent, AgentError> {
        cfg.validate()?;
        Ok(BcAgent {
            encoder: Network::init(cfg.net.encoder_spec(), mix_seed(seed, 0))?,
            actor: Network::init(cfg.net.actor_spec(), mix_seed(seed, 1))?,
            cfg,
        })
    }

    pub fn config(&self) -> &BcConfig {
        &self.cfg
    }

    /// The cloning objective on a batch, value only: `mean_b ||pi(s) - a||^2`.
    /// This is exactly the loss the trainer minimizes, so tests can check
    /// gradients and invariances against it.
    pub fn cloning_loss(&self, obs: &Tensor, actions: &Tensor) -> Result<f64, AgentError> {
        let feat = self.encoder.eval(obs)?;
        let pi = self.actor.eval(&feat)?;
        if pi.shape() != actions.shape() {
            return Err(AgentError::BadRequest(format!(
                "action batch shape {:?} does not match policy output {:?}",
                actions.shape(),
                pi.shape()
            )));
        }
        let b = pi.rows() as f64;
        let sum: f64 = pi
            .data()
            .iter()
            .zip(actions.data())
            .map(|(p, a)| (p - a) * (p - a))
            .sum();
        Ok(sum / b)
    }

    /// Saves config and both networks to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let cfg = serde_json::to_vec(&self.cfg)
            .map_err(|e| AgentError::BadConfig(format!("config serialization failed: {e}")))?;
        save_agent(path, AgentKind::Bc, &cfg, &[&self.encoder, &self.actor])
    }

    /// Loads a checkpoint saved by [`BcAgent::save`].
    pub fn load(path: &Path) -> Result<BcAgent, AgentError> {
        let (mut r, cfg_bytes) = open_agent_as(path, AgentKind::Bc)?;
        let cfg: BcConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| AgentError::BadConfig(format!("config in checkpoint is invalid: {e}")))?;
        let mut agent = BcAgent::init(cfg, 0)?;
        for net in [&mut agent.encoder, &mut agent.actor] {
            let hash = net.spec().hash();
            read_section(&mut r, &hash, &mut net.params)?;
        }
        Ok(agent)
    }
}

impl Agent for BcAgent {
    fn reset(&mut self) {}

    fn act(&mut self, frames: &[Frame]) -> Result<Vec<f64>, AgentError> {
        let obs = super::common::frames_to_obs(
            frames,
            self.cfg.net.render_size,
            self.cfg.net.frame_stack,
        )?;
        let feat = self.encoder.eval(&obs)?;
        let action = self.actor.eval(&feat)?;
        Ok(action.data().to_vec())
    }

    fn kind(&self) -> AgentKind {
        AgentKind::Bc
    }
}

/// Segment-driven trainer for [`BcAgent`].
pub struct BcTrainer<'d> {
    dataset: &'d Dataset,
    agent: BcAgent,
    schedule: TrainSchedule,
    opt_encoder: Adam,
    opt_actor: Adam,
    seed: u64,
    step: u64,
    total_steps: u64,
    report: TrainReport,
}

impl<'d> BcTrainer<'d> {
    pub fn new(
        dataset: &'d Dataset,
        cfg: BcConfig,
        schedule: TrainSchedule,
        seed: u64,
    ) -> Result<BcTrainer<'d>, AgentError> {
        cfg.validate()?;
        schedule.validate(false)?;
        cfg.net.matches_dataset(dataset)?;
        let total_steps = steps_per_epoch(dataset.header.transition_count, schedule.batch)
            * schedule.agent_epochs as u64;
        let lr = cfg.lr;
        Ok(BcTrainer {
            dataset,
            agent: BcAgent::init(cfg, mix_seed(seed, 1))?,
            schedule,
            opt_encoder: Adam::new(lr),
            opt_actor: Adam::new(lr),
            seed,
            step: 0,
            total_steps,
            report: TrainReport::new(AgentKind::Bc, &["bc_loss"]),
        })
    }

    /// Gradient steps this schedule will take in total.
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Gradient steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn agent(&self) -> &BcAgent {
        &self.agent
    }

    /// Mutable agent access, so evaluation can roll episodes mid-run.
    pub fn agent_mut(&mut self) -> &mut BcAgent {
        &mut self.agent
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// Consumes the trainer, yielding the trained agent and its curves.
    pub fn finish(self) -> (BcAgent, TrainReport) {
        (self.agent, self.report)
    }

    /// Runs up to `n` gradient steps (stopping at the schedule's end) and
    /// tracks environment steps taken meanwhile — which must be zero for
    /// offline training.
    pub fn train_steps(&mut self, n: u64) -> Result<(), AgentError> {
        let env_before = env_steps_on_thread();
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.update()?;
        }
        self.report.env_steps += env_steps_on_thread() - env_before;
        Ok(())
    }

    fn update(&mut self) -> Result<(), AgentError> {
        // Rewards are irrelevant to cloning; n_step = 1 keeps every
        // transition eligible.
        let batch = sample_batch(
            self.dataset,
            self.schedule.batch,
            1,
            1.0,
            mix_seed(self.seed, 0x1000_0000 + self.step),
        )?;
        let value = self.step_on_batch(&batch.obs, &batch.actions)?;
        self.report.push(self.step, vec![value]);
        self.step += 1;
        Ok(())
    }

    /// One gradient step on a caller-supplied batch, returning the pre-step
    /// loss. Normal training resamples every step; this entry point exists
    /// so a fixed set of transitions can be descended on deterministically
    /// (interpolation checks).
    pub fn step_on_batch(&mut self, obs: &Tensor, actions: &Tensor) -> Result<f64, AgentError> {
        let b = obs.shape()[0] as f64;

        let mut tape = Tape::new();
        let obs = tape.constant(obs.clone());
        let enc_bind = self.agent.encoder.bind(&mut tape);
        let feat = self.agent.encoder.apply(&mut tape, &enc_bind, obs);
        let act_bind = self.agent.actor.bind(&mut tape);
        let pi = self.agent.actor.apply(&mut tape, &act_bind, feat);
        let target = tape.constant(actions.clone());
        let diff = tape.sub(pi, target);
        let sq = tape.square(diff);
        let sum = tape.sum_all(sq);
        let loss = tape.scale(sum, 1.0 / b);

        let value = tape.value(loss).item();
        ensure_finite("bc", "train", self.step, &[("cloning loss", value)])?;

        let mut grads = tape.backward(loss);
        self.agent.encoder.accumulate_grads(&enc_bind, &mut grads);
        self.agent.actor.accumulate_grads(&act_bind, &mut grads);
        self.opt_encoder.step(&mut self.agent.encoder.params)?;
        self.opt_actor.step(&mut self.agent.actor.params)?;
        Ok(value)
    }
}

/// Trains a cloning agent over the full schedule in one call.
pub fn bc_train(
    dataset: &Dataset,
    cfg: BcConfig,
    schedule: TrainSchedule,
    seed: u64,
) -> Result<(BcAgent, TrainReport), AgentError> {
    let mut trainer = BcTrainer::new(dataset, cfg, schedule, seed)?;
    let total = trainer.total_steps();
    trainer.train_steps(total)?;
    Ok(trainer.finish())
}
