//! Shift-augmented twin-critic TD learning with an adaptive
//! behavioral-cloning term on the actor.
//!
//! Per update: (1) observations and next observations are independently
//! shift-augmented; (2) critics regress onto the pessimistic n-step
//! bootstrap target built from noised next actions and the minimum of two
//! EMA target critics; (3) the actor maximizes critic 1 subject to a
//! mean-squared cloning pull toward the logged action, with the value term
//! weighted by `alpha / mean|Q|` so its scale is invariant to the critic's;
//! (4) the encoder receives gradients from the critic loss only — the actor
//! loss sees encoded features as constants.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_batch, Dataset};
use crate::env::{env_steps_on_thread, Frame};
use crate::nn::{read_section, Adam, Tape, Tensor};

use super::common::{
    adaptive_bc_weight, mean_abs, mix_seed, open_agent_as, random_shift, save_agent, NoiseSchedule,
    TwinCriticCore, VisualConfig,
};
use super::{
    ensure_finite, steps_per_epoch, Agent, AgentError, AgentKind, TrainReport, TrainSchedule,
};

/// Configuration for [`DrqBcAgent`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DrqBcConfig {
    pub net: VisualConfig,
    /// Cloning trade-off: the actor's value term is weighted so that
    /// `weight * mean|Q| = alpha` on every minibatch. Must be positive.
    pub alpha: f64,
    /// Cap on that weight for degenerate batches where `mean|Q|` is ~0.
    pub max_bc_weight: f64,
    /// Adam learning rate for all networks.
    pub lr: f64,
    /// Per-step discount.
    pub gamma: f64,
    /// Reward lookahead of the bootstrap target.
    pub n_step: usize,
    /// EMA coefficient for the target critics.
    pub tau: f64,
    /// Stddev schedule of the target-smoothing noise.
    pub noise: NoiseSchedule,
    /// Hard clip on the smoothing noise.
    pub noise_clip: f64,
    /// Maximum shift (pixels) of the random augmentation.
    pub shift_pad: usize,
}

impl DrqBcConfig {
    pub fn new(net: VisualConfig) -> DrqBcConfig {
        DrqBcConfig {
            net,
            alpha: 2.5,
            max_bc_weight: 1e6,
            lr: 1e-4,
            gamma: 0.99,
            n_step: 3,
            tau: 0.01,
            noise: NoiseSchedule::default(),
            noise_clip: 0.3,
            shift_pad: 4,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        self.net.validate()?;
        self.noise.validate()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AgentError::BadConfig(format!(
                "cloning trade-off alpha {} must be positive",
                self.alpha
            )));
        }
        if !(self.max_bc_weight > 0.0 && self.max_bc_weight.is_finite()) {
            return Err(AgentError::BadConfig(
                "max cloning weight must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AgentError::BadConfig(
                "learning rate must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(AgentError::BadConfig(format!(
                "discount {} outside (0, 1]",
                self.gamma
            )));
        }
        if self.n_step == 0 {
            return Err(AgentError::BadConfig("n_step must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(AgentError::BadConfig(format!(
                "target EMA coefficient {} outside (0, 1]",
                self.tau
            )));
        }
        if !(self.noise_clip >= 0.0 && self.noise_clip.is_finite()) {
            return Err(AgentError::BadConfig(
                "noise clip must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The actor objective broken into its parts, for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct ActorLossParts {
    /// Weight on the value term, `alpha / mean|Q|` (capped).
    pub lambda: f64,
    /// Mean absolute critic-1 value over the minibatch at the actor's
    /// current actions.
    pub mean_abs_q: f64,
    /// `-lambda * mean Q1(s, pi(s))`.
    pub value_term: f64,
    /// `mean ||pi(s) - a||^2`; exactly zero when the policy already
    /// reproduces the logged actions.
    pub bc_term: f64,
    /// `value_term + bc_term` — the trained actor loss.
    pub total: f64,
}

/// Twin-critic agent with cloning-regularized actor.
pub struct DrqBcAgent {
    cfg: DrqBcConfig,
    pub(crate) core: TwinCriticCore,
}

impl DrqBcAgent {
    pub fn init(cfg: DrqBcConfig, seed: u64) -> Result<DrqBcAgent, AgentError> {
        cfg.validate()?;
        Ok(DrqBcAgent {
            core: TwinCriticCore::init(&cfg.net, seed)?,
            cfg,
        })
    }

    pub fn config(&self) -> &DrqBcConfig {
        &self.cfg
    }

    /// Evaluates the actor objective on a batch, value-space. This mirrors
    /// the trainer's actor tape term for term (same encoder, same critic 1,
    /// same weighting), so invariants can be checked cheaply from outside.
    pub fn actor_loss_parts(
        &self,
        obs: &Tensor,
        actions: &Tensor,
    ) -> Result<ActorLossParts, AgentError> {
        let feat = self.core.encoder.eval(obs)?;
        let pi = self.core.actor.eval(&feat)?;
        if pi.shape() != actions.shape() {
            return Err(AgentError::BadRequest(format!(
                "action batch shape {:?} does not match policy output {:?}",
                actions.shape(),
                pi.shape()
            )));
        }
        let q = self.core.q1.eval(&super::common::hcat(&feat, &pi))?;
        let b = pi.rows() as f64;
        let mean_q = q.data().iter().sum::<f64>() / q.data().len() as f64;
        let mean_abs_q = mean_abs(&q);
        let lambda = adaptive_bc_weight(self.cfg.alpha, mean_abs_q, self.cfg.max_bc_weight);
        let bc_term = pi
            .data()
            .iter()
            .zip(actions.data())
            .map(|(p, a)| (p - a) * (p - a))
            .sum::<f64>()
            / b;
        let value_term = -lambda * mean_q;
        Ok(ActorLossParts {
            lambda,
            mean_abs_q,
            value_term,
            bc_term,
            total: value_term + bc_term,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let cfg = serde_json::to_vec(&self.cfg)
            .map_err(|e| AgentError::BadConfig(format!("config serialization failed: {e}")))?;
        save_agent(path, AgentKind::DrqBc, &cfg, &self.core.networks())
    }

    pub fn load(path: &Path) -> Result<DrqBcAgent, AgentError> {
        let (mut r, cfg_bytes) = open_agent_as(path, AgentKind::DrqBc)?;
        let cfg: DrqBcConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| AgentError::BadConfig(format!("config in checkpoint is invalid: {e}")))?;
        let mut agent = DrqBcAgent::init(cfg, 0)?;
        for net in agent.core.networks_mut() {
            let hash = net.spec().hash();
            read_section(&mut r, &hash, &mut net.params)?;
        }
        Ok(agent)
    }
}

impl Agent for DrqBcAgent {
    fn reset(&mut self) {}

    fn act(&mut self, frames: &[Frame]) -> Result<Vec<f64>, AgentError> {
        self.core.act_eval(&self.cfg.net, frames)
    }

    fn kind(&self) -> AgentKind {
        AgentKind::DrqBc
    }
}

struct ActorStepMetrics {
    actor_loss: f64,
    bc_term: f64,
    lambda: f64,
    mean_abs_q: f64,
}

/// Segment-driven trainer for [`DrqBcAgent`].
pub struct DrqBcTrainer<'d> {
    dataset: &'d Dataset,
    agent: DrqBcAgent,
    schedule: TrainSchedule,
    opt_encoder: Adam,
    opt_actor: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    rng: ChaCha8Rng,
    seed: u64,
    step: u64,
    total_steps: u64,
    report: TrainReport,
}

impl<'d> DrqBcTrainer<'d> {
    pub fn new(
        dataset: &'d Dataset,
        cfg: DrqBcConfig,
        schedule: TrainSchedule,
        seed: u64,
    ) -> Result<DrqBcTrainer<'d>, AgentError> {
        cfg.validate()?;
        schedule.validate(false)?;
        cfg.net.matches_dataset(dataset)?;
        let total_steps = steps_per_epoch(dataset.header.transition_count, schedule.batch)
            * schedule.agent_epochs as u64;
        let lr = cfg.lr;
        Ok(DrqBcTrainer {
            dataset,
            agent: DrqBcAgent::init(cfg, mix_seed(seed, 2))?,
            schedule,
            opt_encoder: Adam::new(lr),
            opt_actor: Adam::new(lr),
            opt_q1: Adam::new(lr),
            opt_q2: Adam::new(lr),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 3)),
            seed,
            step: 0,
            total_steps,
            report: TrainReport::new(
                AgentKind::DrqBc,
                &[
                    "critic_loss",
                    "actor_loss",
                    "bc_term",
                    "lambda",
                    "mean_abs_q",
                ],
            ),
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn agent(&self) -> &DrqBcAgent {
        &self.agent
    }

    /// Mutable agent access, so evaluation can roll episodes mid-run.
    pub fn agent_mut(&mut self) -> &mut DrqBcAgent {
        &mut self.agent
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn finish(self) -> (DrqBcAgent, TrainReport) {
        (self.agent, self.report)
    }

    /// Runs up to `n` gradient steps, tracking env steps (must stay zero).
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
        let cfg = &self.agent.cfg;
        let batch = sample_batch(
            self.dataset,
            self.schedule.batch,
            cfg.n_step,
            cfg.gamma,
            mix_seed(self.seed, 0x2000_0000 + self.step),
        )?;

        // Independent shifts for current and bootstrap observations. The
        // actions and rewards ride through untouched: augmentation only
        // re-renders pixels, never relabels.
        let obs_aug = random_shift(&batch.obs, cfg.shift_pad, &mut self.rng);
        let next_aug = random_shift(&batch.next_obs, cfg.shift_pad, &mut self.rng);

        let sigma = cfg.noise.stddev(self.step);
        let targets = self.agent.core.td_targets(
            &next_aug,
            &batch.rewards,
            batch.discount,
            sigma,
            cfg.noise_clip,
            &mut self.rng,
        )?;

        let critic_loss = self.critic_step(&obs_aug, &batch.actions, &targets.y)?;
        let actor = self.actor_step(&obs_aug, &batch.actions)?;

        let tau = self.agent.cfg.tau;
        self.agent.core.ema_targets(tau);

        self.report.push(
            self.step,
            vec![
                critic_loss,
                actor.actor_loss,
                actor.bc_term,
                actor.lambda,
                actor.mean_abs_q,
            ],
        );
        self.step += 1;
        Ok(())
    }

    /// TD regression of both critics onto `y`; the encoder trains here and
    /// only here.
    fn critic_step(
        &mut self,
        obs_aug: &Tensor,
        actions: &Tensor,
        y: &Tensor,
    ) -> Result<f64, AgentError> {
        let core = &mut self.agent.core;
        let mut tape = Tape::new();
        let obs = tape.constant(obs_aug.clone());
        let enc_bind = core.encoder.bind(&mut tape);
        let feat = core.encoder.apply(&mut tape, &enc_bind, obs);
        let act = tape.constant(actions.clone());
        let q_in = tape.concat_cols(feat, act);
        let q1_bind = core.q1.bind(&mut tape);
        let q1 = core.q1.apply(&mut tape, &q1_bind, q_in);
        let q2_bind = core.q2.bind(&mut tape);
        let q2 = core.q2.apply(&mut tape, &q2_bind, q_in);
        let target = tape.constant(y.clone());
        let d1 = tape.sub(q1, target);
        let s1 = tape.square(d1);
        let l1 = tape.mean_all(s1);
        let d2 = tape.sub(q2, target);
        let s2 = tape.square(d2);
        let l2 = tape.mean_all(s2);
        let loss = tape.add(l1, l2);

        let value = tape.value(loss).item();
        ensure_finite("drqbc", "critic", self.step, &[("critic loss", value)])?;

        let mut grads = tape.backward(loss);
        core.encoder.accumulate_grads(&enc_bind, &mut grads);
        core.q1.accumulate_grads(&q1_bind, &mut grads);
        core.q2.accumulate_grads(&q2_bind, &mut grads);
        self.opt_encoder.step(&mut core.encoder.params)?;
        self.opt_q1.step(&mut core.q1.params)?;
        self.opt_q2.step(&mut core.q2.params)?;
        Ok(value)
    }

    /// Actor update: `-lambda * mean Q1(s, pi(s)) + mean ||pi(s) - a||^2`.
    ///
    /// Features enter as constants and critic 1 is bound frozen, so the
    /// backward pass reaches the actor parameters alone — the encoder gets
    /// gradients only from the critic loss by construction.
    fn actor_step(
        &mut self,
        obs_aug: &Tensor,
        actions: &Tensor,
    ) -> Result<ActorStepMetrics, AgentError> {
        let cfg = &self.agent.cfg;
        let core = &mut self.agent.core;
        let feat_vals = core.encoder.eval(obs_aug)?;
        let b = feat_vals.rows() as f64;

        let mut tape = Tape::new();
        let feat = tape.constant(feat_vals);
        let actor_bind = core.actor.bind(&mut tape);
        let pi = core.actor.apply(&mut tape, &actor_bind, feat);
        let q1_bind = core.q1.bind_frozen(&mut tape);
        let q_in = tape.concat_cols(feat, pi);
        let q = core.q1.apply(&mut tape, &q1_bind, q_in);

        let mean_abs_q = mean_abs(tape.value(q));
        let lambda = adaptive_bc_weight(cfg.alpha, mean_abs_q, cfg.max_bc_weight);

        let mean_q = tape.mean_all(q);
        let value_term = tape.scale(mean_q, -lambda);
        let a_data = tape.constant(actions.clone());
        let diff = tape.sub(pi, a_data);
        let sq = tape.square(diff);
        let sum = tape.sum_all(sq);
        let bc = tape.scale(sum, 1.0 / b);
        let loss = tape.add(value_term, bc);

        let loss_value = tape.value(loss).item();
        let bc_value = tape.value(bc).item();
        ensure_finite(
            "drqbc",
            "actor",
            self.step,
            &[
                ("actor loss", loss_value),
                ("cloning term", bc_value),
                ("value weight", lambda),
            ],
        )?;

        let mut grads = tape.backward(loss);
        core.actor.accumulate_grads(&actor_bind, &mut grads);
        self.opt_actor.step(&mut core.actor.params)?;
        Ok(ActorStepMetrics {
            actor_loss: loss_value,
            bc_term: bc_value,
            lambda,
            mean_abs_q,
        })
    }
}

/// Trains an agent over the full schedule in one call.
pub fn drqbc_train(
    dataset: &Dataset,
    cfg: DrqBcConfig,
    schedule: TrainSchedule,
    seed: u64,
) -> Result<(DrqBcAgent, TrainReport), AgentError> {
    let mut trainer = DrqBcTrainer::new(dataset, cfg, schedule, seed)?;
    let total = trainer.total_steps();
    trainer.train_steps(total)?;
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect, BehavioralPolicy, Distribution};
    use crate::env::{EnvConfig, Task};

    fn tiny_env() -> EnvConfig {
        let mut cfg = EnvConfig::new(Task::Pointmass);
        cfg.render_size = 16;
        cfg.frame_stack = 2;
        cfg.episode_len = 25;
        cfg
    }

    fn tiny_visual() -> VisualConfig {
        VisualConfig {
            render_size: 16,
            frame_stack: 2,
            action_dim: 2,
            conv_channels: [2, 3, 3],
            repr: 8,
            hidden: 16,
        }
    }

    fn tiny_dataset(transitions: usize, seed: u64) -> Dataset {
        collect(
            &tiny_env(),
            &BehavioralPolicy::Random,
            transitions,
            seed,
            Distribution::Random,
        )
        .unwrap()
    }

    fn tiny_schedule(epochs: usize, batch: usize) -> TrainSchedule {
        TrainSchedule {
            model_epochs: 0,
            agent_epochs: epochs,
            batch,
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        let good = DrqBcConfig::new(tiny_visual());
        assert!(good.validate().is_ok());

        let mut c = good.clone();
        c.alpha = 0.0;
        assert!(c.validate().is_err(), "alpha must be strictly positive");
        let mut c = good.clone();
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.n_step = 0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.noise_clip = -0.1;
        assert!(c.validate().is_err());
        let mut c = good;
        c.max_bc_weight = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cloning_weight_identity_holds_on_real_updates() {
        let dataset = tiny_dataset(100, 7);
        let cfg = DrqBcConfig::new(tiny_visual());
        let alpha = cfg.alpha;
        let mut trainer = DrqBcTrainer::new(&dataset, cfg, tiny_schedule(1, 8), 1).unwrap();
        trainer.train_steps(6).unwrap();
        assert_eq!(trainer.report().rows.len(), 6);
        for row in &trainer.report().rows {
            let lambda = row.values[3];
            let mean_abs_q = row.values[4];
            assert!(
                (lambda * mean_abs_q - alpha).abs() <= 1e-9 * alpha,
                "weight identity broke: {lambda} * {mean_abs_q} != {alpha}"
            );
        }
        assert_eq!(trainer.report().env_steps, 0);
    }

    #[test]
    fn bc_term_vanishes_when_policy_reproduces_the_actions() {
        let dataset = tiny_dataset(100, 8);
        let agent = DrqBcAgent::init(DrqBcConfig::new(tiny_visual()), 3).unwrap();
        let batch = sample_batch(&dataset, 6, 3, 0.99, 42).unwrap();

        // Feed the policy's own outputs back as the "logged" actions.
        let feat = agent.core.encoder.eval(&batch.obs).unwrap();
        let pi = agent.core.actor.eval(&feat).unwrap();
        let parts = agent.actor_loss_parts(&batch.obs, &pi).unwrap();
        assert_eq!(parts.bc_term, 0.0, "cloning term must vanish exactly");
        assert_eq!(parts.total, parts.value_term);

        // And with the real logged actions it is strictly positive.
        let parts = agent.actor_loss_parts(&batch.obs, &batch.actions).unwrap();
        assert!(parts.bc_term > 0.0);
    }

    #[test]
    fn actor_loss_parts_compose_as_documented() {
        let dataset = tiny_dataset(100, 9);
        let agent = DrqBcAgent::init(DrqBcConfig::new(tiny_visual()), 5).unwrap();
        let batch = sample_batch(&dataset, 5, 3, 0.99, 7).unwrap();
        let parts = agent.actor_loss_parts(&batch.obs, &batch.actions).unwrap();

        assert!(
            (parts.lambda * parts.mean_abs_q - 2.5).abs() < 1e-9 * 2.5,
            "lambda is alpha over mean |Q|"
        );
        assert!((parts.total - (parts.value_term + parts.bc_term)).abs() < 1e-15);

        // Recompute the value term by hand.
        let feat = agent.core.encoder.eval(&batch.obs).unwrap();
        let pi = agent.core.actor.eval(&feat).unwrap();
        let q = agent
            .core
            .q1
            .eval(&super::super::common::hcat(&feat, &pi))
            .unwrap();
        let mean_q = q.data().iter().sum::<f64>() / q.data().len() as f64;
        assert!((parts.value_term - (-parts.lambda * mean_q)).abs() < 1e-12);
    }

    #[test]
    fn actor_step_trains_only_the_actor() {
        let dataset = tiny_dataset(100, 10);
        let mut trainer = DrqBcTrainer::new(
            &dataset,
            DrqBcConfig::new(tiny_visual()),
            tiny_schedule(1, 6),
            2,
        )
        .unwrap();
        let batch = sample_batch(&dataset, 6, 3, 0.99, 11).unwrap();

        let snap = |t: &DrqBcTrainer| -> Vec<Vec<f64>> {
            t.agent
                .core
                .networks()
                .iter()
                .map(|n| {
                    n.params
                        .iter()
                        .flat_map(|p| p.values.data().to_vec())
                        .collect()
                })
                .collect()
        };
        let before = snap(&trainer);
        trainer.actor_step(&batch.obs, &batch.actions).unwrap();
        let after = snap(&trainer);

        // Order: encoder, actor, q1, q2, target_q1, target_q2.
        assert_eq!(before[0], after[0], "encoder must not move on actor step");
        assert_ne!(before[1], after[1], "actor must move");
        assert_eq!(before[2], after[2], "critic 1 must not move on actor step");
        assert_eq!(before[3], after[3], "critic 2 must not move on actor step");
        assert_eq!(before[4], after[4]);
        assert_eq!(before[5], after[5]);
    }

    #[test]
    fn critic_step_trains_encoder_and_critics_not_actor() {
        let dataset = tiny_dataset(100, 12);
        let mut trainer = DrqBcTrainer::new(
            &dataset,
            DrqBcConfig::new(tiny_visual()),
            tiny_schedule(1, 6),
            4,
        )
        .unwrap();
        let batch = sample_batch(&dataset, 6, 3, 0.99, 13).unwrap();
        let y = Tensor::from_vec(&[6, 1], vec![0.5; 6]);

        let actor_before: Vec<f64> = trainer.agent.core.actor.params[0].values.data().to_vec();
        let encoder_before: Vec<f64> = trainer.agent.core.encoder.params[0].values.data().to_vec();
        trainer.critic_step(&batch.obs, &batch.actions, &y).unwrap();
        assert_eq!(
            actor_before,
            trainer.agent.core.actor.params[0].values.data(),
            "actor must not move on critic step"
        );
        assert_ne!(
            encoder_before,
            trainer.agent.core.encoder.params[0].values.data(),
            "encoder trains with the critics"
        );
    }

    #[test]
    fn short_training_run_stays_finite_and_offline() {
        let dataset = tiny_dataset(100, 14);
        let mut cfg = DrqBcConfig::new(tiny_visual());
        cfg.lr = 3e-4;
        let mut trainer = DrqBcTrainer::new(&dataset, cfg, tiny_schedule(2, 8), 6).unwrap();
        // 100 transitions / batch 8 -> 13 steps per epoch, 26 total.
        assert_eq!(trainer.total_steps(), 26);
        trainer.train_steps(1000).unwrap();
        assert!(trainer.is_done());
        let (agent, report) = trainer.finish();
        assert_eq!(report.rows.len(), 26);
        assert_eq!(report.env_steps, 0, "offline training touched the env");
        for row in &report.rows {
            assert!(row.values.iter().all(|v| v.is_finite()));
        }
        drop(agent);
    }

    #[test]
    fn act_is_deterministic_and_checkpoint_round_trips() {
        let cfg = DrqBcConfig::new(tiny_visual());
        let mut agent = DrqBcAgent::init(cfg, 31).unwrap();
        let frame = Frame::from_data(16, vec![0.3; 16 * 16 * 3]);
        let a = agent.act(&[frame.clone(), frame.clone()]).unwrap();
        let b = agent.act(&[frame.clone(), frame.clone()]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drqbc.agent");
        agent.save(&path).unwrap();
        let mut restored = DrqBcAgent::load(&path).unwrap();
        assert_eq!(
            agent.act(&[frame.clone(), frame.clone()]).unwrap(),
            restored.act(&[frame.clone(), frame]).unwrap()
        );

        // A cloning checkpoint is not a twin-critic checkpoint.
        assert!(matches!(
            crate::agents::BcAgent::load(&path),
            Err(AgentError::WrongKind { .. })
        ));
    }
}
