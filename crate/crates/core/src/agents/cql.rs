//! Conservative Q-learning on the shared augmented twin-critic pipeline.
//!
//! The critic loss adds a conservatism penalty to the TD regression: a
//! log-sum-exp over the critic's values at sampled actions (uniform draws
//! plus noised current-policy draws) minus the critic's value at the logged
//! action. Pushing that gap down deflates Q on out-of-distribution actions
//! while holding it up on the data. The actor ascends the pessimistic
//! minimum of both critics with no cloning term. With the conservatism
//! weight at zero the update reduces exactly to the plain TD update.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_batch, Dataset, Distribution};
use crate::env::{env_steps_on_thread, Frame, Task};
use crate::nn::{read_section, Adam, Tape, Tensor};

use super::common::{
    hcat, mix_seed, open_agent_as, random_shift, save_agent, NoiseSchedule, TwinCriticCore,
    VisualConfig,
};
use super::{
    ensure_finite, steps_per_epoch, Agent, AgentError, AgentKind, TrainReport, TrainSchedule,
};

/// Configuration for [`CqlAgent`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CqlConfig {
    pub net: VisualConfig,
    /// Conservatism weight. Zero disables the penalty, reducing the critic
    /// update to plain TD.
    pub alpha_cql: f64,
    /// Actions sampled per source: this many uniform draws plus this many
    /// noised current-policy draws enter the log-sum-exp. At least 2.
    pub action_samples: usize,
    /// Adam learning rate for all networks.
    pub lr: f64,
    pub gamma: f64,
    pub n_step: usize,
    /// EMA coefficient for the target critics.
    pub tau: f64,
    /// Stddev schedule shared by target smoothing and policy-action draws.
    pub noise: NoiseSchedule,
    pub noise_clip: f64,
    pub shift_pad: usize,
}

impl CqlConfig {
    pub fn new(net: VisualConfig) -> CqlConfig {
        CqlConfig {
            net,
            alpha_cql: 1.0,
            action_samples: 10,
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
        if !(self.alpha_cql >= 0.0 && self.alpha_cql.is_finite()) {
            return Err(AgentError::BadConfig(format!(
                "conservatism weight {} must be finite and non-negative",
                self.alpha_cql
            )));
        }
        if self.action_samples < 2 {
            return Err(AgentError::BadConfig(format!(
                "need at least 2 action samples per source, got {}",
                self.action_samples
            )));
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

/// Tuned conservatism weight per task and behavioral distribution.
///
/// Narrow distributions need stronger conservatism (the critic sees fewer
/// actions, so its extrapolations are wilder); broad ones need little.
pub fn cql_alpha_for(task: Task, distribution: Distribution) -> f64 {
    match (task, distribution) {
        (Task::Pointmass, Distribution::Random) => 0.5,
        (Task::Pointmass, Distribution::Mixed) => 0.5,
        (Task::Pointmass, Distribution::Medium) => 2.0,
        (Task::Pointmass, Distribution::Medexp) => 2.0,
        (Task::Pointmass, Distribution::Expert) => 5.0,
        (Task::Arm, Distribution::Random) => 0.5,
        (Task::Arm, Distribution::Mixed) => 0.5,
        (Task::Arm, Distribution::Medium) => 10.0,
        (Task::Arm, Distribution::Medexp) => 1.0,
        (Task::Arm, Distribution::Expert) => 20.0,
    }
}

/// Twin-critic agent with a conservatism-penalized critic.
pub struct CqlAgent {
    cfg: CqlConfig,
    pub(crate) core: TwinCriticCore,
}

impl CqlAgent {
    pub fn init(cfg: CqlConfig, seed: u64) -> Result<CqlAgent, AgentError> {
        cfg.validate()?;
        Ok(CqlAgent {
            core: TwinCriticCore::init(&cfg.net, seed)?,
            cfg,
        })
    }

    pub fn config(&self) -> &CqlConfig {
        &self.cfg
    }

    /// For each sample in `obs`, evaluates critic 1 on the conservatism
    /// action set (uniform plus noised policy draws) and returns the
    /// `(logsumexp, max)` pair of those values. The log-sum-exp can never
    /// fall below the largest sampled value — the bound the penalty leans
    /// on.
    pub fn logsumexp_vs_max(
        &self,
        obs: &Tensor,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<(f64, f64)>, AgentError> {
        let feat = self.core.encoder.eval(obs)?;
        let pi = self.core.actor.eval(&feat)?;
        let sampled = sampled_actions(
            &pi,
            self.cfg.action_samples,
            sigma,
            self.cfg.noise_clip,
            rng,
        );
        let n = 2 * self.cfg.action_samples;
        let feat_rep = repeat_rows_value(&feat, n);
        let q = self.core.q1.eval(&hcat(&feat_rep, &sampled))?;
        let b = feat.rows();
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let row = &q.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.push((lse, max));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let cfg = serde_json::to_vec(&self.cfg)
            .map_err(|e| AgentError::BadConfig(format!("config serialization failed: {e}")))?;
        save_agent(path, AgentKind::Cql, &cfg, &self.core.networks())
    }

    pub fn load(path: &Path) -> Result<CqlAgent, AgentError> {
        let (mut r, cfg_bytes) = open_agent_as(path, AgentKind::Cql)?;
        let cfg: CqlConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| AgentError::BadConfig(format!("config in checkpoint is invalid: {e}")))?;
        let mut agent = CqlAgent::init(cfg, 0)?;
        for net in agent.core.networks_mut() {
            let hash = net.spec().hash();
            read_section(&mut r, &hash, &mut net.params)?;
        }
        Ok(agent)
    }
}

impl Agent for CqlAgent {
    fn reset(&mut self) {}

    fn act(&mut self, frames: &[Frame]) -> Result<Vec<f64>, AgentError> {
        self.core.act_eval(&self.cfg.net, frames)
    }

    fn kind(&self) -> AgentKind {
        AgentKind::Cql
    }
}

/// Builds the conservatism action set for a batch: for each policy action
/// row, `n` uniform draws from the action box followed by `n` noised copies
/// of the policy action (clipped noise, clamped into the box). Rows for one
/// sample are contiguous, matching a consecutive row-repeat of features.
fn sampled_actions(pi: &Tensor, n: usize, sigma: f64, clip: f64, rng: &mut impl Rng) -> Tensor {
    let (b, d) = (pi.rows(), pi.cols());
    let mut data = Vec::with_capacity(b * 2 * n * d);
    for i in 0..b {
        for _ in 0..n {
            for _ in 0..d {
                data.push(rng.random_range(-1.0..=1.0));
            }
        }
        let base = &pi.data()[i * d..(i + 1) * d];
        for _ in 0..n {
            for &a in base {
                let eps: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma;
                data.push((a + eps.clamp(-clip, clip)).clamp(-1.0, 1.0));
            }
        }
    }
    Tensor::from_vec(&[b * 2 * n, d], data)
}

/// Value-space consecutive row repeat (row `i` appears `times` times in a
/// row), matching the tape's `repeat_rows`.
fn repeat_rows_value(t: &Tensor, times: usize) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(r * times * c);
    for i in 0..r {
        for _ in 0..times {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
    }
    Tensor::from_vec(&[r * times, c], data)
}

/// Segment-driven trainer for [`CqlAgent`].
pub struct CqlTrainer<'d> {
    dataset: &'d Dataset,
    agent: CqlAgent,
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

impl<'d> CqlTrainer<'d> {
    pub fn new(
        dataset: &'d Dataset,
        cfg: CqlConfig,
        schedule: TrainSchedule,
        seed: u64,
    ) -> Result<CqlTrainer<'d>, AgentError> {
        cfg.validate()?;
        schedule.validate(false)?;
        cfg.net.matches_dataset(dataset)?;
        let total_steps = steps_per_epoch(dataset.header.transition_count, schedule.batch)
            * schedule.agent_epochs as u64;
        let lr = cfg.lr;
        // Seed constants match the plain TD trainer on purpose: with the
        // conservatism weight at zero, a run here reproduces its critic
        // update bit for bit.
        Ok(CqlTrainer {
            dataset,
            agent: CqlAgent::init(cfg, mix_seed(seed, 2))?,
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
                AgentKind::Cql,
                &["critic_loss", "td_loss", "conservative_gap", "actor_loss"],
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

    pub fn agent(&self) -> &CqlAgent {
        &self.agent
    }

    /// Mutable agent access, so evaluation can roll episodes mid-run.
    pub fn agent_mut(&mut self) -> &mut CqlAgent {
        &mut self.agent
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn finish(self) -> (CqlAgent, TrainReport) {
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

        // Conservatism action set, drawn after the target pass so the
        // random stream through the TD part matches the plain TD trainer.
        let sampled = if cfg.alpha_cql > 0.0 {
            let feat = self.agent.core.encoder.eval(&obs_aug)?;
            let pi = self.agent.core.actor.eval(&feat)?;
            Some(sampled_actions(
                &pi,
                cfg.action_samples,
                sigma,
                cfg.noise_clip,
                &mut self.rng,
            ))
        } else {
            None
        };

        let (critic_loss, td_loss, gap) =
            self.critic_step(&obs_aug, &batch.actions, &targets.y, sampled.as_ref())?;
        let actor_loss = self.actor_step(&obs_aug)?;

        let tau = self.agent.cfg.tau;
        self.agent.core.ema_targets(tau);

        self.report
            .push(self.step, vec![critic_loss, td_loss, gap, actor_loss]);
        self.step += 1;
        Ok(())
    }

    /// TD regression plus, when `sampled` is present, the conservatism
    /// penalty `alpha * (mean logsumexp(sampled Q) - mean Q(s, a_data))`
    /// per critic. Returns `(total, td part, summed gap)`.
    fn critic_step(
        &mut self,
        obs_aug: &Tensor,
        actions: &Tensor,
        y: &Tensor,
        sampled: Option<&Tensor>,
    ) -> Result<(f64, f64, f64), AgentError> {
        let alpha = self.agent.cfg.alpha_cql;
        let n = 2 * self.agent.cfg.action_samples;
        let b = obs_aug.shape()[0];
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
        let td = tape.add(l1, l2);

        let (loss, gap_value) = match sampled {
            Some(sampled) => {
                let feat_rep = tape.repeat_rows(feat, n);
                let acts = tape.constant(sampled.clone());
                let qs_in = tape.concat_cols(feat_rep, acts);
                let penalty = |tape: &mut Tape,
                               net: &crate::nn::Network,
                               bind: &crate::nn::ParamBinding,
                               q_data: crate::nn::Var| {
                    let qs = net.apply(tape, bind, qs_in);
                    let grouped = tape.reshape(qs, &[b, n]);
                    let lse = tape.log_sum_exp(grouped);
                    let lse_mean = tape.mean_all(lse);
                    let data_mean = tape.mean_all(q_data);
                    tape.sub(lse_mean, data_mean)
                };
                let gap1 = penalty(&mut tape, &core.q1, &q1_bind, q1);
                let gap2 = penalty(&mut tape, &core.q2, &q2_bind, q2);
                let gap_sum = tape.add(gap1, gap2);
                let reg = tape.scale(gap_sum, alpha);
                (tape.add(td, reg), tape.value(gap_sum).item())
            }
            None => (td, 0.0),
        };

        let loss_value = tape.value(loss).item();
        let td_value = tape.value(td).item();
        ensure_finite(
            "cql",
            "critic",
            self.step,
            &[("critic loss", loss_value), ("conservative gap", gap_value)],
        )?;

        let mut grads = tape.backward(loss);
        core.encoder.accumulate_grads(&enc_bind, &mut grads);
        core.q1.accumulate_grads(&q1_bind, &mut grads);
        core.q2.accumulate_grads(&q2_bind, &mut grads);
        self.opt_encoder.step(&mut core.encoder.params)?;
        self.opt_q1.step(&mut core.q1.params)?;
        self.opt_q2.step(&mut core.q2.params)?;
        Ok((loss_value, td_value, gap_value))
    }

    /// Actor ascends the pessimistic minimum of both (frozen) critics; no
    /// cloning term. Features enter as constants, so only the actor trains.
    fn actor_step(&mut self, obs_aug: &Tensor) -> Result<f64, AgentError> {
        let core = &mut self.agent.core;
        let feat_vals = core.encoder.eval(obs_aug)?;

        let mut tape = Tape::new();
        let feat = tape.constant(feat_vals);
        let actor_bind = core.actor.bind(&mut tape);
        let pi = core.actor.apply(&mut tape, &actor_bind, feat);
        let q_in = tape.concat_cols(feat, pi);
        let q1_bind = core.q1.bind_frozen(&mut tape);
        let q1 = core.q1.apply(&mut tape, &q1_bind, q_in);
        let q2_bind = core.q2.bind_frozen(&mut tape);
        let q2 = core.q2.apply(&mut tape, &q2_bind, q_in);
        let q_min = tape.min_elem(q1, q2);
        let mean = tape.mean_all(q_min);
        let loss = tape.neg(mean);

        let value = tape.value(loss).item();
        ensure_finite("cql", "actor", self.step, &[("actor loss", value)])?;

        let mut grads = tape.backward(loss);
        core.actor.accumulate_grads(&actor_bind, &mut grads);
        self.opt_actor.step(&mut core.actor.params)?;
        Ok(value)
    }
}

/// Trains an agent over the full schedule in one call.
pub fn cql_train(
    dataset: &Dataset,
    cfg: CqlConfig,
    schedule: TrainSchedule,
    seed: u64,
) -> Result<(CqlAgent, TrainReport), AgentError> {
    let mut trainer = CqlTrainer::new(dataset, cfg, schedule, seed)?;
    let total = trainer.total_steps();
    trainer.train_steps(total)?;
    Ok(trainer.finish())
}
