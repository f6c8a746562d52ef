//! Model-based offline agent: learn a latent world model from the dataset,
//! then train an actor-critic purely on imagined rollouts.
//!
//! Training has two strictly ordered phases. Phase one fits the world model
//! (reconstruction, reward, and KL losses) on sequence batches; no policy
//! update happens until it completes. Phase two freezes the model, filters
//! posterior states from data as starting points, rolls the dynamics forward
//! under the current policy, and optimizes the actor against λ-returns over
//! ensemble-disagreement-penalized rewards while the critic regresses onto
//! those same returns. The simulator is never stepped; acting happens only
//! at evaluation time, through the model's filter.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{sample_sequences, Dataset, Distribution};
use crate::env::Frame;
use crate::nn::{
    gru_step, read_section, Activation, Adam, GruVars, LayerSpec, Network, NetworkSpec, Tape,
    Tensor, Var,
};
use crate::world_model::{penalized_reward_on_tape, LatentState, WorldModel, WorldModelConfig};

use super::common::{dataset_geometry, hard_copy, hcat, mix_seed, open_agent_as, save_agent};
use super::{
    ensure_finite, grad_abort, steps_per_epoch, Agent, AgentError, AgentKind, TrainReport,
    TrainSchedule,
};

/// Which training phase a model-based run is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainPhase {
    /// Fitting the world model on observed sequences.
    Model,
    /// Training actor and critic on imagined rollouts under a frozen model.
    Policy,
}

impl TrainPhase {
    pub fn label(&self) -> &'static str {
        match self {
            TrainPhase::Model => "model",
            TrainPhase::Policy => "policy",
        }
    }
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Default weight on the ensemble-disagreement penalty for a dataset's
/// behavioral distribution. Broad random data supports a lighter touch;
/// everything narrower gets the strong default.
pub fn default_penalty_lambda(distribution: Distribution) -> f64 {
    match distribution {
        Distribution::Random => 3.0,
        _ => 10.0,
    }
}

/// Configuration for [`OfflineDv2Agent`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dv2Config {
    pub wm: WorldModelConfig,
    /// Hidden width of the actor and critic MLPs on latent features.
    pub hidden: usize,
    /// Imagination rollout length.
    pub horizon: usize,
    /// Length of the filtered sequences whose posterior states seed
    /// imagination (also the world-model training sequence length).
    pub seq_len: usize,
    /// Mixing weight of the λ-return (0 = one-step bootstrap, 1 = pure
    /// Monte-Carlo to the horizon).
    pub lambda_return: f64,
    pub gamma: f64,
    /// Weight on the ensemble-disagreement penalty subtracted from imagined
    /// rewards; see [`default_penalty_lambda`].
    pub penalty_lambda: f64,
    /// Entropy bonus weight on the policy's pre-squash Gaussian.
    pub entropy_scale: f64,
    /// Floor of the policy stddev (squashed into `[min_std, 1]`).
    pub min_std: f64,
    pub model_lr: f64,
    /// Actor and critic learning rate.
    pub ac_lr: f64,
    /// Policy steps between hard copies of the critic into its target.
    pub target_interval: u64,
}

impl Dv2Config {
    pub fn new(wm: WorldModelConfig) -> Dv2Config {
        Dv2Config {
            wm,
            hidden: 256,
            horizon: 5,
            seq_len: 8,
            lambda_return: 0.95,
            gamma: 0.99,
            penalty_lambda: 10.0,
            entropy_scale: 1e-4,
            min_std: 0.1,
            model_lr: 3e-4,
            ac_lr: 8e-5,
            target_interval: 100,
        }
    }

    /// Full-size preset with frame geometry read off `dataset`.
    pub fn for_dataset(dataset: &Dataset) -> Result<Dv2Config, AgentError> {
        let (s, _, d) = dataset_geometry(dataset)?;
        Ok(Dv2Config::new(WorldModelConfig::new(s, d)))
    }

    /// Small preset sized for single-core CPU training.
    pub fn compact_for_dataset(dataset: &Dataset) -> Result<Dv2Config, AgentError> {
        let (s, _, d) = dataset_geometry(dataset)?;
        let mut cfg = Dv2Config::new(WorldModelConfig::compact(s, d));
        cfg.hidden = 64;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        self.wm
            .validate()
            .map_err(|e| AgentError::BadConfig(e.to_string()))?;
        if self.hidden == 0 {
            return Err(AgentError::BadConfig(
                "hidden width must be positive".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(AgentError::BadConfig(
                "imagination horizon must be at least 1".into(),
            ));
        }
        if self.seq_len < 2 {
            return Err(AgentError::BadConfig(
                "sequence length must be at least 2 (one real transition)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda_return) {
            return Err(AgentError::BadConfig(format!(
                "return mixing weight {} outside [0, 1]",
                self.lambda_return
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(AgentError::BadConfig(format!(
                "discount {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(self.penalty_lambda >= 0.0 && self.penalty_lambda.is_finite()) {
            return Err(AgentError::BadConfig(
                "penalty weight must be finite and non-negative".into(),
            ));
        }
        if !(self.entropy_scale >= 0.0 && self.entropy_scale.is_finite()) {
            return Err(AgentError::BadConfig(
                "entropy weight must be finite and non-negative".into(),
            ));
        }
        if !(self.min_std > 0.0 && self.min_std <= 1.0) {
            return Err(AgentError::BadConfig(format!(
                "stddev floor {} outside (0, 1]",
                self.min_std
            )));
        }
        if !(self.model_lr > 0.0 && self.ac_lr > 0.0) {
            return Err(AgentError::BadConfig(
                "learning rates must be positive".into(),
            ));
        }
        if self.target_interval == 0 {
            return Err(AgentError::BadConfig(
                "target copy interval must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn actor_spec(&self) -> NetworkSpec {
        let f = self.wm.feature_dim();
        NetworkSpec {
            input: vec![f],
            layers: vec![
                dense(f, self.hidden, Activation::Elu),
                dense(self.hidden, self.hidden, Activation::Elu),
                // Mean and raw stddev per action dimension.
                dense(self.hidden, 2 * self.wm.action_dim, Activation::Linear),
            ],
        }
    }

    fn critic_spec(&self) -> NetworkSpec {
        let f = self.wm.feature_dim();
        NetworkSpec {
            input: vec![f],
            layers: vec![
                dense(f, self.hidden, Activation::Elu),
                dense(self.hidden, self.hidden, Activation::Elu),
                dense(self.hidden, 1, Activation::Linear),
            ],
        }
    }
}

fn dense(inputs: usize, outputs: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense {
        inputs,
        outputs,
        activation,
    }
}

/// Recurrent context carried between [`OfflineDv2Agent::act`] calls within
/// one episode.
struct ActState {
    h: Tensor,
    z: Tensor,
    action: Vec<f64>,
}

/// World model plus latent actor-critic. Acting filters each incoming frame
/// through the model's posterior (deterministically, taking the mode) and
/// squashes the actor's mean — no sampling at evaluation time.
pub struct OfflineDv2Agent {
    cfg: Dv2Config,
    pub(crate) wm: WorldModel,
    pub(crate) actor: Network,
    pub(crate) critic: Network,
    pub(crate) target_critic: Network,
    state: Option<ActState>,
}

impl OfflineDv2Agent {
    pub fn init(cfg: Dv2Config, seed: u64) -> Result<OfflineDv2Agent, AgentError> {
        cfg.validate()?;
        let wm = WorldModel::init(cfg.wm.clone(), mix_seed(seed, 10)).map_err(AgentError::from)?;
        let actor = Network::init(cfg.actor_spec(), mix_seed(seed, 11))?;
        let critic = Network::init(cfg.critic_spec(), mix_seed(seed, 12))?;
        let mut target_critic = Network::init(cfg.critic_spec(), mix_seed(seed, 12))?;
        hard_copy(&mut target_critic, &critic);
        Ok(OfflineDv2Agent {
            cfg,
            wm,
            actor,
            critic,
            target_critic,
            state: None,
        })
    }

    pub fn config(&self) -> &Dv2Config {
        &self.cfg
    }

    pub fn world_model(&self) -> &WorldModel {
        &self.wm
    }

    /// One deterministic filter step: advance the recurrent state with the
    /// previous action (when one exists), embed the newest frame, and take
    /// the posterior mode. Returns the new latent feature row.
    fn filter_step(&mut self, frame: &Frame) -> Result<Tensor, AgentError> {
        let cfg = &self.cfg.wm;
        let s = cfg.render_size;
        if frame.size() != s {
            return Err(AgentError::BadRequest(format!(
                "frame is {}px, model expects {s}px",
                frame.size()
            )));
        }

        let mut tape = Tape::new();
        let enc_bind = self.wm.encoder.bind_frozen(&mut tape);
        let post_bind = self.wm.posterior.bind_frozen(&mut tape);

        let h = match &self.state {
            Some(state) => {
                let gru_bind = self.wm.gru.bind_frozen(&mut tape);
                let gru = GruVars::from_binding(&gru_bind, 0);
                let h0 = tape.constant(state.h.clone());
                let z0 = tape.constant(state.z.clone());
                let a = tape.constant(Tensor::from_vec(&[1, cfg.action_dim], state.action.clone()));
                let x = tape.concat_cols(z0, a);
                gru_step(&mut tape, &gru, x, h0)
            }
            None => tape.constant(Tensor::zeros(&[1, cfg.deter])),
        };

        let obs = tape.constant(Tensor::from_vec(&[1, s, s, 3], frame.data().to_vec()));
        let embed = self.wm.encoder.apply(&mut tape, &enc_bind, obs);
        let post_in = tape.concat_cols(h, embed);
        let logits = self.wm.posterior.apply(&mut tape, &post_bind, post_in);
        let rows = tape.reshape(logits, &[cfg.groups, cfg.classes]);
        let p = tape.softmax(rows);
        let z_rows = tape.mode_onehot(p);
        let z = tape.reshape(z_rows, &[1, cfg.z_dim()]);

        let h_val = tape.value(h).clone();
        let z_val = tape.value(z).clone();
        let feature = hcat(&h_val, &z_val);
        self.state = Some(ActState {
            h: h_val,
            z: z_val,
            action: vec![0.0; cfg.action_dim], // filled in by `act`
        });
        Ok(feature)
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let cfg = serde_json::to_vec(&self.cfg)
            .map_err(|e| AgentError::BadConfig(format!("config serialization failed: {e}")))?;
        let mut nets: Vec<&Network> = self.wm.networks().into_iter().map(|(_, n)| n).collect();
        nets.push(&self.actor);
        nets.push(&self.critic);
        nets.push(&self.target_critic);
        save_agent(path, AgentKind::OfflineDv2, &cfg, &nets)
    }

    pub fn load(path: &Path) -> Result<OfflineDv2Agent, AgentError> {
        let (mut r, cfg_bytes) = open_agent_as(path, AgentKind::OfflineDv2)?;
        let cfg: Dv2Config = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| AgentError::BadConfig(format!("config in checkpoint is invalid: {e}")))?;
        let mut agent = OfflineDv2Agent::init(cfg, 0)?;
        for net in agent.wm.networks_mut() {
            let hash = net.spec().hash();
            read_section(&mut r, &hash, &mut net.params)?;
        }
        for net in [
            &mut agent.actor,
            &mut agent.critic,
            &mut agent.target_critic,
        ] {
            let hash = net.spec().hash();
            read_section(&mut r, &hash, &mut net.params)?;
        }
        Ok(agent)
    }
}

impl Agent for OfflineDv2Agent {
    fn reset(&mut self) {
        self.state = None;
    }

    fn act(&mut self, frames: &[Frame]) -> Result<Vec<f64>, AgentError> {
        // The recurrence carries history, so only the newest frame matters;
        // stacked observations from the evaluation loop are accepted as-is.
        let frame = frames
            .last()
            .ok_or_else(|| AgentError::BadRequest("act needs at least one frame".into()))?
            .clone();
        let d = self.cfg.wm.action_dim;
        let feature = self.filter_step(&frame)?;
        let out = self.actor.eval(&feature)?;
        let action: Vec<f64> = out.data()[..d].iter().map(|m| m.tanh()).collect();
        if let Some(state) = &mut self.state {
            state.action.copy_from_slice(&action);
        }
        Ok(action)
    }

    fn kind(&self) -> AgentKind {
        AgentKind::OfflineDv2
    }
}

/// λ-returns on tape, recursing backward from the horizon.
///
/// `rewards[t]` and `values[t]` both describe arrival state `t + 1` of a
/// rollout (reward received there, bootstrap value there), shapes `[b, 1]`.
/// The recursion is `G_t = r_t + γ ((1 − λ) v_t + λ G_{t+1})`, closed at the
/// horizon with `G_{H−1} = r_{H−1} + γ v_{H−1}`.
pub(crate) fn lambda_returns_on_tape(
    tape: &mut Tape,
    rewards: &[Var],
    values: &[Var],
    gamma: f64,
    lambda: f64,
) -> Vec<Var> {
    assert!(!rewards.is_empty(), "need at least one step");
    assert_eq!(rewards.len(), values.len(), "one value per reward");
    let h = rewards.len();
    let mut rev = Vec::with_capacity(h);
    let boot = tape.scale(values[h - 1], gamma);
    let mut g = tape.add(rewards[h - 1], boot);
    rev.push(g);
    for t in (0..h - 1).rev() {
        let keep = tape.scale(values[t], 1.0 - lambda);
        let carry = tape.scale(g, lambda);
        let blend = tape.add(keep, carry);
        let disc = tape.scale(blend, gamma);
        g = tape.add(rewards[t], disc);
        rev.push(g);
    }
    rev.reverse();
    rev
}

/// Two-phase trainer for [`OfflineDv2Agent`].
pub struct Dv2Trainer<'d> {
    dataset: &'d Dataset,
    agent: OfflineDv2Agent,
    schedule: TrainSchedule,
    model_opts: Vec<Adam>,
    opt_actor: Adam,
    opt_critic: Adam,
    /// Stream for sequence filtering and imagined code draws.
    rng: ChaCha8Rng,
    /// Separate stream for the policy's exploration noise during rollouts
    /// (the imagination call owns `rng` while the policy closure runs).
    noise_rng: ChaCha8Rng,
    seed: u64,
    model_step: u64,
    policy_step: u64,
    model_total: u64,
    policy_total: u64,
    report: TrainReport,
}

impl<'d> Dv2Trainer<'d> {
    pub fn new(
        dataset: &'d Dataset,
        cfg: Dv2Config,
        schedule: TrainSchedule,
        seed: u64,
    ) -> Result<Dv2Trainer<'d>, AgentError> {
        cfg.validate()?;
        schedule.validate(true)?;
        let (s, _, d) = dataset_geometry(dataset)?;
        if cfg.wm.render_size != s || cfg.wm.action_dim != d {
            return Err(AgentError::BadRequest(format!(
                "model expects {}px frames with {}-dim actions, dataset provides {s}px with {d}-dim",
                cfg.wm.render_size, cfg.wm.action_dim
            )));
        }

        // An epoch sweeps the transition count once in units of full
        // sequences, for both phases.
        let per_epoch = steps_per_epoch(
            dataset.header.transition_count,
            schedule.batch * cfg.seq_len,
        );
        let model_total = per_epoch * schedule.model_epochs as u64;
        let policy_total = per_epoch * schedule.agent_epochs as u64;

        let agent = OfflineDv2Agent::init(cfg, mix_seed(seed, 2))?;
        let model_opts = agent
            .wm
            .networks()
            .iter()
            .map(|_| Adam::new(agent.cfg.model_lr))
            .collect();
        let (ac_lr, _) = (agent.cfg.ac_lr, ());
        Ok(Dv2Trainer {
            dataset,
            schedule,
            model_opts,
            opt_actor: Adam::new(ac_lr),
            opt_critic: Adam::new(ac_lr),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 3)),
            noise_rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 4)),
            seed,
            model_step: 0,
            policy_step: 0,
            model_total,
            policy_total,
            report: TrainReport::new(
                AgentKind::OfflineDv2,
                &[
                    "phase",
                    "model_loss",
                    "recon_loss",
                    "reward_loss",
                    "kl",
                    "actor_loss",
                    "critic_loss",
                    "entropy",
                    "imagined_return",
                    "disagreement",
                ],
            ),
            agent,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.model_total + self.policy_total
    }

    pub fn step(&self) -> u64 {
        self.model_step + self.policy_step
    }

    pub fn is_done(&self) -> bool {
        self.model_step >= self.model_total && self.policy_step >= self.policy_total
    }

    /// Phase the next update would run in.
    pub fn phase(&self) -> TrainPhase {
        if self.model_step < self.model_total {
            TrainPhase::Model
        } else {
            TrainPhase::Policy
        }
    }

    pub fn agent(&self) -> &OfflineDv2Agent {
        &self.agent
    }

    /// Mutable agent access, so evaluation can roll episodes mid-run.
    pub fn agent_mut(&mut self) -> &mut OfflineDv2Agent {
        &mut self.agent
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn finish(self) -> (OfflineDv2Agent, TrainReport) {
        (self.agent, self.report)
    }

    /// Runs up to `n` updates, tracking env steps (must stay zero). The
    /// model phase always completes before the first policy update.
    pub fn train_steps(&mut self, n: u64) -> Result<(), AgentError> {
        let env_before = crate::env::env_steps_on_thread();
        for _ in 0..n {
            if self.model_step < self.model_total {
                self.model_update()?;
            } else if self.policy_step < self.policy_total {
                self.policy_update()?;
            } else {
                break;
            }
        }
        self.report.env_steps += crate::env::env_steps_on_thread() - env_before;
        Ok(())
    }

    fn model_update(&mut self) -> Result<(), AgentError> {
        let batch = sample_sequences(
            self.dataset,
            self.schedule.batch,
            self.agent.cfg.seq_len,
            mix_seed(self.seed, 0x3000_0000 + self.model_step),
        )?;
        let mut tape = Tape::new();
        let vars = self.agent.wm.bind(&mut tape);
        let out = self
            .agent
            .wm
            .observe(&mut tape, &vars, &batch, &mut self.rng)?;
        ensure_finite(
            "odv2",
            "model",
            self.model_step,
            &[
                ("model loss", out.metrics.total),
                ("reconstruction", out.metrics.recon),
                ("reward fit", out.metrics.reward),
            ],
        )?;
        let mut grads = tape.backward(out.loss);
        self.agent.wm.accumulate_grads(&vars, &mut grads);
        let step = self.model_step;
        for (net, opt) in self
            .agent
            .wm
            .networks_mut()
            .into_iter()
            .zip(self.model_opts.iter_mut())
        {
            opt.step(&mut net.params)
                .map_err(|e| grad_abort("odv2", "model", step, e))?;
        }
        self.report.push(
            self.model_step,
            vec![
                0.0,
                out.metrics.total,
                out.metrics.recon,
                out.metrics.reward,
                out.metrics.kl,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
        );
        self.model_step += 1;
        Ok(())
    }

    fn policy_update(&mut self) -> Result<(), AgentError> {
        let cfg = self.agent.cfg.clone();
        let d = cfg.wm.action_dim;
        let horizon = cfg.horizon;
        let batch = sample_sequences(
            self.dataset,
            self.schedule.batch,
            cfg.seq_len,
            mix_seed(self.seed, 0x4000_0000 + self.policy_step),
        )?;

        // Every filtered posterior state seeds one imagined rollout.
        let posts = self.agent.wm.filter_states(&batch, &mut self.rng)?;
        let start = LatentState::concat(&posts)?;
        let rows = start.len();

        let mut tape = Tape::new();
        let wm_vars = self.agent.wm.bind_frozen(&mut tape);
        let actor_bind = self.agent.actor.bind(&mut tape);
        let critic_bind = self.agent.critic.bind(&mut tape);
        let target_bind = self.agent.target_critic.bind_frozen(&mut tape);

        let mut entropy_terms: Vec<Var> = Vec::with_capacity(horizon);
        let imag = {
            let agent = &self.agent;
            let noise_rng = &mut self.noise_rng;
            let entropy_out = &mut entropy_terms;
            let min_std = cfg.min_std;
            // Squashed Gaussian policy: a = tanh(mu + sigma * eps) with
            // sigma in [min_std, 1]. The per-step sum of ln(sigma) is kept
            // for the entropy bonus.
            let mut policy = |tape: &mut Tape, feature: Var| {
                let out = agent.actor.apply(tape, &actor_bind, feature);
                let mu = tape.slice_cols(out, 0, d);
                let raw = tape.slice_cols(out, d, 2 * d);
                let squashed = tape.sigmoid(raw);
                let scaled = tape.scale(squashed, 1.0 - min_std);
                let sigma = tape.add_scalar(scaled, min_std);
                let ln_sigma = tape.ln(sigma);
                entropy_out.push(tape.row_sum(ln_sigma));
                let eps: Vec<f64> = (0..rows * d)
                    .map(|_| noise_rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let eps = tape.constant(Tensor::from_vec(&[rows, d], eps));
                let noise = tape.mul(sigma, eps);
                let pre = tape.add(mu, noise);
                tape.tanh(pre)
            };
            self.agent.wm.imagine(
                &mut tape,
                &wm_vars,
                &start,
                &mut policy,
                horizon,
                &mut self.rng,
            )?
        };

        // Penalized rewards and target-critic values at each arrival state.
        // The target critic is frozen but applied to live features, so value
        // gradients still reach the actor through the dynamics.
        let tilde: Vec<Var> = imag
            .rewards
            .iter()
            .zip(&imag.penalties)
            .map(|(&r, &p)| penalized_reward_on_tape(&mut tape, r, p, cfg.penalty_lambda))
            .collect();
        let values: Vec<Var> = (1..=horizon)
            .map(|t| {
                self.agent
                    .target_critic
                    .apply(&mut tape, &target_bind, imag.features[t])
            })
            .collect();
        let returns =
            lambda_returns_on_tape(&mut tape, &tilde, &values, cfg.gamma, cfg.lambda_return);

        // Actor: ascend discounted mean λ-returns plus an entropy bonus.
        let mut objective: Option<Var> = None;
        let mut entropy_sum: Option<Var> = None;
        let add_into = |tape: &mut Tape, slot: &mut Option<Var>, term: Var| {
            *slot = Some(match slot.take() {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        };
        let mut weight = 1.0;
        for t in 0..horizon {
            let m = tape.mean_all(returns[t]);
            let w = tape.scale(m, weight);
            add_into(&mut tape, &mut objective, w);
            let e = tape.mean_all(entropy_terms[t]);
            add_into(&mut tape, &mut entropy_sum, e);
            weight *= cfg.gamma;
        }
        let objective = tape.scale(objective.expect("horizon >= 1"), 1.0 / horizon as f64);
        let entropy_mean = tape.scale(entropy_sum.expect("horizon >= 1"), 1.0 / horizon as f64);
        let neg_obj = tape.neg(objective);
        let ent_term = tape.scale(entropy_mean, -cfg.entropy_scale);
        let actor_loss = tape.add(neg_obj, ent_term);

        // Critic: regress onto the same returns, detached on both sides so
        // only the critic's parameters feel this term.
        let mut critic_acc: Option<Var> = None;
        let mut weight = 1.0;
        for (&ret, &feat) in returns.iter().zip(&imag.features) {
            let sg_feat = tape.stop_grad(feat);
            let pred = self.agent.critic.apply(&mut tape, &critic_bind, sg_feat);
            let target = tape.stop_grad(ret);
            let diff = tape.sub(pred, target);
            let sq = tape.square(diff);
            let m = tape.mean_all(sq);
            let w = tape.scale(m, 0.5 * weight);
            add_into(&mut tape, &mut critic_acc, w);
            weight *= cfg.gamma;
        }
        let critic_loss = tape.scale(critic_acc.expect("horizon >= 1"), 1.0 / horizon as f64);
        let total = tape.add(actor_loss, critic_loss);

        let actor_value = tape.value(actor_loss).item();
        let critic_value = tape.value(critic_loss).item();
        ensure_finite(
            "odv2",
            "policy",
            self.policy_step,
            &[("actor loss", actor_value), ("critic loss", critic_value)],
        )?;

        // Diagnostics from the rollout values.
        let batch_mean = |tape: &Tape, v: Var| {
            let t = tape.value(v);
            t.data().iter().sum::<f64>() / t.data().len() as f64
        };
        let imagined_return =
            tilde.iter().map(|&v| batch_mean(&tape, v)).sum::<f64>() / horizon as f64;
        let disagreement = imag
            .penalties
            .iter()
            .map(|&v| batch_mean(&tape, v))
            .sum::<f64>()
            / horizon as f64;
        // Differential entropy of the pre-squash Gaussian (the trained bonus
        // plus the dimension constant).
        let entropy = tape.value(entropy_mean).item()
            + 0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());

        let mut grads = tape.backward(total);
        self.agent.actor.accumulate_grads(&actor_bind, &mut grads);
        self.agent.critic.accumulate_grads(&critic_bind, &mut grads);
        self.opt_actor
            .step(&mut self.agent.actor.params)
            .map_err(|e| grad_abort("odv2", "policy", self.policy_step, e))?;
        self.opt_critic
            .step(&mut self.agent.critic.params)
            .map_err(|e| grad_abort("odv2", "policy", self.policy_step, e))?;
        if (self.policy_step + 1).is_multiple_of(cfg.target_interval) {
            hard_copy(&mut self.agent.target_critic, &self.agent.critic);
        }

        self.report.push(
            self.model_total + self.policy_step,
            vec![
                1.0,
                0.0,
                0.0,
                0.0,
                0.0,
                actor_value,
                critic_value,
                entropy,
                imagined_return,
                disagreement,
            ],
        );
        self.policy_step += 1;
        Ok(())
    }
}

/// Trains an agent over both phases in one call.
pub fn offline_dv2_train(
    dataset: &Dataset,
    cfg: Dv2Config,
    schedule: TrainSchedule,
    seed: u64,
) -> Result<(OfflineDv2Agent, TrainReport), AgentError> {
    let mut trainer = Dv2Trainer::new(dataset, cfg, schedule, seed)?;
    let total = trainer.total_steps();
    trainer.train_steps(total)?;
    Ok(trainer.finish())
}
