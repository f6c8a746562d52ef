//! Sequence filtering and the world-model training loss.
//!
//! `observe` runs the recurrent state through an observed sequence, forming
//! a posterior latent at every step, and wires the three training losses on
//! tape: frame reconstruction, reward prediction, and a balanced KL that
//! pulls every ensemble transition head toward the posterior while
//! regularizing the posterior toward the heads.

use rand::Rng;

use crate::data::SequenceBatch;
use crate::nn::{gru_step, Tape, Tensor, Var};

use super::{LatentState, WmError, WmVars, WorldModel};

/// Scalar diagnostics from one filtering pass. `kl` is reported in raw nats
/// (before `kl_scale`), averaged over steps; `total` is the trained loss.
#[derive(Debug, Clone, Copy)]
pub struct ObserveMetrics {
    pub total: f64,
    pub recon: f64,
    pub reward: f64,
    pub kl: f64,
}

/// Result of filtering a sequence batch: the per-step posterior states
/// (detached values, ready to seed imagination) and the loss still on tape.
pub struct Observation {
    /// Posterior latent state after each of the `len` steps.
    pub posts: Vec<LatentState>,
    /// Total loss; call `Tape::backward` on it to train.
    pub loss: Var,
    /// Values of the individual terms.
    pub metrics: ObserveMetrics,
}

/// Both directions of a balanced KL between a posterior and one transition
/// head, each already floored by the free-nats bound. Per-sample `[b, 1]`.
/// The loss only needs the mixed scalar; unit tests inspect the sides.
#[allow(dead_code)]
pub(crate) struct KlTerms {
    /// KL(detached posterior, head): trains the head toward the posterior.
    pub toward_prior: Var,
    /// KL(posterior, detached head): regularizes the posterior.
    pub toward_post: Var,
}

/// Wires the two-sided grouped categorical KL on tape.
///
/// `p`/`lp` are posterior probabilities and log-probabilities, `lq` the
/// head's log-probabilities, all `[b * groups, classes]`. Both directions
/// have the same *value* — they differ only in which side receives
/// gradient — and each is summed over groups, floored at `free` nats per
/// sample, and mixed with weight `balance` on the toward-prior direction.
/// Returns the mixed scalar (batch mean) plus the floored per-sample terms.
#[allow(clippy::too_many_arguments)] // wiring helper; the knobs vary independently in tests
pub(crate) fn balanced_kl(
    tape: &mut Tape,
    p: Var,
    lp: Var,
    lq: Var,
    b: usize,
    groups: usize,
    balance: f64,
    free: f64,
) -> (Var, KlTerms) {
    let p_sg = tape.stop_grad(p);
    let lp_sg = tape.stop_grad(lp);
    let lq_sg = tape.stop_grad(lq);

    let direction = |tape: &mut Tape, p: Var, lp: Var, lq: Var| {
        let diff = tape.sub(lp, lq);
        let weighted = tape.mul(p, diff);
        let per_group = tape.row_sum(weighted); // [b * groups, 1]
        let grouped = tape.reshape(per_group, &[b, groups]);
        let per_sample = tape.row_sum(grouped); // [b, 1] nats
        tape.max_scalar(per_sample, free)
    };

    let toward_prior = direction(tape, p_sg, lp_sg, lq);
    let toward_post = direction(tape, p, lp, lq_sg);

    let scaled_prior = tape.scale(toward_prior, balance);
    let scaled_post = tape.scale(toward_post, 1.0 - balance);
    let mixed = tape.add(scaled_prior, scaled_post);
    let mean = tape.mean_all(mixed);
    (
        mean,
        KlTerms {
            toward_prior,
            toward_post,
        },
    )
}

impl WorldModel {
    /// Filters `batch` and wires the training loss on `tape`.
    ///
    /// The stochastic code is sampled with a straight-through gradient, so
    /// repeated calls need `rng`; a fixed seed reproduces the pass exactly.
    /// Sequences must be at least 2 steps long so there is one real
    /// transition to learn from. The reward head is only trained from step 1
    /// onward — the reward slot at step 0 is a zero placeholder, not data.
    pub fn observe<R: Rng>(
        &self,
        tape: &mut Tape,
        vars: &WmVars,
        batch: &SequenceBatch,
        rng: &mut R,
    ) -> Result<Observation, WmError> {
        self.observe_impl(tape, vars, batch, rng, true)
    }

    /// Posterior filtering only: runs the recurrence and posterior over
    /// `batch` and returns the sampled latent states, without wiring any
    /// loss. This is what policy training uses to gather imagination start
    /// states from data (the values are detached; nothing needs a backward
    /// pass), so it skips the decoder, reward, and KL graphs entirely.
    pub fn filter_states<R: Rng>(
        &self,
        batch: &SequenceBatch,
        rng: &mut R,
    ) -> Result<Vec<LatentState>, WmError> {
        let len = batch.obs.len();
        if len < 2 {
            return Err(WmError::SequenceTooShort(len));
        }
        if batch.actions.len() != len || batch.rewards.len() != len {
            return Err(WmError::BadRequest(
                "sequence batch has inconsistent obs/action/reward lengths".into(),
            ));
        }
        let b = batch.obs[0].shape()[0];
        let groups = self.cfg.groups;
        let z_dim = self.cfg.z_dim();

        let mut tape = Tape::new();
        let enc = self.encoder.bind_frozen(&mut tape);
        let post_net = self.posterior.bind_frozen(&mut tape);
        let gru_binding = self.gru.bind_frozen(&mut tape);
        let gru = crate::nn::GruVars::from_binding(&gru_binding, 0);

        let mut h = tape.constant(Tensor::zeros(&[b, self.cfg.deter]));
        let mut z = tape.constant(Tensor::zeros(&[b, z_dim]));
        let mut posts = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                let action = tape.constant(batch.actions[t].clone());
                let x = tape.concat_cols(z, action);
                h = gru_step(&mut tape, &gru, x, h);
            }
            let obs = tape.constant(batch.obs[t].clone());
            let embed = self.encoder.apply(&mut tape, &enc, obs);
            let post_in = tape.concat_cols(h, embed);
            let logits = self.posterior.apply(&mut tape, &post_net, post_in);
            let rows = tape.reshape(logits, &[b * groups, self.cfg.classes]);
            let p = tape.softmax(rows);
            let z_rows = tape.st_onehot(p, rng);
            z = tape.reshape(z_rows, &[b, z_dim]);
            posts.push(LatentState {
                h: tape.value(h).clone(),
                z: tape.value(z).clone(),
            });
        }
        Ok(posts)
    }

    /// Filtering with the sampling switch exposed: `sample = false` replaces
    /// the straight-through draw with the probability vector itself, making
    /// the whole graph smooth (used by finite-difference checks).
    pub(crate) fn observe_impl<R: Rng>(
        &self,
        tape: &mut Tape,
        vars: &WmVars,
        batch: &SequenceBatch,
        rng: &mut R,
        sample: bool,
    ) -> Result<Observation, WmError> {
        let len = batch.obs.len();
        if len < 2 {
            return Err(WmError::SequenceTooShort(len));
        }
        if batch.actions.len() != len || batch.rewards.len() != len {
            return Err(WmError::BadRequest(
                "sequence batch has inconsistent obs/action/reward lengths".into(),
            ));
        }
        let s = self.cfg.render_size;
        let b = batch.obs[0].shape()[0];
        if batch.obs[0].shape() != [b, s, s, 3] {
            return Err(WmError::BadRequest(format!(
                "observation shape {:?} does not match model input [_, {s}, {s}, 3]",
                batch.obs[0].shape()
            )));
        }
        if batch.actions[0].cols() != self.cfg.action_dim {
            return Err(WmError::BadRequest(format!(
                "action width {} does not match model action_dim {}",
                batch.actions[0].cols(),
                self.cfg.action_dim
            )));
        }

        let groups = self.cfg.groups;
        let z_dim = self.cfg.z_dim();
        let ensemble = self.priors.len();

        let mut h = tape.constant(Tensor::zeros(&[b, self.cfg.deter]));
        let mut z = tape.constant(Tensor::zeros(&[b, z_dim]));
        let mut posts = Vec::with_capacity(len);
        let mut recon_sum: Option<Var> = None;
        let mut reward_sum: Option<Var> = None;
        let mut kl_sum: Option<Var> = None;
        let accumulate = |tape: &mut Tape, slot: &mut Option<Var>, term: Var| {
            *slot = Some(match slot.take() {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        };

        for t in 0..len {
            if t > 0 {
                let action = tape.constant(batch.actions[t].clone());
                let x = tape.concat_cols(z, action);
                h = gru_step(tape, &vars.gru, x, h);
            }

            let obs = tape.constant(batch.obs[t].clone());
            let embed = self.encoder.apply(tape, &vars.encoder, obs);
            let post_in = tape.concat_cols(h, embed);
            let post_logits = self.posterior.apply(tape, &vars.posterior, post_in);
            let post_rows = tape.reshape(post_logits, &[b * groups, self.cfg.classes]);
            let p = tape.softmax(post_rows);
            let lp = tape.log_softmax(post_rows);
            let z_rows = if sample { tape.st_onehot(p, rng) } else { p };
            z = tape.reshape(z_rows, &[b, z_dim]);

            // Every transition head is pulled toward this posterior; the
            // posterior feels the average head.
            for (net, binding) in self.priors.iter().zip(&vars.priors) {
                let prior_logits = net.apply(tape, binding, h);
                let prior_rows = tape.reshape(prior_logits, &[b * groups, self.cfg.classes]);
                let lq = tape.log_softmax(prior_rows);
                let (mixed, _) = balanced_kl(
                    tape,
                    p,
                    lp,
                    lq,
                    b,
                    groups,
                    self.cfg.kl_balance,
                    self.cfg.free_nats,
                );
                let averaged = tape.scale(mixed, 1.0 / ensemble as f64);
                accumulate(tape, &mut kl_sum, averaged);
            }

            let feature = tape.concat_cols(h, z);
            let recon = self.decoder.apply(tape, &vars.decoder, feature);
            let err = tape.sub(recon, obs);
            let sq = tape.square(err);
            let sum_sq = tape.sum_all(sq);
            let recon_term = tape.scale(sum_sq, 0.5 / b as f64);
            accumulate(tape, &mut recon_sum, recon_term);

            if t > 0 {
                let predicted = self.reward.apply(tape, &vars.reward, feature);
                let target = tape.constant(batch.rewards[t].clone());
                let r_err = tape.sub(predicted, target);
                let r_sq = tape.square(r_err);
                let r_sum = tape.sum_all(r_sq);
                let reward_term = tape.scale(r_sum, 0.5 / b as f64);
                accumulate(tape, &mut reward_sum, reward_term);
            }

            posts.push(LatentState {
                h: tape.value(h).clone(),
                z: tape.value(z).clone(),
            });
        }

        let recon = tape.scale(recon_sum.expect("len >= 2"), 1.0 / len as f64);
        let reward = tape.scale(reward_sum.expect("len >= 2"), 1.0 / (len - 1) as f64);
        let kl = tape.scale(kl_sum.expect("len >= 2"), 1.0 / len as f64);
        let kl_scaled = tape.scale(kl, self.cfg.kl_scale);
        let partial = tape.add(recon, reward);
        let loss = tape.add(partial, kl_scaled);

        let metrics = ObserveMetrics {
            total: tape.value(loss).item(),
            recon: tape.value(recon).item(),
            reward: tape.value(reward).item(),
            kl: tape.value(kl).item(),
        };
        Ok(Observation {
            posts,
            loss,
            metrics,
        })
    }
}
