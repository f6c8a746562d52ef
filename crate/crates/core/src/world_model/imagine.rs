//! Imagined rollouts through the learned dynamics.
//!
//! Starting from latent states (normally posteriors filtered from data),
//! the model steps its recurrent dynamics forward under a policy without
//! touching the simulator. Every step also measures how much the ensemble
//! transition heads disagree about the next code — squared distance of each
//! head's class probabilities from the ensemble mean. Far from the data the
//! heads were trained on, they extrapolate differently and the measure
//! grows, so subtracting it from the predicted reward (see
//! [`penalized_reward`]) keeps optimized behavior near the dataset.

use rand::Rng;

use crate::nn::{gru_step, Tape, Var};

use super::{LatentState, WmError, WmVars, WorldModel};

/// An imagined trajectory, still on tape so gradients flow from rewards and
/// penalties back through the dynamics into the policy.
pub struct Imagination {
    /// Latent features `[h, z]` at every visited state: `horizon + 1`
    /// entries, where entry 0 is the start state re-entered as a constant.
    pub features: Vec<Var>,
    /// Actions the policy chose at `features[0..horizon]`.
    pub actions: Vec<Var>,
    /// Predicted reward on arrival at `features[t + 1]`, shape `[batch, 1]`.
    pub rewards: Vec<Var>,
    /// Ensemble disagreement over the transition into `features[t + 1]`,
    /// shape `[batch, 1]`; non-negative by construction.
    pub penalties: Vec<Var>,
}

/// Reward with the disagreement penalty applied: `reward - lambda * penalty`.
///
/// `lambda` must be non-negative, so the result never exceeds the raw
/// reward, with equality exactly when `lambda * penalty` is zero.
pub fn penalized_reward(reward: f64, penalty: f64, lambda: f64) -> f64 {
    assert!(
        lambda >= 0.0 && penalty >= 0.0,
        "penalty and its weight are non-negative by construction"
    );
    reward - lambda * penalty
}

/// Same composition on tape, for trajectory losses: `rewards - lambda *
/// penalties`, elementwise over `[batch, 1]` columns.
pub fn penalized_reward_on_tape(tape: &mut Tape, rewards: Var, penalties: Var, lambda: f64) -> Var {
    assert!(lambda >= 0.0, "penalty weight must be non-negative");
    let scaled = tape.scale(penalties, lambda);
    tape.sub(rewards, scaled)
}

/// Value-level ensemble disagreement: the sum over members of the squared
/// distance between that member's probability vector and the ensemble mean.
///
/// Zero exactly when every member agrees; invariant to member order. For
/// grouped categorical codes, pass each member's groups concatenated — the
/// measure is additive over dimensions, so this equals the sum of per-group
/// disagreements.
pub fn ensemble_penalty(members: &[Vec<f64>]) -> f64 {
    assert!(
        members.len() >= 2,
        "disagreement needs at least two ensemble members"
    );
    let dim = members[0].len();
    assert!(
        members.iter().all(|m| m.len() == dim),
        "ensemble members must share one dimension"
    );
    let mut mean = vec![0.0; dim];
    for m in members {
        for (acc, v) in mean.iter_mut().zip(m) {
            *acc += v;
        }
    }
    let k = members.len() as f64;
    for v in &mut mean {
        *v /= k;
    }
    members
        .iter()
        .map(|m| {
            m.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

impl WorldModel {
    /// Rolls the dynamics forward `horizon` steps from `start` under the
    /// policy `actor`, on tape.
    ///
    /// `start` re-enters the tape as constants, so no gradient leaks back
    /// into whatever produced those states; the rollout itself never reads
    /// an observation. At each step the policy maps the current feature to
    /// an action, the recurrent state advances, every transition head
    /// predicts the next code's distribution, and the next code is drawn
    /// (straight-through) from the ensemble *mean* distribution. The
    /// per-step penalty is the heads' disagreement around that mean.
    ///
    /// `horizon` must be at least 1. A fixed `rng` seed reproduces the
    /// trajectory exactly.
    pub fn imagine<R: Rng>(
        &self,
        tape: &mut Tape,
        vars: &WmVars,
        start: &LatentState,
        actor: &mut dyn FnMut(&mut Tape, Var) -> Var,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Imagination, WmError> {
        if horizon == 0 {
            return Err(WmError::BadRequest(
                "imagination horizon must be at least 1".into(),
            ));
        }
        let b = start.len();
        if b == 0 {
            return Err(WmError::BadRequest("empty start batch".into()));
        }
        if start.h.cols() != self.cfg.deter || start.z.cols() != self.cfg.z_dim() {
            return Err(WmError::BadRequest(format!(
                "start state widths ({}, {}) do not match model ({}, {})",
                start.h.cols(),
                start.z.cols(),
                self.cfg.deter,
                self.cfg.z_dim()
            )));
        }

        let groups = self.cfg.groups;
        let classes = self.cfg.classes;
        let z_dim = self.cfg.z_dim();
        let ensemble = self.priors.len();

        let mut h = tape.constant(start.h.clone());
        let mut z = tape.constant(start.z.clone());
        let mut feature = tape.concat_cols(h, z);

        let mut out = Imagination {
            features: vec![feature],
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            penalties: Vec::with_capacity(horizon),
        };

        for _ in 0..horizon {
            let action = actor(tape, feature);
            let got = tape.value(action).shape().to_vec();
            if got != [b, self.cfg.action_dim] {
                return Err(WmError::BadRequest(format!(
                    "policy returned action shape {:?}, expected [{b}, {}]",
                    got, self.cfg.action_dim
                )));
            }

            let x = tape.concat_cols(z, action);
            h = gru_step(tape, &vars.gru, x, h);

            let mut probs = Vec::with_capacity(ensemble);
            for (net, binding) in self.priors.iter().zip(&vars.priors) {
                let logits = net.apply(tape, binding, h);
                let rows = tape.reshape(logits, &[b * groups, classes]);
                probs.push(tape.softmax(rows));
            }
            let mut mean = probs[0];
            for &p in &probs[1..] {
                mean = tape.add(mean, p);
            }
            let mean = tape.scale(mean, 1.0 / ensemble as f64);

            let mut penalty: Option<Var> = None;
            for &p in &probs {
                let diff = tape.sub(p, mean);
                let sq = tape.square(diff);
                let per_group = tape.row_sum(sq);
                let grouped = tape.reshape(per_group, &[b, groups]);
                let per_sample = tape.row_sum(grouped);
                penalty = Some(match penalty {
                    Some(acc) => tape.add(acc, per_sample),
                    None => per_sample,
                });
            }

            let z_rows = tape.st_onehot(mean, rng);
            z = tape.reshape(z_rows, &[b, z_dim]);
            feature = tape.concat_cols(h, z);
            let reward = self.reward.apply(tape, &vars.reward, feature);

            out.features.push(feature);
            out.actions.push(action);
            out.rewards.push(reward);
            out.penalties.push(penalty.expect("ensemble >= 2"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use crate::world_model::WorldModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> WorldModel {
        let mut cfg = WorldModelConfig::compact(16, 2);
        cfg.ensemble = 3;
        WorldModel::init(cfg, seed).unwrap()
    }

    /// A start batch built by hand: zero recurrent state, class 0 drawn in
    /// every group. Imagination needs nothing else — no observation exists.
    fn handmade_start(model: &WorldModel, batch: usize) -> LatentState {
        let cfg = model.config();
        let mut z = vec![0.0; batch * cfg.z_dim()];
        for row in 0..batch {
            for g in 0..cfg.groups {
                z[row * cfg.z_dim() + g * cfg.classes] = 1.0;
            }
        }
        LatentState {
            h: Tensor::zeros(&[batch, cfg.deter]),
            z: Tensor::from_vec(&[batch, cfg.z_dim()], z),
        }
    }

    #[test]
    fn disagreement_hand_case_two_opposed_members() {
        // Two members, one two-class group: (1,0) and (0,1), mean (1/2,1/2).
        // Each member sits at squared distance 1/2, so the total is 1.
        let penalty = ensemble_penalty(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((penalty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disagreement_is_zero_for_tied_members_and_order_invariant() {
        let tied = ensemble_penalty(&vec![vec![0.2, 0.5, 0.3]; 4]);
        assert_eq!(tied, 0.0);

        let a = vec![0.7, 0.2, 0.1];
        let b = vec![0.1, 0.6, 0.3];
        let c = vec![0.3, 0.3, 0.4];
        let p1 = ensemble_penalty(&[a.clone(), b.clone(), c.clone()]);
        let p2 = ensemble_penalty(&[c, a, b]);
        assert!((p1 - p2).abs() < 1e-15);
        assert!(p1 > 0.0);
    }

    #[test]
    fn penalized_reward_hand_case_and_upper_bound() {
        // Reward 1 with penalty 0.2 at weight 10 nets out to -1.
        assert!((penalized_reward(1.0, 0.2, 10.0) - (-1.0)).abs() < 1e-15);
        // Never above the raw reward; equal exactly when the product is 0.
        assert_eq!(penalized_reward(0.7, 0.0, 10.0), 0.7);
        assert_eq!(penalized_reward(0.7, 0.4, 0.0), 0.7);
        assert!(penalized_reward(0.7, 1e-9, 10.0) < 0.7);
    }

    proptest! {
        #[test]
        fn disagreement_never_negative(values in proptest::collection::vec(0.0f64..1.0, 12)) {
            // Three members, four dims each (normalization is irrelevant to
            // the algebra being tested).
            let members: Vec<Vec<f64>> = values.chunks(4).map(|c| c.to_vec()).collect();
            let p = ensemble_penalty(&members);
            prop_assert!(p >= 0.0);
        }

        #[test]
        fn penalized_never_exceeds_raw(
            reward in -5.0f64..5.0,
            penalty in 0.0f64..3.0,
            lambda in 0.0f64..20.0,
        ) {
            let tilde = penalized_reward(reward, penalty, lambda);
            prop_assert!(tilde <= reward);
            if lambda * penalty == 0.0 {
                prop_assert_eq!(tilde, reward);
            } else if lambda * penalty > 1e-12 {
                // Strict decrease whenever the product is resolvable at the
                // reward's magnitude (see the hand test for the exact case).
                prop_assert!(tilde < reward);
            }
        }
    }

    #[test]
    fn on_tape_penalty_matches_value_level_math() {
        let model = tiny_model(3);
        let cfg = model.config().clone();
        let start = handmade_start(&model, 2);
        let mut tape = Tape::new();
        let vars = model.bind_frozen(&mut tape);
        let mut actor = |tape: &mut Tape, _f: Var| tape.constant(Tensor::zeros(&[2, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .imagine(&mut tape, &vars, &start, &mut actor, 1, &mut rng)
            .unwrap();

        // Recompute the first step's disagreement from the heads' own
        // outputs, per batch row, in plain f64.
        let h = {
            let f = tape.value(out.features[1]);
            let mut h = Tensor::zeros(&[2, cfg.deter]);
            for r in 0..2 {
                for c in 0..cfg.deter {
                    h.data_mut()[r * cfg.deter + c] = f.data()[r * f.cols() + c];
                }
            }
            h
        };
        let per_row = model.disagreement_penalty(&h).unwrap();
        let on_tape = tape.value(out.penalties[0]);
        for (r, (&direct, &taped)) in per_row.iter().zip(on_tape.data()).enumerate() {
            assert!(
                (direct - taped).abs() < 1e-12,
                "row {r}: {direct} vs {taped}"
            );
        }
    }

    #[test]
    fn rejects_zero_horizon_empty_start_and_bad_actor_shape() {
        let model = tiny_model(4);
        let start = handmade_start(&model, 2);

        let mut tape = Tape::new();
        let vars = model.bind_frozen(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ok_actor = |tape: &mut Tape, _f: Var| tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            model.imagine(&mut tape, &vars, &start, &mut ok_actor, 0, &mut rng),
            Err(WmError::BadRequest(_))
        ));

        let empty = LatentState {
            h: Tensor::zeros(&[0, model.config().deter]),
            z: Tensor::zeros(&[0, model.config().z_dim()]),
        };
        assert!(matches!(
            model.imagine(&mut tape, &vars, &empty, &mut ok_actor, 1, &mut rng),
            Err(WmError::BadRequest(_))
        ));

        let mut bad_actor = |tape: &mut Tape, _f: Var| tape.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(
            model.imagine(&mut tape, &vars, &start, &mut bad_actor, 1, &mut rng),
            Err(WmError::BadRequest(_))
        ));
    }

    #[test]
    fn trajectory_has_exactly_horizon_steps() {
        let model = tiny_model(5);
        let start = handmade_start(&model, 3);
        for horizon in [1usize, 5] {
            let mut tape = Tape::new();
            let vars = model.bind_frozen(&mut tape);
            let mut actor = |tape: &mut Tape, _f: Var| tape.constant(Tensor::zeros(&[3, 2]));
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let out = model
                .imagine(&mut tape, &vars, &start, &mut actor, horizon, &mut rng)
                .unwrap();
            assert_eq!(out.features.len(), horizon + 1);
            assert_eq!(out.actions.len(), horizon);
            assert_eq!(out.rewards.len(), horizon);
            assert_eq!(out.penalties.len(), horizon);
            for (r, p) in out.rewards.iter().zip(&out.penalties) {
                assert_eq!(tape.value(*r).shape(), &[3, 1]);
                assert_eq!(tape.value(*p).shape(), &[3, 1]);
                assert!(tape.value(*r).all_finite());
                assert!(tape.value(*p).data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_rollout_exactly() {
        let model = tiny_model(6);
        let start = handmade_start(&model, 2);
        let run = |draw_seed: u64| {
            let mut tape = Tape::new();
            let vars = model.bind_frozen(&mut tape);
            let mut actor = |tape: &mut Tape, f: Var| {
                let t = tape.tanh(f);
                tape.slice_cols(t, 0, 2)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            let out = model
                .imagine(&mut tape, &vars, &start, &mut actor, 4, &mut rng)
                .unwrap();
            out.rewards
                .iter()
                .map(|&r| tape.value(r).data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43), "different draws should diverge");
    }

    #[test]
    fn reward_and_penalty_gradients_reach_the_policy() {
        // Frozen model, trainable linear policy: the only leaf on the tape
        // is the policy matrix, and both heads' outputs must pull on it
        // through the recurrent dynamics.
        let model = tiny_model(7);
        let cfg = model.config().clone();
        let start = handmade_start(&model, 2);
        let mut tape = Tape::new();
        let vars = model.bind_frozen(&mut tape);
        let w = tape.leaf(Tensor::from_vec(
            &[cfg.feature_dim(), cfg.action_dim],
            (0..cfg.feature_dim() * cfg.action_dim)
                .map(|i| ((i % 7) as f64 - 3.0) * 0.05)
                .collect(),
        ));
        let mut actor = |tape: &mut Tape, f: Var| {
            let a = tape.matmul(f, w);
            tape.tanh(a)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = model
            .imagine(&mut tape, &vars, &start, &mut actor, 3, &mut rng)
            .unwrap();

        let mut objective: Option<Var> = None;
        for (&r, &p) in out.rewards.iter().zip(&out.penalties) {
            let tilde = penalized_reward_on_tape(&mut tape, r, p, 10.0);
            let m = tape.mean_all(tilde);
            objective = Some(match objective {
                Some(acc) => tape.add(acc, m),
                None => m,
            });
        }
        let objective = objective.unwrap();
        let grads = tape.backward(objective);
        let gw = grads.get(w).expect("policy must receive gradient");
        assert!(gw.data().iter().any(|&g| g != 0.0));
        assert!(gw.all_finite());
    }
}
