//! Dynamics, reward shaping, and the stepping state machine for both tasks.
//!
//! The simulators are deliberately simple (damped double integrator; two
//! independently damped revolute joints) — the point is a controllable,
//! fully deterministic pixel task, not physical fidelity. Rewards are
//! shaped per substep as
//!
//! ```text
//! r = exp(-k_p * d²) * (0.5 + 0.5 * exp(-k_v * |v|²))
//! ```
//!
//! with `d` the (task-normalized) distance to the goal, so a policy that
//! parks on the goal earns ~1 per substep and the episode return approaches
//! `episode_len * action_repeat`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{render_state, Frame};
use super::{note_env_step, EnvConfig, EnvError, ProprioState, Task};

/// Simulator substep length (seconds).
const DT: f64 = 0.05;

/// Point-mass constants: arena half-width, base mass, force gain, linear
/// drag, and the two reward sharpness coefficients.
const PM_ARENA: f64 = 1.0;
const PM_MASS: f64 = 1.0;
const PM_FORCE: f64 = 1.0;
const PM_DRAG: f64 = 0.8;
const PM_K_POS: f64 = 8.0;
const PM_K_VEL: f64 = 4.0;

/// Two-link arm constants: base link lengths, joint inertia/damping/torque
/// gain, elbow limit, and reward sharpness (distance is normalized by the
/// arm's reach so difficulty is invariant to the dynamics variant).
pub(crate) const ARM_L1: f64 = 0.36;
pub(crate) const ARM_L2: f64 = 0.28;
const ARM_INERTIA: f64 = 0.3;
const ARM_DAMP: f64 = 1.0;
const ARM_TORQUE: f64 = 1.0;
const ARM_ELBOW_LIMIT: f64 = 2.75;
const ARM_K_POS: f64 = 16.0;
const ARM_K_VEL: f64 = 2.0;

/// Result of one agent step.
#[derive(Debug, Clone)]
pub struct Step {
    /// Frame stack, oldest first, newest last.
    pub frames: Vec<Frame>,
    /// Reward summed over the action-repeat substeps (each substep's reward
    /// lies in `[0, 1]`, so this lies in `[0, action_repeat]`).
    pub reward: f64,
    pub done: bool,
    /// True when any action component had to be clamped into `[-1, 1]`.
    pub action_clamped: bool,
}

/// A single environment instance. Not thread-safe by design — run one per
/// thread and give each its own seed.
pub struct Env {
    config: EnvConfig,
    scale: f64,
    state: Option<ProprioState>,
    agent_step: usize,
    substep: u64,
    stack: VecDeque<Frame>,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let scale = config.scale();
        Ok(Env {
            config,
            scale,
            state: None,
            agent_step: 0,
            substep: 0,
            stack: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_dim(&self) -> usize {
        self.config.task.action_dim()
    }

    pub fn state(&self) -> Option<&ProprioState> {
        self.state.as_ref()
    }

    /// Agent steps taken since the last reset.
    pub fn steps_taken(&self) -> usize {
        self.agent_step
    }

    /// Start a new episode. The frame stack is filled with the initial
    /// frame repeated.
    pub fn reset(&mut self, seed: u64) -> (Vec<Frame>, ProprioState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = match self.config.task {
            Task::Pointmass => {
                let radius = rng.random_range(0.55..0.9);
                let angle = rng.random_range(0.0..2.0 * PI);
                ProprioState {
                    positions: vec![radius * angle.cos(), radius * angle.sin()],
                    velocities: vec![0.0, 0.0],
                    target: vec![0.0, 0.0],
                }
            }
            Task::Arm => {
                let theta1 = rng.random_range(-PI..PI);
                let theta2 = rng.random_range(-2.2..2.2);
                let reach = (ARM_L1 + ARM_L2) * self.scale;
                let t_angle = rng.random_range(0.0..2.0 * PI);
                let t_radius = rng.random_range(0.45..0.95) * reach;
                ProprioState {
                    positions: vec![theta1, theta2],
                    velocities: vec![0.0, 0.0],
                    target: vec![t_radius * t_angle.cos(), t_radius * t_angle.sin()],
                }
            }
        };
        self.agent_step = 0;
        self.substep = 0;
        self.state = Some(state.clone());
        let frame = render_state(&self.config, &state, 0);
        self.stack = std::iter::repeat_n(frame, self.config.frame_stack).collect();
        (self.stack.iter().cloned().collect(), state)
    }

    /// Apply one agent action for `action_repeat` substeps.
    pub fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        if self.agent_step >= self.config.episode_len {
            return Err(EnvError::EpisodeOver(self.agent_step));
        }
        if action.len() != self.config.task.action_dim() {
            return Err(EnvError::ActionDim {
                expected: self.config.task.action_dim(),
                got: action.len(),
            });
        }
        let mut clamped = false;
        let mut a = [0.0f64; 2];
        for (i, &raw) in action.iter().enumerate() {
            let c = raw.clamp(-1.0, 1.0);
            if c != raw {
                clamped = true;
            }
            a[i] = c;
        }

        let mut reward = 0.0;
        for _ in 0..self.config.action_repeat {
            match self.config.task {
                Task::Pointmass => pointmass_substep(state, &a, self.scale),
                Task::Arm => arm_substep(state, &a, self.scale),
            }
            self.substep += 1;
            reward += match self.config.task {
                Task::Pointmass => pointmass_reward(state),
                Task::Arm => arm_reward(state, self.scale),
            };
        }

        self.agent_step += 1;
        note_env_step();
        let frame = render_state(&self.config, state, self.substep);
        self.stack.pop_front();
        self.stack.push_back(frame);
        Ok(Step {
            frames: self.stack.iter().cloned().collect(),
            reward,
            done: self.agent_step >= self.config.episode_len,
            action_clamped: clamped,
        })
    }

    /// Current frame stack without stepping.
    pub fn observation(&self) -> Result<Vec<Frame>, EnvError> {
        if self.state.is_none() {
            return Err(EnvError::NotReset);
        }
        Ok(self.stack.iter().cloned().collect())
    }

    /// Proportional-derivative action toward the current goal (unclamped;
    /// the caller may add exploration noise before stepping). For the arm
    /// the goal is first converted to joint angles with [`arm_ik`].
    pub fn pd_action(&self, kp: f64, kd: f64) -> Result<Vec<f64>, EnvError> {
        let state = self.state.as_ref().ok_or(EnvError::NotReset)?;
        Ok(match self.config.task {
            Task::Pointmass => vec![
                kp * (state.target[0] - state.positions[0]) - kd * state.velocities[0],
                kp * (state.target[1] - state.positions[1]) - kd * state.velocities[1],
            ],
            Task::Arm => {
                let (l1, l2) = (ARM_L1 * self.scale, ARM_L2 * self.scale);
                let (t1, t2) = arm_ik(l1, l2, state.target[0], state.target[1]);
                vec![
                    kp * wrap_angle(t1 - state.positions[0]) - kd * state.velocities[0],
                    kp * (t2 - state.positions[1]) - kd * state.velocities[1],
                ]
            }
        })
    }

    /// Replace the physical state in place (and refill the frame stack as
    /// if the episode had started here). Test and inspection hook; the
    /// step/episode counters are reset.
    #[cfg(test)]
    pub(crate) fn force_state(&mut self, state: ProprioState) {
        self.agent_step = 0;
        self.substep = 0;
        let frame = render_state(&self.config, &state, 0);
        self.stack = std::iter::repeat_n(frame, self.config.frame_stack).collect();
        self.state = Some(state);
    }
}

fn pointmass_substep(state: &mut ProprioState, action: &[f64; 2], scale: f64) {
    let mass = PM_MASS * scale;
    for (&a, (v, p)) in action
        .iter()
        .zip(state.velocities.iter_mut().zip(&mut state.positions))
    {
        let acc = a * PM_FORCE / mass - PM_DRAG * *v;
        *v += DT * acc;
        *p += DT * *v;
        if p.abs() > PM_ARENA {
            *p = p.clamp(-PM_ARENA, PM_ARENA);
            *v = 0.0;
        }
    }
}

fn pointmass_reward(state: &ProprioState) -> f64 {
    let dx = state.positions[0] - state.target[0];
    let dy = state.positions[1] - state.target[1];
    let v2 = state.velocities[0].powi(2) + state.velocities[1].powi(2);
    (-PM_K_POS * (dx * dx + dy * dy)).exp() * (0.5 + 0.5 * (-PM_K_VEL * v2).exp())
}

fn arm_substep(state: &mut ProprioState, action: &[f64; 2], scale: f64) {
    let inertia = ARM_INERTIA * scale * scale;
    for (&a, (w, q)) in action
        .iter()
        .zip(state.velocities.iter_mut().zip(&mut state.positions))
    {
        let acc = (a * ARM_TORQUE - ARM_DAMP * *w) / inertia;
        *w += DT * acc;
        *q += DT * *w;
    }
    state.positions[0] = wrap_angle(state.positions[0]);
    if state.positions[1].abs() > ARM_ELBOW_LIMIT {
        state.positions[1] = state.positions[1].clamp(-ARM_ELBOW_LIMIT, ARM_ELBOW_LIMIT);
        state.velocities[1] = 0.0;
    }
}

fn arm_reward(state: &ProprioState, scale: f64) -> f64 {
    let (l1, l2) = (ARM_L1 * scale, ARM_L2 * scale);
    let (x, y) = arm_fk(l1, l2, state.positions[0], state.positions[1]);
    let reach = l1 + l2;
    let dn2 = ((x - state.target[0]).powi(2) + (y - state.target[1]).powi(2)) / (reach * reach);
    let w2 = state.velocities[0].powi(2) + state.velocities[1].powi(2);
    (-ARM_K_POS * dn2).exp() * (0.5 + 0.5 * (-ARM_K_VEL * w2).exp())
}

/// Wrap an angle to `[-π, π)`.
pub(crate) fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Fingertip position of a two-link arm with the shoulder at the origin.
pub fn arm_fk(l1: f64, l2: f64, theta1: f64, theta2: f64) -> (f64, f64) {
    (
        l1 * theta1.cos() + l2 * (theta1 + theta2).cos(),
        l1 * theta1.sin() + l2 * (theta1 + theta2).sin(),
    )
}

/// Closed-form elbow-up inverse kinematics: joint angles whose fingertip
/// lands on `(tx, ty)`. Targets outside the reachable annulus are projected
/// onto its nearest boundary first.
pub fn arm_ik(l1: f64, l2: f64, tx: f64, ty: f64) -> (f64, f64) {
    let r = (tx * tx + ty * ty)
        .sqrt()
        .clamp((l1 - l2).abs() + 1e-9, l1 + l2 - 1e-9);
    let cos_t2 = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let t2 = cos_t2.acos();
    let t1 = ty.atan2(tx) - (l2 * t2.sin()).atan2(l1 + l2 * cos_t2);
    (wrap_angle(t1), t2)
}
