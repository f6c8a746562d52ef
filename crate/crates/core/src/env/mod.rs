//! Synthetic visual control environments.
//!
//! Two planar tasks rendered to small RGB frames: a point mass pushed
//! toward a fixed goal (easy) and a torque-controlled two-link arm reaching
//! for a random goal (harder). Both support:
//!
//! - a dynamics ladder `A..H` scaling mass / link length, drawn so the
//!   change is visible in pixels;
//! - procedural visual distractions (moving color tiles + scrolling value
//!   noise) that perturb only the rendered background, never the dynamics;
//! - action repeat with per-substep rewards in `[0, 1]`, so a full episode
//!   (500 agent steps × repeat 2) has return in `[0, 1000]`.
//!
//! Everything is deterministic: `(config, seed, action sequence)` fixes
//! every state and every pixel.

mod render;
mod sim;

pub use render::{distraction_background, render_state, Frame};
pub use sim::{arm_fk, arm_ik, Env, Step};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cell::Cell;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("unknown dynamics variant `{0}` (expected A..H)")]
    UnknownVariant(String),
    #[error("unknown task `{0}` (expected pointmass | arm)")]
    UnknownTask(String),
    #[error("unknown severity `{0}` (expected low | moderate | high)")]
    UnknownSeverity(String),
    #[error("distractor id {0} out of range (0..=9 train, 10..=19 test)")]
    BadDistractorId(u8),
    #[error("step called before reset")]
    NotReset,
    #[error("episode already finished ({0} agent steps); reset required")]
    EpisodeOver(usize),
    #[error("action has {got} dims, task expects {expected}")]
    ActionDim { expected: usize, got: usize },
}

/// The two control tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pointmass,
    Arm,
}

impl Task {
    pub fn action_dim(self) -> usize {
        2
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pointmass => "pointmass",
            Task::Arm => "arm",
        })
    }
}

impl FromStr for Task {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "pointmass" => Ok(Task::Pointmass),
            "arm" => Ok(Task::Arm),
            other => Err(EnvError::UnknownTask(other.to_string())),
        }
    }
}

/// One rung of the dynamics ladder. The scale factor multiplies the point
/// mass's mass or the arm's link lengths; `A` is lightest/shortest, `H`
/// heaviest/longest, and the ladder is symmetric around 1.0 (between `D`
/// and `E`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DynamicsVariant {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
}

impl DynamicsVariant {
    pub const ALL: [DynamicsVariant; 8] = [
        DynamicsVariant::A,
        DynamicsVariant::B,
        DynamicsVariant::C,
        DynamicsVariant::D,
        DynamicsVariant::E,
        DynamicsVariant::F,
        DynamicsVariant::G,
        DynamicsVariant::H,
    ];

    fn index(self) -> usize {
        Self::ALL.iter().position(|v| *v == self).unwrap()
    }

    /// Mass / link-length multiplier: `A` → 0.5 rising linearly to `H` → 1.5.
    pub fn scale(self) -> f64 {
        0.5 + self.index() as f64 / 7.0
    }

    pub fn label(self) -> char {
        (b'A' + self.index() as u8) as char
    }

    pub fn from_label(c: char) -> Result<Self, EnvError> {
        let c = c.to_ascii_uppercase();
        if c.is_ascii_uppercase() && c <= 'H' {
            Ok(Self::ALL[(c as u8 - b'A') as usize])
        } else {
            Err(EnvError::UnknownVariant(c.to_string()))
        }
    }
}

impl fmt::Display for DynamicsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl FromStr for DynamicsVariant {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Self::from_label(c),
            _ => Err(EnvError::UnknownVariant(s.to_string())),
        }
    }
}

/// Visual distraction strength. Severity sets the contrast at which the
/// procedural pattern is blended over the plain background, and how fast
/// the pattern scrolls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Low,
    Moderate,
    High,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Low, Severity::Moderate, Severity::High];

    /// Blend weight of the distractor pattern over the base background.
    pub fn contrast(self) -> f64 {
        match self {
            Severity::Low => 0.2,
            Severity::Moderate => 0.5,
            Severity::High => 0.9,
        }
    }

    /// Pattern scroll speed in pixels per simulator substep.
    pub(crate) fn scroll_speed(self) -> f64 {
        match self {
            Severity::Low => 0.15,
            Severity::Moderate => 0.4,
            Severity::High => 1.0,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Low => "low",
            Severity::Moderate => "moderate",
            Severity::High => "high",
        })
    }
}

impl FromStr for Severity {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "low" => Ok(Severity::Low),
            "moderate" => Ok(Severity::Moderate),
            "high" => Ok(Severity::High),
            other => Err(EnvError::UnknownSeverity(other.to_string())),
        }
    }
}

/// Identity of one procedural distractor pattern. Ids 0..=9 are reserved
/// for training data, 10..=19 for held-out evaluation; the disjoint ranges
/// make "never trained on a test distractor" checkable from headers alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistractorId(u8);

impl DistractorId {
    pub const TRAIN_COUNT: u8 = 10;
    pub const TEST_COUNT: u8 = 10;

    pub fn new(raw: u8) -> Result<Self, EnvError> {
        if raw < Self::TRAIN_COUNT + Self::TEST_COUNT {
            Ok(DistractorId(raw))
        } else {
            Err(EnvError::BadDistractorId(raw))
        }
    }

    /// The k-th training pattern (k < 10).
    pub fn train(k: u8) -> Self {
        assert!(
            k < Self::TRAIN_COUNT,
            "train distractor index {k} out of range"
        );
        DistractorId(k)
    }

    /// The k-th held-out pattern (k < 10).
    pub fn test(k: u8) -> Self {
        assert!(
            k < Self::TEST_COUNT,
            "test distractor index {k} out of range"
        );
        DistractorId(Self::TRAIN_COUNT + k)
    }

    pub fn raw(self) -> u8 {
        self.0
    }

    pub fn is_train(self) -> bool {
        self.0 < Self::TRAIN_COUNT
    }

    pub fn is_test(self) -> bool {
        !self.is_train()
    }
}

/// Which distractor to composite into the background, and how strongly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistractionConfig {
    pub severity: Severity,
    pub id: DistractorId,
}

/// Full environment description. This is what dataset headers store, so it
/// must say everything needed to re-create the exact pixel stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: Task,
    /// `None` means the canonical dynamics (scale 1.0, the ladder midpoint).
    pub variant: Option<DynamicsVariant>,
    pub distraction: Option<DistractionConfig>,
    /// Square frame edge in pixels.
    pub render_size: usize,
    /// Simulator substeps per agent action.
    pub action_repeat: usize,
    /// Frames per observation, oldest first.
    pub frame_stack: usize,
    /// Episode length in agent steps.
    pub episode_len: usize,
}

impl EnvConfig {
    pub const MIN_RENDER: usize = 16;
    pub const MAX_RENDER: usize = 84;

    pub fn new(task: Task) -> Self {
        EnvConfig {
            task,
            variant: None,
            distraction: None,
            render_size: 32,
            action_repeat: 2,
            frame_stack: 3,
            episode_len: 500,
        }
    }

    pub fn with_variant(mut self, v: DynamicsVariant) -> Self {
        self.variant = Some(v);
        self
    }

    pub fn with_distraction(mut self, severity: Severity, id: DistractorId) -> Self {
        self.distraction = Some(DistractionConfig { severity, id });
        self
    }

    /// Dynamics multiplier implied by the variant (1.0 when unset).
    pub fn scale(&self) -> f64 {
        self.variant.map(DynamicsVariant::scale).unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.render_size < Self::MIN_RENDER || self.render_size > Self::MAX_RENDER {
            return Err(EnvError::InvalidConfig(format!(
                "render_size {} outside {}..={}",
                self.render_size,
                Self::MIN_RENDER,
                Self::MAX_RENDER
            )));
        }
        if self.action_repeat == 0 {
            return Err(EnvError::InvalidConfig("action_repeat must be >= 1".into()));
        }
        if self.frame_stack == 0 {
            return Err(EnvError::InvalidConfig("frame_stack must be >= 1".into()));
        }
        if self.episode_len == 0 {
            return Err(EnvError::InvalidConfig("episode_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable content hash of the config (hex SHA-256 of its canonical JSON
    /// form). Datasets collected under different hashes must not be mixed.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("EnvConfig is always serializable");
        let digest = Sha256::digest(&json);
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// Maximum possible episode return: one reward unit per substep.
    pub fn max_return(&self) -> f64 {
        (self.episode_len * self.action_repeat) as f64
    }
}

/// Physical state of either task, plus the current goal.
///
/// Point mass: `positions`/`velocities` are planar coordinates. Arm:
/// `positions` are the two joint angles (radians, shoulder then elbow) and
/// `velocities` the angular rates. `target` is always a point in the arena.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProprioState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub target: Vec<f64>,
}

impl ProprioState {
    pub fn all_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(&self.velocities)
            .chain(&self.target)
            .all(|x| x.is_finite())
    }
}

thread_local! {
    static ENV_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of environment agent-steps taken on this thread since the last
/// [`reset_env_step_counter`]. Offline training loops bracket their gradient
/// phases with this to prove they never touched an environment.
pub fn env_steps_on_thread() -> u64 {
    ENV_STEPS.with(|c| c.get())
}

pub fn reset_env_step_counter() {
    ENV_STEPS.with(|c| c.set(0));
}

pub(crate) fn note_env_step() {
    ENV_STEPS.with(|c| c.set(c.get() + 1));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_ladder_endpoints_and_midpoint() {
        assert_eq!(DynamicsVariant::A.scale(), 0.5);
        assert_eq!(DynamicsVariant::H.scale(), 1.5);
        let mid = (DynamicsVariant::D.scale() + DynamicsVariant::E.scale()) / 2.0;
        assert!((mid - 1.0).abs() < 1e-12, "ladder midpoint {mid}");
    }

    #[test]
    fn variant_ladder_is_strictly_monotone() {
        for pair in DynamicsVariant::ALL.windows(2) {
            assert!(
                pair[0].scale() < pair[1].scale(),
                "{} !< {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in DynamicsVariant::ALL {
            assert_eq!(DynamicsVariant::from_label(v.label()).unwrap(), v);
            assert_eq!(v.label().to_string().parse::<DynamicsVariant>().unwrap(), v);
        }
        assert!(DynamicsVariant::from_label('Z').is_err());
        assert!("AB".parse::<DynamicsVariant>().is_err());
    }

    #[test]
    fn distractor_id_ranges_are_disjoint() {
        for k in 0..DistractorId::TRAIN_COUNT {
            assert!(DistractorId::train(k).is_train());
            assert!(!DistractorId::train(k).is_test());
        }
        for k in 0..DistractorId::TEST_COUNT {
            assert!(DistractorId::test(k).is_test());
        }
        assert!(DistractorId::new(20).is_err());
        assert!(DistractorId::new(19).unwrap().is_test());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = EnvConfig::new(Task::Pointmass);
        cfg.render_size = 8;
        assert!(matches!(cfg.validate(), Err(EnvError::InvalidConfig(_))));
        cfg.render_size = 200;
        assert!(cfg.validate().is_err());
        cfg.render_size = 32;
        cfg.action_repeat = 0;
        assert!(cfg.validate().is_err());
        cfg.action_repeat = 2;
        cfg.episode_len = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_is_stable_and_distinguishes_configs() {
        let a = EnvConfig::new(Task::Pointmass);
        let b = EnvConfig::new(Task::Pointmass);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = EnvConfig::new(Task::Pointmass).with_variant(DynamicsVariant::B);
        assert_ne!(a.hash(), c.hash());
        let d = EnvConfig::new(Task::Arm);
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = EnvConfig::new(Task::Arm)
            .with_variant(DynamicsVariant::F)
            .with_distraction(Severity::High, DistractorId::test(3));
        let json = serde_json::to_string(&cfg).unwrap();
        let back: EnvConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn step_counter_is_thread_local_and_resettable() {
        reset_env_step_counter();
        assert_eq!(env_steps_on_thread(), 0);
        note_env_step();
        note_env_step();
        assert_eq!(env_steps_on_thread(), 2);
        let other = std::thread::spawn(env_steps_on_thread).join().unwrap();
        assert_eq!(other, 0, "fresh thread starts at zero");
        reset_env_step_counter();
        assert_eq!(env_steps_on_thread(), 0);
    }
}
