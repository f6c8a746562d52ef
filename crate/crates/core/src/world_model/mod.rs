//! Latent-dynamics world model for pixel observations.
//!
//! The model filters an observed sequence into a compact latent state — a
//! deterministic recurrent vector `h` plus a grouped categorical code `z` —
//! and learns to reconstruct frames, predict rewards, and predict its own
//! next latent with an *ensemble* of transition heads. Once trained, the
//! model can roll imagined trajectories forward from any latent state
//! without touching the simulator; disagreement between the ensemble heads
//! scores how far imagination has strayed from the data (see [`imagine`]).
//!
//! Layout:
//! - [`observe`](WorldModel::observe) filters sequences and returns the
//!   training loss (reconstruction + reward + balanced KL).
//! - [`imagine`](WorldModel::imagine) rolls the transition model forward
//!   under a policy, on tape, so policy gradients flow through the dynamics.
//! - [`penalty_stats`] summarizes ensemble disagreement over dataset states.

mod imagine;
mod observe;
mod stats;

pub use imagine::{ensemble_penalty, penalized_reward, penalized_reward_on_tape, Imagination};
pub use observe::{Observation, ObserveMetrics};
pub use stats::{penalty_stats, save_reconstruction_strip, PenaltyStats, DEFAULT_PENALTY_STATES};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::nn::{
    read_section, write_section, Activation, Gradients, GruVars, LayerSpec, Network, NetworkSpec,
    NnError, ParamBinding, Tape, Tensor, CHECKPOINT_VERSION,
};

/// Errors from world-model construction, training, and rollouts.
#[derive(Debug, Error)]
pub enum WmError {
    /// The configuration fails validation (sizes, ranges, divisibility).
    #[error("invalid world-model config: {0}")]
    BadConfig(String),
    /// Filtering needs at least two steps so there is one real transition.
    #[error("observe needs sequences of length >= 2, got {0}")]
    SequenceTooShort(usize),
    /// A caller-supplied argument is out of range or inconsistent.
    #[error("bad request: {0}")]
    BadRequest(String),
    /// An underlying network raised a shape or checkpoint error.
    #[error(transparent)]
    Nn(#[from] NnError),
    /// Dataset access failed while gathering states for statistics.
    #[error(transparent)]
    Data(#[from] DataError),
    /// Filesystem failure while saving or loading.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// Checkpoint bytes do not start with the expected magic.
    #[error("not a world-model checkpoint (bad magic)")]
    BadMagic,
    /// Checkpoint format version is newer or older than this build.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

/// Hyperparameters of the world model.
///
/// `render_size` must be divisible by 8: the encoder halves the spatial
/// resolution three times and the decoder mirrors it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    /// Side length of input frames (pixels).
    pub render_size: usize,
    /// Dimension of the action vector.
    pub action_dim: usize,
    /// Width of the deterministic recurrent state `h`.
    pub deter: usize,
    /// Number of categorical groups in the stochastic code `z`.
    pub groups: usize,
    /// Number of classes per categorical group.
    pub classes: usize,
    /// Number of transition heads in the ensemble (at least 2, so
    /// disagreement is defined).
    pub ensemble: usize,
    /// Channel progression of the three encoder conv layers; the decoder
    /// mirrors it.
    pub conv_channels: [usize; 3],
    /// Hidden width of the dense heads (transition, posterior, reward).
    pub hidden: usize,
    /// Width of the encoder's output embedding.
    pub embed: usize,
    /// Per-sample KL floor in nats: KL terms below this value stop
    /// producing gradient, which keeps the code from collapsing early.
    pub free_nats: f64,
    /// Weight on the KL-to-prior direction versus KL-to-posterior
    /// (`balance` on the prior term, `1 - balance` on the posterior term).
    pub kl_balance: f64,
    /// Scale of the KL term in the total loss.
    pub kl_scale: f64,
}

impl WorldModelConfig {
    /// Full-size configuration for a given frame size and action dimension.
    pub fn new(render_size: usize, action_dim: usize) -> Self {
        WorldModelConfig {
            render_size,
            action_dim,
            deter: 128,
            groups: 8,
            classes: 8,
            ensemble: 7,
            conv_channels: [16, 24, 32],
            hidden: 128,
            embed: 128,
            free_nats: 1.0,
            kl_balance: 0.8,
            kl_scale: 1.0,
        }
    }

    /// Reduced widths for quick runs and tests on small frames.
    pub fn compact(render_size: usize, action_dim: usize) -> Self {
        WorldModelConfig {
            render_size,
            action_dim,
            deter: 32,
            groups: 4,
            classes: 4,
            ensemble: 2,
            conv_channels: [4, 8, 8],
            hidden: 32,
            embed: 32,
            free_nats: 1.0,
            kl_balance: 0.8,
            kl_scale: 1.0,
        }
    }

    /// Width of the stochastic code `z` (flattened one-hot groups).
    pub fn z_dim(&self) -> usize {
        self.groups * self.classes
    }

    /// Width of the full latent feature `[h, z]` fed to decoder and heads.
    pub fn feature_dim(&self) -> usize {
        self.deter + self.z_dim()
    }

    /// Validates every structural constraint, returning the first violation.
    pub fn validate(&self) -> Result<(), WmError> {
        if self.render_size == 0 || !self.render_size.is_multiple_of(8) {
            return Err(WmError::BadConfig(format!(
                "render_size must be a positive multiple of 8, got {}",
                self.render_size
            )));
        }
        if self.action_dim == 0 {
            return Err(WmError::BadConfig("action_dim must be positive".into()));
        }
        if self.ensemble < 2 {
            return Err(WmError::BadConfig(format!(
                "ensemble needs at least 2 heads for disagreement, got {}",
                self.ensemble
            )));
        }
        if self.groups == 0 || self.classes < 2 {
            return Err(WmError::BadConfig(format!(
                "latent code needs groups >= 1 and classes >= 2, got {}x{}",
                self.groups, self.classes
            )));
        }
        if self.deter == 0 || self.hidden == 0 || self.embed == 0 {
            return Err(WmError::BadConfig(
                "deter, hidden, and embed widths must be positive".into(),
            ));
        }
        if self.conv_channels.contains(&0) {
            return Err(WmError::BadConfig(
                "conv channel counts must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.kl_balance) {
            return Err(WmError::BadConfig(format!(
                "kl_balance must lie in [0, 1], got {}",
                self.kl_balance
            )));
        }
        if !self.free_nats.is_finite() || self.free_nats < 0.0 {
            return Err(WmError::BadConfig(format!(
                "free_nats must be finite and non-negative, got {}",
                self.free_nats
            )));
        }
        if !self.kl_scale.is_finite() || self.kl_scale < 0.0 {
            return Err(WmError::BadConfig(format!(
                "kl_scale must be finite and non-negative, got {}",
                self.kl_scale
            )));
        }
        Ok(())
    }
}

/// One batch of latent states: rows of `h` (deterministic) and `z`
/// (flattened one-hot groups, or soft probabilities during analysis).
#[derive(Debug, Clone)]
pub struct LatentState {
    /// Recurrent state, shape `[batch, deter]`.
    pub h: Tensor,
    /// Stochastic code, shape `[batch, groups * classes]`.
    pub z: Tensor,
}

impl LatentState {
    /// Number of states in the batch.
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    /// Whether the batch is empty.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks several batches row-wise into one (shapes must agree).
    pub fn concat(states: &[LatentState]) -> Result<LatentState, WmError> {
        let first = states
            .first()
            .ok_or_else(|| WmError::BadRequest("cannot concat zero latent batches".into()))?;
        let (hd, zd) = (first.h.cols(), first.z.cols());
        let mut h = Vec::new();
        let mut z = Vec::new();
        let mut rows = 0;
        for s in states {
            if s.h.cols() != hd || s.z.cols() != zd {
                return Err(WmError::BadRequest(
                    "latent batches have mismatched widths".into(),
                ));
            }
            h.extend_from_slice(s.h.data());
            z.extend_from_slice(s.z.data());
            rows += s.h.rows();
        }
        Ok(LatentState {
            h: Tensor::from_vec(&[rows, hd], h),
            z: Tensor::from_vec(&[rows, zd], z),
        })
    }

    /// Copies a subset of rows into a new batch.
    pub fn select(&self, rows: &[usize]) -> LatentState {
        let (hd, zd) = (self.h.cols(), self.z.cols());
        let mut h = Vec::with_capacity(rows.len() * hd);
        let mut z = Vec::with_capacity(rows.len() * zd);
        for &r in rows {
            h.extend_from_slice(&self.h.data()[r * hd..(r + 1) * hd]);
            z.extend_from_slice(&self.z.data()[r * zd..(r + 1) * zd]);
        }
        LatentState {
            h: Tensor::from_vec(&[rows.len(), hd], h),
            z: Tensor::from_vec(&[rows.len(), zd], z),
        }
    }
}

/// Tape bindings for every network in the model, produced by
/// [`WorldModel::bind`] (trainable) or [`WorldModel::bind_frozen`]
/// (constants, pruned from backward).
pub struct WmVars {
    pub encoder: ParamBinding,
    pub gru_binding: ParamBinding,
    pub gru: GruVars,
    pub priors: Vec<ParamBinding>,
    pub posterior: ParamBinding,
    pub decoder: ParamBinding,
    pub reward: ParamBinding,
}

/// The trained state of the model: configuration plus one [`Network`] per
/// component. All components step together on one tape during training.
pub struct WorldModel {
    cfg: WorldModelConfig,
    pub(crate) encoder: Network,
    pub(crate) gru: Network,
    pub(crate) priors: Vec<Network>,
    pub(crate) posterior: Network,
    pub(crate) decoder: Network,
    pub(crate) reward: Network,
}

const MODEL_MAGIC: &[u8; 8] = b"OFPXWMD1";

/// Mixes an index into a base seed (splitmix64 finalizer) so each component
/// network starts from an independent stream.
fn component_seed(base: u64, index: u64) -> u64 {
    let mut x = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl WorldModel {
    /// Builds all component networks with independent seeds derived from
    /// `seed`. Each transition head gets its own stream, which is what makes
    /// the ensemble disagree away from the data.
    pub fn init(cfg: WorldModelConfig, seed: u64) -> Result<WorldModel, WmError> {
        cfg.validate()?;
        let s = cfg.render_size;
        let [c0, c1, c2] = cfg.conv_channels;
        let base = s / 8;

        let encoder_spec = NetworkSpec {
            input: vec![s, s, 3],
            layers: vec![
                conv(3, c0),
                conv(c0, c1),
                conv(c1, c2),
                LayerSpec::Flatten,
                // Three stride-2 convs take s -> s/2 -> s/4 -> s/8.
                dense(base * base * c2, cfg.embed, Activation::Elu),
            ],
        };

        let gru_spec = NetworkSpec {
            input: vec![cfg.z_dim() + cfg.action_dim],
            layers: vec![LayerSpec::Gru {
                inputs: cfg.z_dim() + cfg.action_dim,
                state: cfg.deter,
            }],
        };

        let head_spec = |inputs: usize, outputs: usize| NetworkSpec {
            input: vec![inputs],
            layers: vec![
                dense(inputs, cfg.hidden, Activation::Elu),
                dense(cfg.hidden, outputs, Activation::Linear),
            ],
        };

        let decoder_spec = NetworkSpec {
            input: vec![cfg.feature_dim()],
            layers: vec![
                dense(cfg.feature_dim(), base * base * c2, Activation::Elu),
                LayerSpec::Unflatten {
                    height: base,
                    width: base,
                    channels: c2,
                },
                convt(c2, c1),
                convt(c1, c0),
                LayerSpec::ConvTranspose {
                    in_channels: c0,
                    out_channels: 3,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    activation: Activation::Linear,
                },
            ],
        };

        let priors = (0..cfg.ensemble)
            .map(|k| {
                Network::init(
                    head_spec(cfg.deter, cfg.z_dim()),
                    component_seed(seed, 2 + k as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;

        Ok(WorldModel {
            encoder: Network::init(encoder_spec, component_seed(seed, 0))?,
            gru: Network::init(gru_spec, component_seed(seed, 1))?,
            priors,
            posterior: Network::init(
                head_spec(cfg.deter + cfg.embed, cfg.z_dim()),
                component_seed(seed, 100),
            )?,
            decoder: Network::init(decoder_spec, component_seed(seed, 101))?,
            reward: Network::init(head_spec(cfg.feature_dim(), 1), component_seed(seed, 102))?,
            cfg,
        })
    }

    /// The configuration this model was built with.
    pub fn config(&self) -> &WorldModelConfig {
        &self.cfg
    }

    /// Total scalar parameter count across all components.
    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|(_, n)| n.param_count()).sum()
    }

    /// All component networks with stable labels, in checkpoint order.
    pub fn networks(&self) -> Vec<(String, &Network)> {
        let mut out = vec![
            ("encoder".to_string(), &self.encoder),
            ("transition".to_string(), &self.gru),
        ];
        for (k, p) in self.priors.iter().enumerate() {
            out.push((format!("prior{k}"), p));
        }
        out.push(("posterior".to_string(), &self.posterior));
        out.push(("decoder".to_string(), &self.decoder));
        out.push(("reward".to_string(), &self.reward));
        out
    }

    /// Mutable access to every component network, in checkpoint order.
    /// Order is stable, so per-network optimizers can be zipped against it.
    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        let mut out = vec![&mut self.encoder, &mut self.gru];
        out.extend(self.priors.iter_mut().map(|p| p as &mut Network));
        out.push(&mut self.posterior);
        out.push(&mut self.decoder);
        out.push(&mut self.reward);
        out
    }

    /// Plants every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> WmVars {
        self.bind_with(tape, false)
    }

    /// Plants every parameter as a constant, so backward passes treat the
    /// whole model as frozen. Used during policy optimization.
    pub fn bind_frozen(&self, tape: &mut Tape) -> WmVars {
        self.bind_with(tape, true)
    }

    fn bind_with(&self, tape: &mut Tape, frozen: bool) -> WmVars {
        let bind = |net: &Network, tape: &mut Tape| {
            if frozen {
                net.bind_frozen(tape)
            } else {
                net.bind(tape)
            }
        };
        let gru_binding = bind(&self.gru, tape);
        let gru = GruVars::from_binding(&gru_binding, 0);
        WmVars {
            encoder: bind(&self.encoder, tape),
            gru_binding,
            gru,
            priors: self.priors.iter().map(|p| bind(p, tape)).collect(),
            posterior: bind(&self.posterior, tape),
            decoder: bind(&self.decoder, tape),
            reward: bind(&self.reward, tape),
        }
    }

    /// Pulls this model's gradients out of `grads` (as produced by
    /// `Tape::backward`) into each component's parameter slots, adding to
    /// anything already accumulated there.
    pub fn accumulate_grads(&mut self, vars: &WmVars, grads: &mut Gradients) {
        self.encoder.accumulate_grads(&vars.encoder, grads);
        self.gru.accumulate_grads(&vars.gru_binding, grads);
        for (net, binding) in self.priors.iter_mut().zip(&vars.priors) {
            net.accumulate_grads(binding, grads);
        }
        self.posterior.accumulate_grads(&vars.posterior, grads);
        self.decoder.accumulate_grads(&vars.decoder, grads);
        self.reward.accumulate_grads(&vars.reward, grads);
    }

    /// Saves configuration and all parameters to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<(), WmError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.cfg)
            .map_err(|e| WmError::BadConfig(format!("config serialization failed: {e}")))?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        for (_, net) in self.networks() {
            write_section(&mut w, &net.spec().hash(), &net.params)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint saved by [`WorldModel::save`], rebuilding the
    /// architecture from the stored config and validating every section.
    pub fn load(path: &Path) -> Result<WorldModel, WmError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(WmError::BadMagic);
        }
        let mut vbytes = [0u8; 4];
        r.read_exact(&mut vbytes)?;
        let version = u32::from_le_bytes(vbytes);
        if version != CHECKPOINT_VERSION {
            return Err(WmError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut lbytes = [0u8; 8];
        r.read_exact(&mut lbytes)?;
        let mut cfg_bytes = vec![0u8; u64::from_le_bytes(lbytes) as usize];
        r.read_exact(&mut cfg_bytes)?;
        let cfg: WorldModelConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| WmError::BadConfig(format!("config in checkpoint is invalid: {e}")))?;
        let mut model = WorldModel::init(cfg, 0)?;
        for net in model.networks_mut() {
            let hash = net.spec().hash();
            read_section(&mut r, &hash, &mut net.params)?;
        }
        Ok(model)
    }
}

fn dense(inputs: usize, outputs: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense {
        inputs,
        outputs,
        activation,
    }
}

fn conv(in_channels: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels,
        out_channels,
        kernel: 4,
        stride: 2,
        pad: 1,
        activation: Activation::Elu,
    }
}

fn convt(in_channels: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::ConvTranspose {
        in_channels,
        out_channels,
        kernel: 4,
        stride: 2,
        pad: 1,
        activation: Activation::Elu,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let ok = WorldModelConfig::compact(16, 2);
        assert!(ok.validate().is_ok());

        let mut c = ok.clone();
        c.render_size = 20;
        assert!(matches!(c.validate(), Err(WmError::BadConfig(_))));

        let mut c = ok.clone();
        c.ensemble = 1;
        assert!(matches!(c.validate(), Err(WmError::BadConfig(_))));

        let mut c = ok.clone();
        c.kl_balance = 1.5;
        assert!(matches!(c.validate(), Err(WmError::BadConfig(_))));

        let mut c = ok.clone();
        c.classes = 1;
        assert!(matches!(c.validate(), Err(WmError::BadConfig(_))));

        let mut c = ok;
        c.free_nats = -0.5;
        assert!(matches!(c.validate(), Err(WmError::BadConfig(_))));
    }

    #[test]
    fn init_builds_consistent_components() {
        let cfg = WorldModelConfig::compact(16, 2);
        let model = WorldModel::init(cfg.clone(), 7).unwrap();
        assert_eq!(model.priors.len(), cfg.ensemble);
        assert!(model.param_count() > 0);
        // Component labels are unique and in a stable order.
        let labels: Vec<String> = model.networks().iter().map(|(l, _)| l.clone()).collect();
        assert_eq!(labels[0], "encoder");
        assert_eq!(labels[1], "transition");
        assert!(labels.contains(&"prior0".to_string()));
        assert!(labels.contains(&"reward".to_string()));
        let mut dedup = labels.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), labels.len());
    }

    #[test]
    fn ensemble_heads_start_different() {
        let model = WorldModel::init(WorldModelConfig::compact(16, 2), 7).unwrap();
        let a = &model.priors[0].params[0];
        let b = &model.priors[1].params[0];
        assert_eq!(a.values.shape(), b.values.shape());
        assert_ne!(a.values.data(), b.values.data());
    }

    #[test]
    fn same_seed_same_model_different_seed_different_model() {
        let cfg = WorldModelConfig::compact(16, 2);
        let m1 = WorldModel::init(cfg.clone(), 3).unwrap();
        let m2 = WorldModel::init(cfg.clone(), 3).unwrap();
        let m3 = WorldModel::init(cfg, 4).unwrap();
        assert_eq!(
            m1.encoder.params[0].values.data(),
            m2.encoder.params[0].values.data()
        );
        assert_ne!(
            m1.encoder.params[0].values.data(),
            m3.encoder.params[0].values.data()
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ofpx");
        let model = WorldModel::init(WorldModelConfig::compact(16, 2), 11).unwrap();
        model.save(&path).unwrap();
        let loaded = WorldModel::load(&path).unwrap();
        assert_eq!(model.config(), loaded.config());
        for ((la, a), (lb, b)) in model.networks().iter().zip(loaded.networks().iter()) {
            assert_eq!(la, lb);
            for (pa, pb) in a.params.iter().zip(b.params.iter()) {
                assert_eq!(pa.name, pb.name);
                assert_eq!(pa.values.data(), pb.values.data());
            }
        }
    }

    #[test]
    fn load_rejects_architecture_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ofpx");
        let model = WorldModel::init(WorldModelConfig::compact(16, 2), 11).unwrap();
        model.save(&path).unwrap();

        // Rewrite the stored config to a different architecture: the section
        // hashes no longer match and loading must fail loudly.
        let bytes = std::fs::read(&path).unwrap();
        let cfg_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut cfg: WorldModelConfig = serde_json::from_slice(&bytes[20..20 + cfg_len]).unwrap();
        cfg.hidden *= 2;
        let new_cfg = serde_json::to_vec(&cfg).unwrap();
        let mut patched = bytes[..12].to_vec();
        patched.extend_from_slice(&(new_cfg.len() as u64).to_le_bytes());
        patched.extend_from_slice(&new_cfg);
        patched.extend_from_slice(&bytes[20 + cfg_len..]);
        std::fs::write(&path, patched).unwrap();

        match WorldModel::load(&path) {
            Err(WmError::Nn(NnError::SpecHashMismatch)) => {}
            Err(other) => panic!("expected spec hash mismatch, got {other}"),
            Ok(_) => panic!("expected spec hash mismatch, load succeeded"),
        }
    }

    #[test]
    fn latent_concat_and_select_round_trip() {
        let a = LatentState {
            h: Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            z: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        };
        let b = LatentState {
            h: Tensor::from_vec(&[1, 3], vec![7.0, 8.0, 9.0]),
            z: Tensor::from_vec(&[1, 2], vec![0.5, 0.5]),
        };
        let all = LatentState::concat(&[a.clone(), b]).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all.h.data()[6..9], [7.0, 8.0, 9.0]);
        let back = all.select(&[0, 1]);
        assert_eq!(back.h.data(), a.h.data());
        assert_eq!(back.z.data(), a.z.data());
        assert!(LatentState::concat(&[]).is_err());
    }
}
