//! Machinery shared by the pixel agents: the convolutional encoder and MLP
//! head shapes, frame-stack packing, random shift augmentation, target
//! smoothing noise, the adaptive cloning weight, EMA target updates, and
//! the common agent checkpoint framing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write as _};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::env::Frame;
use crate::nn::{
    write_section, Activation, LayerSpec, Network, NetworkSpec, Tensor, CHECKPOINT_VERSION,
};

use super::{AgentError, AgentKind};

/// Shapes of the visual policy/value networks shared by the model-free
/// agents: a three-stage strided conv encoder into a bounded feature vector,
/// plus the MLP width for actor and critic heads.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VisualConfig {
    /// Square frame edge; must be a positive multiple of 8 (three stride-2
    /// convolutions each halve it).
    pub render_size: usize,
    /// Frames per observation; the encoder sees `3 * frame_stack` channels.
    pub frame_stack: usize,
    /// Action vector width.
    pub action_dim: usize,
    /// Channels of the three conv stages.
    pub conv_channels: [usize; 3],
    /// Width of the encoded feature vector (tanh-bounded).
    pub repr: usize,
    /// Hidden width of the actor and critic MLPs.
    pub hidden: usize,
}

impl VisualConfig {
    /// Full-size preset.
    pub fn new(render_size: usize, frame_stack: usize, action_dim: usize) -> VisualConfig {
        VisualConfig {
            render_size,
            frame_stack,
            action_dim,
            conv_channels: [32, 32, 32],
            repr: 50,
            hidden: 256,
        }
    }

    /// Small preset sized for single-core CPU training.
    pub fn compact(render_size: usize, frame_stack: usize, action_dim: usize) -> VisualConfig {
        VisualConfig {
            render_size,
            frame_stack,
            action_dim,
            conv_channels: [8, 12, 16],
            repr: 50,
            hidden: 128,
        }
    }

    /// Full-size preset with geometry (frame size, stack, action width)
    /// read off `dataset`.
    pub fn for_dataset(dataset: &Dataset) -> Result<VisualConfig, AgentError> {
        let (s, stack, d) = dataset_geometry(dataset)?;
        Ok(VisualConfig::new(s, stack, d))
    }

    /// Small preset with geometry read off `dataset`.
    pub fn compact_for_dataset(dataset: &Dataset) -> Result<VisualConfig, AgentError> {
        let (s, stack, d) = dataset_geometry(dataset)?;
        Ok(VisualConfig::compact(s, stack, d))
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.render_size == 0 || !self.render_size.is_multiple_of(8) {
            return Err(AgentError::BadConfig(format!(
                "render size {} must be a positive multiple of 8",
                self.render_size
            )));
        }
        if self.frame_stack == 0 || self.action_dim == 0 {
            return Err(AgentError::BadConfig(
                "frame stack and action width must be positive".into(),
            ));
        }
        if self.conv_channels.contains(&0) || self.repr == 0 || self.hidden == 0 {
            return Err(AgentError::BadConfig(
                "network widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Errors unless this config matches the dataset's frame geometry.
    pub fn matches_dataset(&self, dataset: &Dataset) -> Result<(), AgentError> {
        let (s, stack, d) = dataset_geometry(dataset)?;
        if (self.render_size, self.frame_stack, self.action_dim) != (s, stack, d) {
            return Err(AgentError::BadRequest(format!(
                "network expects {}px x{} stack with {}-dim actions, dataset provides {s}px x{stack} with {d}-dim",
                self.render_size, self.frame_stack, self.action_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn in_channels(&self) -> usize {
        3 * self.frame_stack
    }

    pub(crate) fn encoder_spec(&self) -> NetworkSpec {
        let s = self.render_size;
        let [c0, c1, c2] = self.conv_channels;
        let base = s / 8;
        NetworkSpec {
            input: vec![s, s, self.in_channels()],
            layers: vec![
                conv(self.in_channels(), c0),
                conv(c0, c1),
                conv(c1, c2),
                LayerSpec::Flatten,
                dense(base * base * c2, self.repr, Activation::Tanh),
            ],
        }
    }

    pub(crate) fn actor_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input: vec![self.repr],
            layers: vec![
                dense(self.repr, self.hidden, Activation::Elu),
                dense(self.hidden, self.hidden, Activation::Elu),
                dense(self.hidden, self.action_dim, Activation::Tanh),
            ],
        }
    }

    pub(crate) fn critic_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input: vec![self.repr + self.action_dim],
            layers: vec![
                dense(self.repr + self.action_dim, self.hidden, Activation::Elu),
                dense(self.hidden, self.hidden, Activation::Elu),
                dense(self.hidden, 1, Activation::Linear),
            ],
        }
    }
}

/// Reads `(render_size, frame_stack, action_dim)` off a dataset, requiring
/// every declared environment to agree (pooled datasets share geometry).
pub(crate) fn dataset_geometry(dataset: &Dataset) -> Result<(usize, usize, usize), AgentError> {
    let envs = &dataset.header.envs;
    let first = envs
        .first()
        .ok_or_else(|| AgentError::BadRequest("dataset declares no environments".into()))?;
    let geom = (
        first.render_size,
        first.frame_stack,
        first.task.action_dim(),
    );
    for env in &envs[1..] {
        if (env.render_size, env.frame_stack, env.task.action_dim()) != geom {
            return Err(AgentError::BadRequest(
                "dataset environments disagree on frame geometry".into(),
            ));
        }
    }
    Ok(geom)
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

/// Mixes an index into a base seed (splitmix64 finalizer) so sibling
/// networks and per-step batch draws get independent streams.
pub(crate) fn mix_seed(base: u64, index: u64) -> u64 {
    let mut x = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Packs an environment frame stack (oldest first) into a `[1, size, size,
/// 3 * stack]` observation tensor, matching the dataset sampling layout
/// (channel = frame_index * 3 + rgb).
pub fn frames_to_obs(
    frames: &[Frame],
    render_size: usize,
    frame_stack: usize,
) -> Result<Tensor, AgentError> {
    if frames.len() != frame_stack {
        return Err(AgentError::BadRequest(format!(
            "expected a stack of {frame_stack} frames, got {}",
            frames.len()
        )));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.size() != render_size {
            return Err(AgentError::BadRequest(format!(
                "frame {i} is {}px, agent expects {render_size}px",
                f.size()
            )));
        }
    }
    let s = render_size;
    let channels = 3 * frame_stack;
    let mut data = vec![0.0; s * s * channels];
    for (f, frame) in frames.iter().enumerate() {
        let src = frame.data();
        for p in 0..s * s {
            for c in 0..3 {
                data[p * channels + f * 3 + c] = src[p * 3 + c];
            }
        }
    }
    Ok(Tensor::from_vec(&[1, s, s, channels], data))
}

/// Translates one `[size, size, channels]` image by `(dx, dy)` pixels,
/// replicating border pixels into the uncovered band. At integer shifts the
/// interpolation that a pad-and-crop produces degenerates to exact copies,
/// so this is a pure gather.
pub(crate) fn shift_one(
    src: &[f64],
    size: usize,
    channels: usize,
    dx: i64,
    dy: i64,
    dst: &mut [f64],
) {
    let clamp = |v: i64| v.clamp(0, size as i64 - 1) as usize;
    for y in 0..size {
        let sy = clamp(y as i64 + dy);
        for x in 0..size {
            let sx = clamp(x as i64 + dx);
            let s_off = (sy * size + sx) * channels;
            let d_off = (y * size + x) * channels;
            dst[d_off..d_off + channels].copy_from_slice(&src[s_off..s_off + channels]);
        }
    }
}

/// Random shift augmentation: every sample of `obs` (`[batch, size, size,
/// channels]`) is translated by an independent uniform integer shift in
/// `[-pad, pad]^2` with replicated borders. Actions and rewards are never
/// touched — only the caller's observation tensor is re-rendered.
pub fn random_shift(obs: &Tensor, pad: usize, rng: &mut impl Rng) -> Tensor {
    let shape = obs.shape();
    assert_eq!(shape.len(), 4, "expected [batch, size, size, channels]");
    let (b, s, channels) = (shape[0], shape[1], shape[3]);
    assert_eq!(shape[2], s, "frames must be square");
    let mut out = vec![0.0; obs.data().len()];
    let stride = s * s * channels;
    let p = pad as i64;
    for i in 0..b {
        let dx = rng.random_range(-p..=p);
        let dy = rng.random_range(-p..=p);
        shift_one(
            &obs.data()[i * stride..(i + 1) * stride],
            s,
            channels,
            dx,
            dy,
            &mut out[i * stride..(i + 1) * stride],
        );
    }
    Tensor::from_vec(shape, out)
}

/// Linearly annealed stddev for target-policy smoothing noise.
///
/// Offline training has no exploration leg, so the schedule only shapes the
/// noise injected into bootstrap targets; it is kept for parity with the
/// online recipe it descends from.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub start: f64,
    pub end: f64,
    /// Steps over which the stddev moves from `start` to `end`.
    pub horizon: u64,
}

impl Default for NoiseSchedule {
    fn default() -> NoiseSchedule {
        NoiseSchedule {
            start: 1.0,
            end: 0.1,
            horizon: 500_000,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.start >= 0.0 && self.end >= 0.0 && self.start.is_finite() && self.end.is_finite())
        {
            return Err(AgentError::BadConfig(
                "noise stddevs must be finite and non-negative".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(AgentError::BadConfig(
                "noise schedule horizon must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stddev at `step`: linear from `start` to `end`, then flat.
    pub fn stddev(&self, step: u64) -> f64 {
        if step >= self.horizon {
            return self.end;
        }
        let frac = step as f64 / self.horizon as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// The adaptive weight on the value term of a cloning-regularized actor
/// loss: `alpha / mean|Q|`, so that `weight * mean|Q| = alpha` holds on
/// every minibatch. Degenerate batches (`mean|Q|` at or near zero) cap the
/// weight at `max_weight` instead of dividing toward infinity.
///
/// Scaling every critic output by `c > 0` scales the weight by `1/c`, so
/// the weighted value term — and with it the actor's argmax — is invariant
/// to the critic's scale.
pub fn adaptive_bc_weight(alpha: f64, mean_abs_q: f64, max_weight: f64) -> f64 {
    assert!(alpha > 0.0 && alpha.is_finite(), "alpha must be positive");
    assert!(
        max_weight > 0.0 && max_weight.is_finite(),
        "max weight must be positive"
    );
    assert!(mean_abs_q >= 0.0, "mean |Q| cannot be negative");
    if mean_abs_q * max_weight <= alpha {
        max_weight
    } else {
        alpha / mean_abs_q
    }
}

/// Exponential moving average update: `target = (1 - tau) * target + tau *
/// online`. `tau = 1` is a hard copy.
pub(crate) fn ema_update(target: &mut Network, online: &Network, tau: f64) {
    debug_assert!((0.0..=1.0).contains(&tau));
    for (t, o) in target.params.iter_mut().zip(online.params.iter()) {
        debug_assert_eq!(t.values.shape(), o.values.shape());
        for (tv, ov) in t.values.data_mut().iter_mut().zip(o.values.data()) {
            *tv = (1.0 - tau) * *tv + tau * *ov;
        }
    }
}

/// Overwrites `target`'s parameters with `online`'s.
pub(crate) fn hard_copy(target: &mut Network, online: &Network) {
    ema_update(target, online, 1.0);
}

/// Columns-wise concatenation of two value tensors with equal row counts.
pub(crate) fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "hcat row mismatch");
    let (ra, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for r in 0..ra {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    Tensor::from_vec(&[ra, ca + cb], data)
}

/// Mean absolute value over all entries.
pub(crate) fn mean_abs(t: &Tensor) -> f64 {
    let n = t.data().len().max(1);
    t.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64
}

/// Encoder, actor, twin critics, and EMA target critics — the network set
/// shared by the two TD-based model-free agents.
pub(crate) struct TwinCriticCore {
    pub encoder: Network,
    pub actor: Network,
    pub q1: Network,
    pub q2: Network,
    pub target_q1: Network,
    pub target_q2: Network,
}

/// Per-sample bootstrap targets from the twin target critics. The
/// single-critic variants exist so the pessimism construction can be
/// checked against them.
pub(crate) struct TargetParts {
    /// Pessimistic targets `r + discount * min(q1', q2')`, shape `[b, 1]`.
    pub y: Tensor,
    /// The target built from target critic 1 alone.
    #[cfg_attr(not(test), allow(dead_code))]
    pub alt1: Tensor,
    /// The target built from target critic 2 alone.
    #[cfg_attr(not(test), allow(dead_code))]
    pub alt2: Tensor,
}

impl TwinCriticCore {
    /// Builds the networks from independent streams of `seed`; target
    /// critics start as exact copies of the online critics.
    pub fn init(net: &VisualConfig, seed: u64) -> Result<TwinCriticCore, AgentError> {
        net.validate()?;
        let encoder = Network::init(net.encoder_spec(), mix_seed(seed, 0))?;
        let actor = Network::init(net.actor_spec(), mix_seed(seed, 1))?;
        let q1 = Network::init(net.critic_spec(), mix_seed(seed, 2))?;
        let q2 = Network::init(net.critic_spec(), mix_seed(seed, 3))?;
        let mut target_q1 = Network::init(net.critic_spec(), mix_seed(seed, 2))?;
        let mut target_q2 = Network::init(net.critic_spec(), mix_seed(seed, 3))?;
        hard_copy(&mut target_q1, &q1);
        hard_copy(&mut target_q2, &q2);
        Ok(TwinCriticCore {
            encoder,
            actor,
            q1,
            q2,
            target_q1,
            target_q2,
        })
    }

    /// Deterministic greedy action for a raw frame stack: encode, take the
    /// actor's (tanh-bounded) mean. No noise is added at inference time.
    pub fn act_eval(&self, net: &VisualConfig, frames: &[Frame]) -> Result<Vec<f64>, AgentError> {
        let obs = frames_to_obs(frames, net.render_size, net.frame_stack)?;
        let feat = self.encoder.eval(&obs)?;
        let action = self.actor.eval(&feat)?;
        Ok(action.data().to_vec())
    }

    /// Bootstrap targets for a batch: encodes the (already augmented) next
    /// observations, perturbs the actor's next action with clipped Gaussian
    /// smoothing noise, and takes the elementwise minimum of the two target
    /// critics — the pessimistic target never exceeds either individual
    /// estimate.
    pub fn td_targets(
        &self,
        next_obs_aug: &Tensor,
        rewards: &Tensor,
        discount: f64,
        sigma: f64,
        clip: f64,
        rng: &mut impl Rng,
    ) -> Result<TargetParts, AgentError> {
        let feat = self.encoder.eval(next_obs_aug)?;
        let mut action = self.actor.eval(&feat)?;
        for a in action.data_mut() {
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
            *a = (*a + eps.clamp(-clip, clip)).clamp(-1.0, 1.0);
        }
        let q_in = hcat(&feat, &action);
        let q1 = self.target_q1.eval(&q_in)?;
        let q2 = self.target_q2.eval(&q_in)?;
        let b = rewards.rows();
        let mut y = Vec::with_capacity(b);
        let mut alt1 = Vec::with_capacity(b);
        let mut alt2 = Vec::with_capacity(b);
        for i in 0..b {
            let r = rewards.data()[i];
            let t1 = r + discount * q1.data()[i];
            let t2 = r + discount * q2.data()[i];
            y.push(t1.min(t2));
            alt1.push(t1);
            alt2.push(t2);
        }
        Ok(TargetParts {
            y: Tensor::from_vec(&[b, 1], y),
            alt1: Tensor::from_vec(&[b, 1], alt1),
            alt2: Tensor::from_vec(&[b, 1], alt2),
        })
    }

    /// Moves both target critics toward the online critics by `tau`.
    pub fn ema_targets(&mut self, tau: f64) {
        ema_update(&mut self.target_q1, &self.q1, tau);
        ema_update(&mut self.target_q2, &self.q2, tau);
    }

    /// All six networks in checkpoint order.
    pub fn networks(&self) -> [&Network; 6] {
        [
            &self.encoder,
            &self.actor,
            &self.q1,
            &self.q2,
            &self.target_q1,
            &self.target_q2,
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 6] {
        [
            &mut self.encoder,
            &mut self.actor,
            &mut self.q1,
            &mut self.q2,
            &mut self.target_q1,
            &mut self.target_q2,
        ]
    }
}

const AGENT_MAGIC: &[u8; 8] = b"OFPXAGT1";

/// Writes the common agent checkpoint file: magic, format version, kind
/// label, config JSON, then one hash-validated section per network.
pub(crate) fn save_agent(
    path: &Path,
    kind: AgentKind,
    config_json: &[u8],
    nets: &[&Network],
) -> Result<(), AgentError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(AGENT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let label = kind.label().as_bytes();
    w.write_all(&(label.len() as u32).to_le_bytes())?;
    w.write_all(label)?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json)?;
    for net in nets {
        write_section(&mut w, &net.spec().hash(), &net.params)?;
    }
    w.flush()?;
    Ok(())
}

/// Opens an agent checkpoint, validates framing, and returns the reader
/// positioned at the first network section plus the stored kind and config.
pub(crate) fn open_agent(path: &Path) -> Result<(BufReader<File>, AgentKind, Vec<u8>), AgentError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != AGENT_MAGIC {
        return Err(AgentError::BadMagic);
    }
    let mut vbytes = [0u8; 4];
    r.read_exact(&mut vbytes)?;
    let version = u32::from_le_bytes(vbytes);
    if version != CHECKPOINT_VERSION {
        return Err(AgentError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut lbytes = [0u8; 4];
    r.read_exact(&mut lbytes)?;
    let mut label = vec![0u8; u32::from_le_bytes(lbytes) as usize];
    r.read_exact(&mut label)?;
    let label = String::from_utf8(label).map_err(|_| AgentError::UnknownKind("non-utf8".into()))?;
    let kind = AgentKind::parse(&label)?;
    let mut cbytes = [0u8; 8];
    r.read_exact(&mut cbytes)?;
    let mut config = vec![0u8; u64::from_le_bytes(cbytes) as usize];
    r.read_exact(&mut config)?;
    Ok((r, kind, config))
}

/// Like [`open_agent`], but additionally checks the stored kind.
pub(crate) fn open_agent_as(
    path: &Path,
    expected: AgentKind,
) -> Result<(BufReader<File>, Vec<u8>), AgentError> {
    let (r, kind, config) = open_agent(path)?;
    if kind != expected {
        return Err(AgentError::WrongKind {
            found: kind,
            expected,
        });
    }
    Ok((r, config))
}

/// Reads just the agent kind from a checkpoint, for dispatch.
pub fn peek_agent_kind(path: &Path) -> Result<AgentKind, AgentError> {
    let (_, kind, _) = open_agent(path)?;
    Ok(kind)
}
