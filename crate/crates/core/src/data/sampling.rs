//! Minibatch and sequence sampling from datasets.
//!
//! Frames live in datasets quantized and unstacked; samplers dequantize to
//! `[0, 1]` floats and assemble frame stacks on the way out. The stacked
//! observation layout is channels-last with the stack folded into channels:
//! `[row, col, frame_in_stack * 3 + rgb]`, oldest frame first — exactly the
//! pixel stream an agent sees at test time, so a policy trained on sampled
//! batches consumes live observations unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, EpisodeRecord};
use crate::nn::Tensor;

/// A batch of single transitions with n-step reward sums.
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    /// Stacked observations at `t`, shape `[batch, size, size, 3 * stack]`.
    pub obs: Tensor,
    /// Actions taken at `t`, shape `[batch, action_dim]`.
    pub actions: Tensor,
    /// Discounted n-step reward sums `Σ_{i<n} γ^i r_{t+i}`, shape `[batch, 1]`.
    pub rewards: Tensor,
    /// Stacked observations at `t + n`, shape `[batch, size, size, 3 * stack]`.
    pub next_obs: Tensor,
    /// Bootstrap discount `γ^n` (episodes are fixed-length, so no terminal
    /// cutoff applies).
    pub discount: f64,
    /// `(episode, t)` provenance of each row, for tests and debugging.
    pub indices: Vec<(usize, usize)>,
}

/// A batch of contiguous within-episode subsequences for sequence models.
///
/// Element `τ` of a sequence holds the observation at its timestep together
/// with the action and reward *leading into* it; at `τ = 0` both are zero
/// placeholders (the recurrent state starts without context, so the first
/// action carries no information either way).
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// `len` tensors of shape `[batch, size, size, 3]`.
    pub obs: Vec<Tensor>,
    /// `len` tensors of shape `[batch, action_dim]`; index 0 is all zeros.
    pub actions: Vec<Tensor>,
    /// `len` tensors of shape `[batch, 1]`; index 0 is all zeros.
    pub rewards: Vec<Tensor>,
    /// `(episode, start)` provenance of each sequence.
    pub starts: Vec<(usize, usize)>,
}

/// Draws `batch` transitions uniformly over all valid `(episode, t)` pairs.
///
/// A pair is valid when all `n_step` rewards `r_t .. r_{t+n-1}` and the
/// bootstrap observation at `t + n_step` lie inside the same episode, so
/// sampled transitions never cross an episode boundary. Draws are i.i.d.
/// with replacement and deterministic given `seed`.
pub fn sample_batch(
    dataset: &Dataset,
    batch: usize,
    n_step: usize,
    gamma: f64,
    seed: u64,
) -> Result<TransitionBatch, DataError> {
    let geom = Geometry::of(dataset)?;
    if batch == 0 {
        return Err(DataError::BadRequest("batch size must be positive".into()));
    }
    if n_step == 0 {
        return Err(DataError::BadRequest("n_step must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(DataError::BadRequest(format!(
            "discount {gamma} outside (0, 1]"
        )));
    }

    // Cumulative counts of valid start indices per episode, for uniform
    // sampling across episodes of (potentially) different lengths.
    let mut cumulative = Vec::with_capacity(dataset.episodes.len());
    let mut total = 0_usize;
    for ep in &dataset.episodes {
        // Valid starts satisfy t + n_step <= len: rewards r_t .. r_{t+n-1}
        // exist and frame t + n_step is stored (an episode keeps len + 1).
        total += (ep.len() + 1).saturating_sub(n_step);
        cumulative.push(total);
    }
    if total == 0 {
        return Err(DataError::BadRequest(format!(
            "no episode is long enough for n_step = {n_step}"
        )));
    }
    if batch > total {
        return Err(DataError::BadRequest(format!(
            "batch of {batch} exceeds the {total} available transitions"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let discounts: Vec<f64> = (0..n_step).map(|i| gamma.powi(i as i32)).collect();
    let mut obs = Tensor::zeros(&[batch, geom.size, geom.size, 3 * geom.stack]);
    let mut next_obs = Tensor::zeros(&[batch, geom.size, geom.size, 3 * geom.stack]);
    let mut actions = Tensor::zeros(&[batch, geom.action_dim]);
    let mut rewards = Tensor::zeros(&[batch, 1]);
    let mut indices = Vec::with_capacity(batch);
    let row_len = geom.size * geom.size * 3 * geom.stack;

    for b in 0..batch {
        let flat = rng.random_range(0..total);
        let ep_idx = cumulative.partition_point(|&c| c <= flat);
        let before = if ep_idx == 0 {
            0
        } else {
            cumulative[ep_idx - 1]
        };
        let t = flat - before;
        let ep = &dataset.episodes[ep_idx];

        geom.stack_into(ep, t, &mut obs.data_mut()[b * row_len..(b + 1) * row_len]);
        geom.stack_into(
            ep,
            t + n_step,
            &mut next_obs.data_mut()[b * row_len..(b + 1) * row_len],
        );
        let d = geom.action_dim;
        actions.data_mut()[b * d..(b + 1) * d].copy_from_slice(&ep.actions[t * d..(t + 1) * d]);
        rewards.data_mut()[b] = (0..n_step).map(|i| discounts[i] * ep.rewards[t + i]).sum();
        indices.push((ep_idx, t));
    }

    Ok(TransitionBatch {
        obs,
        actions,
        rewards,
        next_obs,
        discount: gamma.powi(n_step as i32),
        indices,
    })
}

/// Draws `batch` contiguous subsequences of `len` timesteps, each from a
/// single episode, uniformly over all valid `(episode, start)` pairs.
pub fn sample_sequences(
    dataset: &Dataset,
    batch: usize,
    len: usize,
    seed: u64,
) -> Result<SequenceBatch, DataError> {
    let geom = Geometry::of(dataset)?;
    if batch == 0 || len == 0 {
        return Err(DataError::BadRequest(
            "batch and sequence length must be positive".into(),
        ));
    }

    let mut cumulative = Vec::with_capacity(dataset.episodes.len());
    let mut total = 0_usize;
    for (i, ep) in dataset.episodes.iter().enumerate() {
        if len > ep.len() {
            return Err(DataError::BadRequest(format!(
                "sequence length {len} exceeds episode {i}'s length {}",
                ep.len()
            )));
        }
        // Starts run over the episode's len+1 stored frames.
        total += ep.len() + 2 - len;
        cumulative.push(total);
    }
    if total == 0 {
        return Err(DataError::Empty);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<(usize, usize)> = (0..batch)
        .map(|_| {
            let flat = rng.random_range(0..total);
            let ep_idx = cumulative.partition_point(|&c| c <= flat);
            let before = if ep_idx == 0 {
                0
            } else {
                cumulative[ep_idx - 1]
            };
            (ep_idx, flat - before)
        })
        .collect();

    let frame_len = geom.size * geom.size * 3;
    let d = geom.action_dim;
    let mut obs = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    let mut rewards = Vec::with_capacity(len);
    for tau in 0..len {
        let mut o = Tensor::zeros(&[batch, geom.size, geom.size, 3]);
        let mut a = Tensor::zeros(&[batch, d]);
        let mut r = Tensor::zeros(&[batch, 1]);
        for (b, &(ep_idx, start)) in starts.iter().enumerate() {
            let ep = &dataset.episodes[ep_idx];
            let t = start + tau;
            dequantize(
                ep.frame_bytes(t, frame_len),
                &mut o.data_mut()[b * frame_len..],
            );
            if tau > 0 {
                a.data_mut()[b * d..(b + 1) * d].copy_from_slice(&ep.actions[(t - 1) * d..t * d]);
                r.data_mut()[b] = ep.rewards[t - 1];
            }
        }
        obs.push(o);
        actions.push(a);
        rewards.push(r);
    }

    Ok(SequenceBatch {
        obs,
        actions,
        rewards,
        starts,
    })
}

/// Shared rendering geometry of every environment in a dataset. Sampling
/// needs identical frame and action shapes across episodes; pooled datasets
/// may vary in dynamics or distraction but never in geometry.
struct Geometry {
    size: usize,
    stack: usize,
    action_dim: usize,
}

impl Geometry {
    fn of(dataset: &Dataset) -> Result<Geometry, DataError> {
        let first = dataset.header.envs.first().ok_or(DataError::Empty)?;
        if dataset.episodes.is_empty() {
            return Err(DataError::Empty);
        }
        for cfg in &dataset.header.envs[1..] {
            if cfg.render_size != first.render_size
                || cfg.frame_stack != first.frame_stack
                || cfg.task != first.task
            {
                return Err(DataError::ConfigMismatch(
                    "dataset mixes frame geometries; cannot form rectangular batches".into(),
                ));
            }
        }
        Ok(Geometry {
            size: first.render_size,
            stack: first.frame_stack,
            action_dim: first.task.action_dim(),
        })
    }

    /// Writes the stacked observation at time `t` into `out`
    /// (`size * size * 3 * stack` floats). Stack slots before the episode
    /// start repeat frame 0, matching how the live environment fills its
    /// stack on reset.
    fn stack_into(&self, ep: &EpisodeRecord, t: usize, out: &mut [f64]) {
        let frame_len = self.size * self.size * 3;
        let channels = 3 * self.stack;
        for f in 0..self.stack {
            let src_t = (t + f).saturating_sub(self.stack - 1);
            let bytes = ep.frame_bytes(src_t, frame_len);
            for px in 0..self.size * self.size {
                let src = px * 3;
                let dst = px * channels + f * 3;
                out[dst] = bytes[src] as f64 / 255.0;
                out[dst + 1] = bytes[src + 1] as f64 / 255.0;
                out[dst + 2] = bytes[src + 2] as f64 / 255.0;
            }
        }
    }
}

/// Bytes to `[0, 1]` floats.
fn dequantize(bytes: &[u8], out: &mut [f64]) {
    for (o, b) in out.iter_mut().zip(bytes) {
        *o = *b as f64 / 255.0;
    }
}
