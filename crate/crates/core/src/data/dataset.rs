//! In-memory dataset container and summary statistics.

use serde::{Deserialize, Serialize};

use super::{DataError, Distribution};
use crate::env::EnvConfig;

/// One complete episode as stored in a dataset.
///
/// Frames are kept in their quantized byte form (`round(255 * px)`), which is
/// both the on-disk representation and a quarter of the f64 footprint;
/// samplers dequantize on the way out. For an episode of `len` steps there
/// are `len + 1` frames: the reset observation plus one per action.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// Index into the dataset header's environment list.
    pub env_idx: usize,
    /// Seed passed to `Env::reset` for this episode.
    pub seed: u64,
    /// Quantized frames, `(len + 1) * size * size * 3` bytes, time-major.
    pub frames: Vec<u8>,
    /// Row-major `len * action_dim` actions as executed (post-clamp).
    pub actions: Vec<f64>,
    /// One reward per step.
    pub rewards: Vec<f64>,
}

impl EpisodeRecord {
    /// Number of steps (actions) in the episode.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    /// True when the episode holds no steps.
    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Undiscounted episode return.
    pub fn ep_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Borrow of the quantized bytes of frame `t` (0 is the reset frame).
    pub fn frame_bytes(&self, t: usize, frame_len: usize) -> &[u8] {
        &self.frames[t * frame_len..(t + 1) * frame_len]
    }
}

/// Per-episode bookkeeping mirrored into the header for cheap inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub env_idx: usize,
    pub seed: u64,
    pub len: usize,
    #[serde(rename = "return")]
    pub ep_return: f64,
}

/// Seven-number summary of per-episode returns.
///
/// `std` is the population standard deviation (divide by `n`, not `n - 1`):
/// the episodes in a dataset are the whole population of interest, not a
/// sample from a larger one. Percentiles use linear interpolation between
/// order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

impl ReturnStats {
    /// Computes the summary over a non-empty slice of returns.
    pub fn compute(returns: &[f64]) -> Result<ReturnStats, DataError> {
        if returns.is_empty() {
            return Err(DataError::Empty);
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let mut sorted = returns.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("returns are finite"));
        Ok(ReturnStats {
            mean,
            std: var.sqrt(),
            min: sorted[0],
            p25: percentile(&sorted, 25.0),
            median: percentile(&sorted, 50.0),
            p75: percentile(&sorted, 75.0),
            max: sorted[sorted.len() - 1],
        })
    }

    /// All-zero placeholder carried by datasets with no episodes yet.
    pub(crate) fn zeroed() -> ReturnStats {
        ReturnStats {
            mean: 0.0,
            std: 0.0,
            min: 0.0,
            p25: 0.0,
            median: 0.0,
            p75: 0.0,
            max: 0.0,
        }
    }

    /// The column order used by every stats table this crate emits.
    pub const CSV_HEADER: &'static str = "mean,std,min,p25,median,p75,max";

    /// One CSV row in [`Self::CSV_HEADER`] order.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.mean, self.std, self.min, self.p25, self.median, self.p75, self.max
        )
    }
}

/// p-th percentile of an ascending-sorted slice, linearly interpolating
/// between the two nearest order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// JSON header serialized at the front of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    /// Mirrors the binary format version so the JSON is self-describing.
    pub format_version: u32,
    /// Behavioral distribution the data was drawn from.
    pub distribution: Distribution,
    /// Human-readable description of the collection policy.
    pub policy: String,
    /// Every environment configuration episodes were collected from.
    /// Single-environment datasets have one entry; pooled and
    /// distraction-mixture datasets have several.
    pub envs: Vec<EnvConfig>,
    /// Total steps across all episodes.
    pub transition_count: usize,
    /// Summary of per-episode returns.
    pub stats: ReturnStats,
    /// Per-episode bookkeeping, in payload order.
    pub episodes: Vec<EpisodeMeta>,
    /// Hex SHA-256 of the payload section that follows the header.
    pub payload_sha256: String,
}

/// An ordered collection of episodes plus the header describing them.
///
/// The header is re-derived by every operation that changes the episode
/// list, so `header.episodes`, `transition_count`, and `stats` always agree
/// with the actual content. The payload checksum is only populated by the
/// storage layer at save time (it is a property of the encoded bytes).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    /// Assembles a dataset from parts, deriving the header bookkeeping.
    pub fn from_episodes(
        distribution: Distribution,
        policy: String,
        envs: Vec<EnvConfig>,
        episodes: Vec<EpisodeRecord>,
    ) -> Result<Dataset, DataError> {
        for (i, ep) in episodes.iter().enumerate() {
            if ep.env_idx >= envs.len() {
                return Err(DataError::ConfigMismatch(format!(
                    "episode {i} points at environment {} but only {} are declared",
                    ep.env_idx,
                    envs.len()
                )));
            }
            let cfg = &envs[ep.env_idx];
            let frame_len = cfg.render_size * cfg.render_size * 3;
            if ep.frames.len() != (ep.len() + 1) * frame_len
                || ep.actions.len() != ep.len() * cfg.task.action_dim()
            {
                return Err(DataError::ConfigMismatch(format!(
                    "episode {i} has malformed frame or action buffers"
                )));
            }
        }
        let mut ds = Dataset {
            header: DatasetHeader {
                format_version: super::DATA_FORMAT_VERSION,
                distribution,
                policy,
                envs,
                transition_count: 0,
                stats: ReturnStats::zeroed(),
                episodes: Vec::new(),
                payload_sha256: String::new(),
            },
            episodes,
        };
        ds.rebuild_header()?;
        Ok(ds)
    }

    /// A dataset with declared environments but no episodes yet. Useful as
    /// the identity for [`concat`]; it cannot be saved or sampled.
    pub fn empty(distribution: Distribution, env: EnvConfig) -> Dataset {
        Dataset {
            header: DatasetHeader {
                format_version: super::DATA_FORMAT_VERSION,
                distribution,
                policy: String::new(),
                envs: vec![env],
                transition_count: 0,
                stats: ReturnStats::zeroed(),
                episodes: Vec::new(),
                payload_sha256: String::new(),
            },
            episodes: Vec::new(),
        }
    }

    /// Environment configuration for a given episode.
    pub fn env_for(&self, episode: usize) -> &EnvConfig {
        &self.header.envs[self.episodes[episode].env_idx]
    }

    /// Total number of steps across all episodes.
    pub fn transition_count(&self) -> usize {
        self.header.transition_count
    }

    /// Per-episode returns in payload order.
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(EpisodeRecord::ep_return).collect()
    }

    /// Recomputes the seven-number return summary from the episodes.
    pub fn stats(&self) -> Result<ReturnStats, DataError> {
        ReturnStats::compute(&self.returns())
    }

    /// Re-derives `episodes`, `transition_count`, and `stats` in the header
    /// from the actual episode list. The payload checksum is cleared because
    /// it no longer corresponds to any encoded bytes.
    pub(crate) fn rebuild_header(&mut self) -> Result<(), DataError> {
        self.header.episodes = self
            .episodes
            .iter()
            .map(|ep| EpisodeMeta {
                env_idx: ep.env_idx,
                seed: ep.seed,
                len: ep.len(),
                ep_return: ep.ep_return(),
            })
            .collect();
        self.header.transition_count = self.episodes.iter().map(EpisodeRecord::len).sum();
        self.header.stats = if self.episodes.is_empty() {
            ReturnStats::zeroed()
        } else {
            self.stats()?
        };
        self.header.payload_sha256 = String::new();
        Ok(())
    }

    /// Concatenates another dataset's episodes after this one's.
    ///
    /// Both datasets must declare exactly the same environment list (same
    /// task, variant, distraction, and rendering parameters, in the same
    /// order); `label` names the combined distribution. Concatenating an
    /// empty dataset is the identity on episodes and stats.
    pub fn concat(a: &Dataset, b: &Dataset, label: Distribution) -> Result<Dataset, DataError> {
        if a.header.envs != b.header.envs {
            return Err(DataError::ConfigMismatch(format!(
                "environment lists differ ({} vs {})",
                summarize_envs(&a.header.envs),
                summarize_envs(&b.header.envs)
            )));
        }
        let policy = match (a.episodes.is_empty(), b.episodes.is_empty()) {
            (false, true) => a.header.policy.clone(),
            (true, false) => b.header.policy.clone(),
            _ => format!(
                "concat({} [{}], {} [{}])",
                a.header.distribution, a.header.policy, b.header.distribution, b.header.policy
            ),
        };
        let mut episodes = a.episodes.clone();
        episodes.extend(b.episodes.iter().cloned());
        Dataset::from_episodes(label, policy, a.header.envs.clone(), episodes)
    }

    /// Merges datasets collected from different environment configurations
    /// (e.g. several dynamics variants) into one, re-indexing each episode
    /// into a combined environment list. All parts must share the same task,
    /// rendering geometry, and distribution label.
    pub fn pool(parts: &[Dataset]) -> Result<Dataset, DataError> {
        let first = parts.first().ok_or(DataError::Empty)?;
        let proto = first.header.envs.first().ok_or(DataError::Empty)?;
        let mut envs: Vec<EnvConfig> = Vec::new();
        let mut episodes: Vec<EpisodeRecord> = Vec::new();
        for (i, part) in parts.iter().enumerate() {
            if part.header.distribution != first.header.distribution {
                return Err(DataError::ConfigMismatch(format!(
                    "part {i} is {} but part 0 is {}",
                    part.header.distribution, first.header.distribution
                )));
            }
            for cfg in &part.header.envs {
                let compatible = cfg.task == proto.task
                    && cfg.render_size == proto.render_size
                    && cfg.action_repeat == proto.action_repeat
                    && cfg.frame_stack == proto.frame_stack
                    && cfg.episode_len == proto.episode_len;
                if !compatible {
                    return Err(DataError::ConfigMismatch(format!(
                        "part {i} mixes tasks or rendering geometry with part 0"
                    )));
                }
            }
            // Map this part's env indices into the combined list, reusing
            // entries for configurations already present.
            let remap: Vec<usize> = part
                .header
                .envs
                .iter()
                .map(|cfg| {
                    envs.iter().position(|e| e == cfg).unwrap_or_else(|| {
                        envs.push(cfg.clone());
                        envs.len() - 1
                    })
                })
                .collect();
            for ep in &part.episodes {
                let mut ep = ep.clone();
                ep.env_idx = remap[ep.env_idx];
                episodes.push(ep);
            }
        }
        let policy = format!("pool of {} parts [{}]", parts.len(), first.header.policy);
        Dataset::from_episodes(first.header.distribution, policy, envs, episodes)
    }
}

fn summarize_envs(envs: &[EnvConfig]) -> String {
    let items: Vec<String> = envs.iter().map(|e| e.hash()[..8].to_string()).collect();
    format!("[{}]", items.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DynamicsVariant, Task};

    fn toy_episode(env_idx: usize, seed: u64, rewards: Vec<f64>, cfg: &EnvConfig) -> EpisodeRecord {
        let frame_len = cfg.render_size * cfg.render_size * 3;
        let len = rewards.len();
        EpisodeRecord {
            env_idx,
            seed,
            frames: vec![seed as u8; (len + 1) * frame_len],
            actions: vec![0.25; len * cfg.task.action_dim()],
            rewards,
        }
    }

    fn toy_dataset(returns: &[f64]) -> Dataset {
        let cfg = EnvConfig::new(Task::Pointmass);
        let eps: Vec<EpisodeRecord> = returns
            .iter()
            .enumerate()
            .map(|(i, r)| toy_episode(0, i as u64, vec![r / 4.0; 4], &cfg))
            .collect();
        Dataset::from_episodes(Distribution::Random, "test".into(), vec![cfg], eps).unwrap()
    }

    /// Brute-force reference: population std by definition, percentile by
    /// the interpolation formula written out long-hand.
    fn reference_stats(returns: &[f64]) -> ReturnStats {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut s = returns.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |p: f64| {
            let rank = p / 100.0 * (s.len() as f64 - 1.0);
            let lo = rank.floor() as usize;
            let frac = rank - lo as f64;
            if lo + 1 < s.len() {
                s[lo] * (1.0 - frac) + s[lo + 1] * frac
            } else {
                s[lo]
            }
        };
        ReturnStats {
            mean,
            std,
            min: s[0],
            p25: pct(25.0),
            median: pct(50.0),
            p75: pct(75.0),
            max: s[s.len() - 1],
        }
    }

    #[test]
    fn stats_match_brute_force_reference() {
        let cases: Vec<Vec<f64>> = vec![
            vec![500.0],
            vec![0.0, 1000.0],
            vec![10.0, 20.0, 30.0, 40.0],
            vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0],
            (0..101).map(|i| (i * i) as f64 * 0.1).collect(),
        ];
        for returns in cases {
            let got = ReturnStats::compute(&returns).unwrap();
            let want = reference_stats(&returns);
            for (g, w) in [
                (got.mean, want.mean),
                (got.std, want.std),
                (got.min, want.min),
                (got.p25, want.p25),
                (got.median, want.median),
                (got.p75, want.p75),
                (got.max, want.max),
            ] {
                assert!(
                    (g - w).abs() <= 1e-9 * w.abs().max(1.0),
                    "{g} vs {w} on {returns:?}"
                );
            }
        }
    }

    #[test]
    fn stats_hand_cases() {
        // Two episodes at the extremes: mean 500, population std 500,
        // median interpolated halfway.
        let s = ReturnStats::compute(&[0.0, 1000.0]).unwrap();
        assert_eq!(s.mean, 500.0);
        assert_eq!(s.std, 500.0);
        assert_eq!(s.min, 0.0);
        assert_eq!(s.p25, 250.0);
        assert_eq!(s.median, 500.0);
        assert_eq!(s.p75, 750.0);
        assert_eq!(s.max, 1000.0);

        // A single episode collapses every column to the same value.
        let s = ReturnStats::compute(&[123.25]).unwrap();
        for v in [s.mean, s.min, s.p25, s.median, s.p75, s.max] {
            assert_eq!(v, 123.25);
        }
        assert_eq!(s.std, 0.0);

        // Four sorted values: p25 lands exactly on the second order statistic
        // at rank 0.75 -> 10 + 0.75 * 10.
        let s = ReturnStats::compute(&[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(s.p25, 17.5);
        assert_eq!(s.median, 25.0);
        assert_eq!(s.p75, 32.5);

        assert!(matches!(ReturnStats::compute(&[]), Err(DataError::Empty)));
    }

    #[test]
    fn csv_row_matches_header_order() {
        let s = ReturnStats::compute(&[0.0, 1000.0]).unwrap();
        assert_eq!(ReturnStats::CSV_HEADER.split(',').count(), 7);
        assert_eq!(
            s.csv_row(),
            "500.000,500.000,0.000,250.000,500.000,750.000,1000.000"
        );
    }

    #[test]
    fn header_tracks_episode_list() {
        let ds = toy_dataset(&[100.0, 200.0, 300.0]);
        assert_eq!(ds.header.transition_count, 12);
        assert_eq!(ds.header.episodes.len(), 3);
        assert_eq!(ds.header.episodes[1].ep_return, 200.0);
        assert_eq!(ds.header.stats.mean, 200.0);
    }

    #[test]
    fn concat_is_identity_on_empty() {
        let ds = toy_dataset(&[100.0, 200.0]);
        let empty = Dataset::empty(Distribution::Random, ds.header.envs[0].clone());
        let joined = Dataset::concat(&ds, &empty, Distribution::Random).unwrap();
        assert_eq!(joined.episodes, ds.episodes);
        assert_eq!(joined.header.stats, ds.header.stats);
        assert_eq!(joined.header.policy, ds.header.policy);
        let joined = Dataset::concat(&empty, &ds, Distribution::Random).unwrap();
        assert_eq!(joined.episodes, ds.episodes);
    }

    #[test]
    fn concat_rejects_mismatched_envs() {
        let a = toy_dataset(&[1.0]);
        let cfg_b = EnvConfig::new(Task::Pointmass).with_variant(DynamicsVariant::H);
        let ep = toy_episode(0, 9, vec![0.5; 4], &cfg_b);
        let b = Dataset::from_episodes(Distribution::Random, "test".into(), vec![cfg_b], vec![ep])
            .unwrap();
        assert!(matches!(
            Dataset::concat(&a, &b, Distribution::Random),
            Err(DataError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn concat_merges_and_recomputes() {
        let a = toy_dataset(&[100.0, 200.0]);
        let b = toy_dataset(&[300.0, 400.0]);
        let joined = Dataset::concat(&a, &b, Distribution::Medexp).unwrap();
        assert_eq!(joined.episodes.len(), 4);
        assert_eq!(joined.header.distribution, Distribution::Medexp);
        assert_eq!(joined.header.stats.mean, 250.0);
        assert_eq!(joined.header.transition_count, 16);
    }

    #[test]
    fn pool_remaps_env_indices() {
        let mk = |variant| {
            let cfg = EnvConfig::new(Task::Pointmass).with_variant(variant);
            let ep = toy_episode(0, 1, vec![1.0; 4], &cfg);
            Dataset::from_episodes(Distribution::Medium, "pd".into(), vec![cfg], vec![ep]).unwrap()
        };
        let pooled = Dataset::pool(&[
            mk(DynamicsVariant::B),
            mk(DynamicsVariant::C),
            mk(DynamicsVariant::F),
            mk(DynamicsVariant::G),
        ])
        .unwrap();
        assert_eq!(pooled.header.envs.len(), 4);
        assert_eq!(pooled.episodes.len(), 4);
        for (i, ep) in pooled.episodes.iter().enumerate() {
            assert_eq!(ep.env_idx, i);
        }
        let variants: Vec<_> = pooled
            .header
            .envs
            .iter()
            .map(|e| e.variant.unwrap())
            .collect();
        assert_eq!(
            variants,
            vec![
                DynamicsVariant::B,
                DynamicsVariant::C,
                DynamicsVariant::F,
                DynamicsVariant::G
            ]
        );
    }

    #[test]
    fn pool_rejects_mixed_tasks() {
        let cfg_a = EnvConfig::new(Task::Pointmass);
        let cfg_b = EnvConfig::new(Task::Arm);
        let a = Dataset::from_episodes(
            Distribution::Random,
            "r".into(),
            vec![cfg_a.clone()],
            vec![toy_episode(0, 1, vec![1.0; 4], &cfg_a)],
        )
        .unwrap();
        let b = Dataset::from_episodes(
            Distribution::Random,
            "r".into(),
            vec![cfg_b.clone()],
            vec![toy_episode(0, 1, vec![1.0; 4], &cfg_b)],
        )
        .unwrap();
        assert!(matches!(
            Dataset::pool(&[a, b]),
            Err(DataError::ConfigMismatch(_))
        ));
    }
}
