//! Disagreement statistics over datasets and reconstruction inspection.
//!
//! Useful for auditing a trained model: how much do the transition heads
//! disagree on the states the dataset actually visits (the baseline that
//! imagination penalties are measured against), and what do its
//! reconstructions look like next to the real frames?

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_sequences, DataError, Dataset};
use crate::env::Frame;
use crate::nn::{Tape, Tensor};

use super::imagine::ensemble_penalty;
use super::{LatentState, WmError, WorldModel};

/// Default number of dataset states summarized by [`penalty_stats`].
pub const DEFAULT_PENALTY_STATES: usize = 1024;

/// Mean and spread of ensemble disagreement across sampled dataset states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyStats {
    pub mean: f64,
    pub std: f64,
    /// Number of states the summary was computed over.
    pub count: usize,
}

impl PenaltyStats {
    /// Column header matching [`PenaltyStats::csv_row`].
    pub const CSV_HEADER: &'static str = "model,dataset,penalty_mean,penalty_std,states";

    /// One CSV row labeling this summary with the model and dataset it
    /// belongs to, so rows from several pairings stack into one table.
    pub fn csv_row(&self, model: &str, dataset: &str) -> String {
        format!(
            "{model},{dataset},{:.6},{:.6},{}",
            self.mean, self.std, self.count
        )
    }
}

impl WorldModel {
    /// Ensemble disagreement at each recurrent state in `h` (one row per
    /// state), computed in plain value arithmetic — no tape involved.
    pub fn disagreement_penalty(&self, h: &Tensor) -> Result<Vec<f64>, WmError> {
        if h.cols() != self.cfg.deter {
            return Err(WmError::BadRequest(format!(
                "state width {} does not match model deter {}",
                h.cols(),
                self.cfg.deter
            )));
        }
        let b = h.rows();
        let z_dim = self.cfg.z_dim();
        let mut member_probs = Vec::with_capacity(self.priors.len());
        for net in &self.priors {
            let logits = net.eval(h)?;
            member_probs.push(softmax_groups(&logits, self.cfg.groups, self.cfg.classes));
        }
        Ok((0..b)
            .map(|row| {
                let members: Vec<Vec<f64>> = member_probs
                    .iter()
                    .map(|p| p.data()[row * z_dim..(row + 1) * z_dim].to_vec())
                    .collect();
                ensemble_penalty(&members)
            })
            .collect())
    }

    /// Decodes each latent state back to a frame, clipped to pixel range.
    pub fn reconstruct(&self, latent: &LatentState) -> Result<Vec<Frame>, WmError> {
        if latent.h.cols() != self.cfg.deter || latent.z.cols() != self.cfg.z_dim() {
            return Err(WmError::BadRequest(format!(
                "latent widths ({}, {}) do not match model ({}, {})",
                latent.h.cols(),
                latent.z.cols(),
                self.cfg.deter,
                self.cfg.z_dim()
            )));
        }
        let b = latent.len();
        let feat = self.cfg.feature_dim();
        let mut features = Vec::with_capacity(b * feat);
        for row in 0..b {
            features.extend_from_slice(
                &latent.h.data()[row * self.cfg.deter..(row + 1) * self.cfg.deter],
            );
            features.extend_from_slice(
                &latent.z.data()[row * self.cfg.z_dim()..(row + 1) * self.cfg.z_dim()],
            );
        }
        let out = self.decoder.eval(&Tensor::from_vec(&[b, feat], features))?;
        if !out.all_finite() {
            return Err(WmError::BadRequest(
                "decoder produced non-finite pixel values".into(),
            ));
        }
        let s = self.cfg.render_size;
        let frame_len = s * s * 3;
        Ok((0..b)
            .map(|row| {
                Frame::from_data(
                    s,
                    out.data()[row * frame_len..(row + 1) * frame_len].to_vec(),
                )
            })
            .collect())
    }
}

/// Summarizes ensemble disagreement over `n_states` posterior states drawn
/// from `dataset` (deterministic in `seed`).
///
/// The model filters sampled subsequences exactly as during training, and
/// the disagreement of the transition heads is measured at every visited
/// recurrent state. On the data itself a well-trained ensemble should agree
/// closely; this is the yardstick against which imagination penalties make
/// sense. Returns the population mean and standard deviation.
pub fn penalty_stats(
    model: &WorldModel,
    dataset: &Dataset,
    n_states: usize,
    seed: u64,
) -> Result<PenaltyStats, WmError> {
    if n_states == 0 {
        return Err(WmError::BadRequest(
            "penalty statistics need at least one state".into(),
        ));
    }
    let shortest = dataset
        .episodes
        .iter()
        .map(|e| e.len())
        .min()
        .ok_or(DataError::Empty)?;
    // Subsequences fit inside every episode: length is capped both by the
    // data and by how many states one filtering pass should visit.
    let len = shortest.min(9) + 1;
    let batch = 32.min(n_states.max(2));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5AD1_57A7);
    let mut values = Vec::with_capacity(n_states);
    let mut draw = 0u64;
    while values.len() < n_states {
        let seqs = sample_sequences(dataset, batch, len, seed.wrapping_add(draw))?;
        let mut tape = Tape::new();
        let vars = model.bind_frozen(&mut tape);
        let out = model.observe(&mut tape, &vars, &seqs, &mut rng)?;
        for post in &out.posts {
            values.extend(model.disagreement_penalty(&post.h)?);
            if values.len() >= n_states {
                break;
            }
        }
        draw += 1;
    }
    values.truncate(n_states);

    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(PenaltyStats {
        mean,
        std: var.sqrt(),
        count: values.len(),
    })
}

/// Writes a comparison strip as one PNG: originals across the top row,
/// reconstructions directly beneath them.
pub fn save_reconstruction_strip(path: &Path, pairs: &[(Frame, Frame)]) -> Result<(), WmError> {
    let (first, _) = pairs.first().ok_or_else(|| {
        WmError::BadRequest("reconstruction strip needs at least one pair".into())
    })?;
    let s = first.size();
    let n = pairs.len();
    let stride = n * s * 3;
    let mut buf = vec![0u8; 2 * s * stride];
    for (i, (original, recon)) in pairs.iter().enumerate() {
        if original.size() != s || recon.size() != s {
            return Err(WmError::BadRequest(
                "all frames in a strip must share one size".into(),
            ));
        }
        let top = original.quantize();
        let bottom = recon.quantize();
        for y in 0..s {
            let src = y * s * 3;
            let dst = y * stride + i * s * 3;
            buf[dst..dst + s * 3].copy_from_slice(&top[src..src + s * 3]);
            let dst = (s + y) * stride + i * s * 3;
            buf[dst..dst + s * 3].copy_from_slice(&bottom[src..src + s * 3]);
        }
    }
    let img = image::RgbImage::from_raw((n * s) as u32, (2 * s) as u32, buf)
        .expect("buffer length matches strip dimensions");
    img.save(path)
        .map_err(|e| WmError::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Row-wise softmax applied independently to each `classes`-wide group.
fn softmax_groups(logits: &Tensor, groups: usize, classes: usize) -> Tensor {
    let mut out = logits.clone();
    let rows = logits.rows();
    let data = out.data_mut();
    for row in 0..rows {
        for g in 0..groups {
            let start = row * groups * classes + g * classes;
            let slice = &mut data[start..start + classes];
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in slice.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in slice.iter_mut() {
                *v /= sum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect, BehavioralPolicy, Distribution};
    use crate::env::{EnvConfig, Task};
    use crate::world_model::WorldModelConfig;

    fn toy_dataset(transitions: usize, seed: u64) -> Dataset {
        let mut cfg = EnvConfig::new(Task::Pointmass);
        cfg.render_size = 16;
        cfg.episode_len = 10;
        collect(
            &cfg,
            &BehavioralPolicy::Random,
            transitions,
            seed,
            Distribution::Random,
        )
        .unwrap()
    }

    fn tiny_model(seed: u64) -> WorldModel {
        WorldModel::init(WorldModelConfig::compact(16, 2), seed).unwrap()
    }

    #[test]
    fn softmax_groups_normalizes_each_group() {
        let logits = Tensor::from_vec(&[2, 4], vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.0, 3.0, 3.0]);
        let probs = softmax_groups(&logits, 2, 2);
        for row in 0..2 {
            for g in 0..2 {
                let s: f64 = probs.data()[row * 4 + g * 2..row * 4 + g * 2 + 2]
                    .iter()
                    .sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // Equal logits within a group split evenly.
        assert!((probs.data()[6] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tied_heads_report_exactly_zero_disagreement() {
        let mut model = tiny_model(3);
        // Overwrite every head with the first head's parameters.
        let reference: Vec<Tensor> = model.priors[0]
            .params
            .iter()
            .map(|p| p.values.clone())
            .collect();
        for head in model.priors.iter_mut().skip(1) {
            for (p, r) in head.params.iter_mut().zip(&reference) {
                p.values = r.clone();
            }
        }
        let dataset = toy_dataset(60, 5);
        let stats = penalty_stats(&model, &dataset, 64, 11).unwrap();
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.std, 0.0);
        assert_eq!(stats.count, 64);
    }

    #[test]
    fn fresh_heads_disagree_and_stats_are_deterministic() {
        let model = tiny_model(4);
        let dataset = toy_dataset(60, 6);
        let a = penalty_stats(&model, &dataset, 100, 7).unwrap();
        let b = penalty_stats(&model, &dataset, 100, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.mean > 0.0, "independent random heads should disagree");
        assert_eq!(a.count, 100);
        assert!(penalty_stats(&model, &dataset, 0, 7).is_err());
    }

    #[test]
    fn csv_rows_stack_under_one_header() {
        let s1 = PenaltyStats {
            mean: 0.125,
            std: 0.5,
            count: 1024,
        };
        let row = s1.csv_row("m1", "random");
        assert_eq!(row, "m1,random,0.125000,0.500000,1024");
        assert_eq!(
            PenaltyStats::CSV_HEADER.split(',').count(),
            row.split(',').count()
        );
    }

    #[test]
    fn disagreement_penalty_checks_state_width() {
        let model = tiny_model(5);
        let bad = Tensor::zeros(&[2, model.config().deter + 1]);
        assert!(matches!(
            model.disagreement_penalty(&bad),
            Err(WmError::BadRequest(_))
        ));
    }

    #[test]
    fn untrained_reconstruction_is_finite_and_in_pixel_range() {
        let model = tiny_model(6);
        let cfg = model.config();
        let mut z = vec![0.0; 2 * cfg.z_dim()];
        for row in 0..2 {
            for g in 0..cfg.groups {
                z[row * cfg.z_dim() + g * cfg.classes + g % cfg.classes] = 1.0;
            }
        }
        let latent = LatentState {
            h: Tensor::from_vec(
                &[2, cfg.deter],
                (0..2 * cfg.deter)
                    .map(|i| (i as f64 * 0.01) - 0.3)
                    .collect(),
            ),
            z: Tensor::from_vec(&[2, cfg.z_dim()], z),
        };
        let frames = model.reconstruct(&latent).unwrap();
        assert_eq!(frames.len(), 2);
        for f in &frames {
            assert_eq!(f.size(), cfg.render_size);
            assert!(f
                .data()
                .iter()
                .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn strip_png_has_two_rows_of_frames() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("strip.png");
        let mut a = vec![0.0; 16 * 16 * 3];
        a[0] = 1.0;
        let pairs = vec![
            (
                Frame::from_data(16, a.clone()),
                Frame::from_data(16, vec![0.5; 16 * 16 * 3]),
            ),
            (
                Frame::from_data(16, vec![0.25; 16 * 16 * 3]),
                Frame::from_data(16, a),
            ),
        ];
        save_reconstruction_strip(&path, &pairs).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 32, "two frames side by side");
        assert_eq!(img.height(), 32, "originals above reconstructions");
        assert!(save_reconstruction_strip(&path, &[]).is_err());
    }
}
