//! Episode collection, the five behavioral distributions, and
//! distraction-mixture re-rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{split_seed, BehavioralPolicy, DataError, Dataset, Distribution, EpisodeRecord};
use crate::env::{DistractorId, Env, EnvConfig, Severity};

/// Tuned controller gains per task: `(kp, kd)`.
///
/// These are the expert gains; the medium tier detunes them by
/// [`MEDIUM_GAIN_SCALES`] factors and adds heavy noise.
fn expert_gains(cfg: &EnvConfig) -> (f64, f64) {
    match cfg.task {
        crate::env::Task::Pointmass => (4.0, 2.5),
        crate::env::Task::Arm => (6.0, 2.0),
    }
}

/// Action-noise stddev for the expert tier.
const EXPERT_NOISE: f64 = 0.05;
/// Noise stddev at which a zero-gain controller behaves like a random
/// policy; the starting point of the mixed tier's annealing schedule.
const RANDOM_LEVEL_NOISE: f64 = 2.5;
/// Gain-detuning factors tried in order during medium calibration.
const MEDIUM_GAIN_SCALES: [f64; 4] = [0.3, 0.45, 0.6, 0.8];
/// Noise search interval for medium calibration. The ceiling matters for
/// the arm task, whose inertia and damping low-pass-filter torque noise, so
/// mid-level returns need a lot of it.
const MEDIUM_NOISE_LO: f64 = 0.0;
const MEDIUM_NOISE_HI: f64 = 3.0;
/// Episodes per calibration probe. Small enough to keep generation fast,
/// large enough that the probe mean is within a few tens of the true mean.
const PROBE_EPISODES: usize = 12;
/// Calibration targets the band center; the probe must land inside this
/// inner band so the (larger) collected dataset stays inside [400, 600].
const MEDIUM_TARGET: f64 = 500.0;
const MEDIUM_PROBE_TOL: f64 = 35.0;
/// Hard bands checked on the final collected datasets.
const MEDIUM_BAND: (f64, f64) = (400.0, 600.0);
const EXPERT_FLOOR: f64 = 850.0;

/// Rolls `n_transitions / episode_len` complete episodes with one policy.
///
/// Episode seeds are split deterministically from `seed`, so the result is
/// bit-identical across runs and across machines regardless of how the
/// episode-level parallelism is scheduled.
pub fn collect(
    cfg: &EnvConfig,
    policy: &BehavioralPolicy,
    n_transitions: usize,
    seed: u64,
    label: Distribution,
) -> Result<Dataset, DataError> {
    let n_episodes = episode_count(cfg, n_transitions)?;
    let policy = policy.clone();
    let episodes = collect_episodes(cfg, n_episodes, seed, &|_| policy.clone())?;
    Dataset::from_episodes(label, policy.describe(), vec![cfg.clone()], episodes)
}

fn episode_count(cfg: &EnvConfig, n_transitions: usize) -> Result<usize, DataError> {
    if n_transitions == 0 {
        return Err(DataError::BadRequest("cannot collect 0 transitions".into()));
    }
    if !n_transitions.is_multiple_of(cfg.episode_len) {
        return Err(DataError::BadRequest(format!(
            "transition count {n_transitions} is not a multiple of the episode length {}",
            cfg.episode_len
        )));
    }
    Ok(n_transitions / cfg.episode_len)
}

/// Runs `n_episodes` rollouts in parallel, with the policy chosen per
/// episode index (constant for most tiers, annealed for `mixed`).
fn collect_episodes(
    cfg: &EnvConfig,
    n_episodes: usize,
    seed: u64,
    policy_for: &(dyn Fn(usize) -> BehavioralPolicy + Sync),
) -> Result<Vec<EpisodeRecord>, DataError> {
    (0..n_episodes)
        .into_par_iter()
        .map(|i| rollout(cfg, &policy_for(i), split_seed(seed, i as u64), 0))
        .collect()
}

/// Rolls one episode and records quantized frames, executed actions, and
/// rewards. The action-noise stream is seeded from the episode seed, so an
/// episode is a pure function of `(cfg, policy, ep_seed)`.
fn rollout(
    cfg: &EnvConfig,
    policy: &BehavioralPolicy,
    ep_seed: u64,
    env_idx: usize,
) -> Result<EpisodeRecord, DataError> {
    let mut env = Env::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(ep_seed, 0x0C71_0A15));
    let frame_len = cfg.render_size * cfg.render_size * 3;
    let dim = cfg.task.action_dim();
    let mut frames = Vec::with_capacity((cfg.episode_len + 1) * frame_len);
    let mut actions = Vec::with_capacity(cfg.episode_len * dim);
    let mut rewards = Vec::with_capacity(cfg.episode_len);

    let (stack, _) = env.reset(ep_seed);
    frames.extend_from_slice(&stack.last().expect("stack is never empty").quantize());
    for _ in 0..cfg.episode_len {
        let a = policy.action(&env, &mut rng)?;
        actions.extend_from_slice(&a);
        let step = env.step(&a)?;
        frames.extend_from_slice(&step.frames.last().expect("stack is never empty").quantize());
        rewards.push(step.reward);
    }
    Ok(EpisodeRecord {
        env_idx,
        seed: ep_seed,
        frames,
        actions,
        rewards,
    })
}

/// Mean episode return of a policy over `episodes` fresh rollouts.
///
/// Used by medium calibration and by tests that pin the behavioral tiers'
/// competence levels; deterministic given `seed`.
pub fn probe_mean_return(
    cfg: &EnvConfig,
    policy: &BehavioralPolicy,
    episodes: usize,
    seed: u64,
) -> Result<f64, DataError> {
    if episodes == 0 {
        return Err(DataError::BadRequest(
            "probe needs at least one episode".into(),
        ));
    }
    let policy = policy.clone();
    let eps = collect_episodes(cfg, episodes, seed, &|_| policy.clone())?;
    Ok(eps.iter().map(EpisodeRecord::ep_return).sum::<f64>() / episodes as f64)
}

/// Generates one of the five named behavioral distributions.
///
/// `n_transitions` must be a positive multiple of the episode length. The
/// medium tier runs a deterministic gain/noise search targeting mean return
/// 500 and fails with the achieved value if the collected data lands outside
/// [400, 600]; the expert tier must reach mean return 850. `medexp` splits
/// the budget half-and-half between a medium and an expert collection, and
/// `mixed` anneals the action-noise stddev from drowning-the-controller down
/// to the calibrated medium level across the run, keeping every episode.
pub fn make_distribution(
    cfg: &EnvConfig,
    label: Distribution,
    n_transitions: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    match label {
        Distribution::Random => collect(cfg, &BehavioralPolicy::Random, n_transitions, seed, label),
        Distribution::Expert => {
            let (kp, kd) = expert_gains(cfg);
            let policy = BehavioralPolicy::Pd {
                kp,
                kd,
                noise: EXPERT_NOISE,
            };
            let ds = collect(cfg, &policy, n_transitions, seed, label)?;
            let achieved = ds.header.stats.mean;
            if achieved < EXPERT_FLOOR {
                return Err(DataError::CalibrationFailed {
                    label,
                    task: cfg.task.to_string(),
                    achieved,
                    lo: EXPERT_FLOOR,
                    hi: cfg.max_return(),
                    tried: 1,
                });
            }
            Ok(ds)
        }
        Distribution::Medium => {
            let (policy, _) = calibrate_medium(cfg, seed)?;
            let ds = collect(cfg, &policy, n_transitions, seed, label)?;
            let achieved = ds.header.stats.mean;
            if achieved < MEDIUM_BAND.0 || achieved > MEDIUM_BAND.1 {
                return Err(DataError::CalibrationFailed {
                    label,
                    task: cfg.task.to_string(),
                    achieved,
                    lo: MEDIUM_BAND.0,
                    hi: MEDIUM_BAND.1,
                    tried: 1,
                });
            }
            Ok(ds)
        }
        Distribution::Medexp => {
            let n_episodes = episode_count(cfg, n_transitions)?;
            if n_episodes < 2 {
                return Err(DataError::BadRequest(
                    "medexp needs at least two episodes (one medium, one expert)".into(),
                ));
            }
            let half = n_episodes / 2 * cfg.episode_len;
            let rest = n_transitions - half;
            let med = make_distribution(cfg, Distribution::Medium, half, split_seed(seed, 0xA))?;
            let exp = make_distribution(cfg, Distribution::Expert, rest, split_seed(seed, 0xB))?;
            Dataset::concat(&med, &exp, label)
        }
        Distribution::Mixed => {
            let n_episodes = episode_count(cfg, n_transitions)?;
            let (medium, _) = calibrate_medium(cfg, seed)?;
            let BehavioralPolicy::Pd {
                kp,
                kd,
                noise: medium_noise,
            } = medium
            else {
                unreachable!("calibration always returns a PD policy")
            };
            // The buffer sweeps the competence range in one collection run:
            // the first episode is pure noise (zero gains at random-level
            // stddev) and the last is exactly the calibrated medium policy,
            // with both the gains and the noise interpolated linearly in
            // between. Annealing noise alone is not enough on the arm task,
            // where the dynamics filter out torque noise.
            let anneal = move |i: usize| {
                let t = if n_episodes <= 1 {
                    1.0
                } else {
                    i as f64 / (n_episodes - 1) as f64
                };
                BehavioralPolicy::Pd {
                    kp: t * kp,
                    kd: t * kd,
                    noise: RANDOM_LEVEL_NOISE + t * (medium_noise - RANDOM_LEVEL_NOISE),
                }
            };
            let episodes = collect_episodes(cfg, n_episodes, seed, &anneal)?;
            let policy_desc = format!(
                "pd annealed from pure noise (stddev {RANDOM_LEVEL_NOISE}) to \
                 pd(kp={kp}, kd={kd}, noise={medium_noise})"
            );
            Dataset::from_episodes(label, policy_desc, vec![cfg.clone()], episodes)
        }
    }
}

/// Finds a detuned-gain + noise PD policy whose mean return lands near 500.
///
/// For each gain-detuning factor (in a fixed ladder) the noise stddev is
/// bisected: more noise means lower return, so the probe mean is a
/// decreasing function of noise and bisection converges. The first probe
/// inside the inner band wins. Deterministic given `seed`.
fn calibrate_medium(cfg: &EnvConfig, seed: u64) -> Result<(BehavioralPolicy, f64), DataError> {
    let (exp_kp, exp_kd) = expert_gains(cfg);
    let probe_seed = split_seed(seed, 0xCA11_B7A7E);
    let mut best: Option<(BehavioralPolicy, f64)> = None;
    let mut tried = 0_usize;

    for scale in MEDIUM_GAIN_SCALES {
        let (kp, kd) = (exp_kp * scale, exp_kd * scale);
        let probe = |noise: f64, tried: &mut usize| -> Result<f64, DataError> {
            *tried += 1;
            let policy = BehavioralPolicy::Pd { kp, kd, noise };
            probe_mean_return(cfg, &policy, PROBE_EPISODES, probe_seed)
        };
        let (mut lo, mut hi) = (MEDIUM_NOISE_LO, MEDIUM_NOISE_HI);
        let lo_val = probe(lo, &mut tried)?;
        let hi_val = probe(hi, &mut tried)?;
        track_best(&mut best, kp, kd, lo, lo_val);
        track_best(&mut best, kp, kd, hi, hi_val);
        if lo_val < MEDIUM_TARGET {
            // Even the noise-free detuned controller is below target; a
            // larger gain scale is needed, bisection cannot help here.
            continue;
        }
        for _ in 0..10 {
            let mid = 0.5 * (lo + hi);
            let val = probe(mid, &mut tried)?;
            track_best(&mut best, kp, kd, mid, val);
            if (val - MEDIUM_TARGET).abs() <= MEDIUM_PROBE_TOL {
                let policy = BehavioralPolicy::Pd { kp, kd, noise: mid };
                return Ok((policy, val));
            }
            if val > MEDIUM_TARGET {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    let achieved = best.map(|(_, v)| v).unwrap_or(f64::NAN);
    Err(DataError::CalibrationFailed {
        label: Distribution::Medium,
        task: cfg.task.to_string(),
        achieved,
        lo: MEDIUM_BAND.0,
        hi: MEDIUM_BAND.1,
        tried,
    })
}

/// Keeps the candidate whose probe mean is closest to the target band center.
fn track_best(best: &mut Option<(BehavioralPolicy, f64)>, kp: f64, kd: f64, noise: f64, val: f64) {
    let closer = match best {
        Some((_, v)) => (val - MEDIUM_TARGET).abs() < (*v - MEDIUM_TARGET).abs(),
        None => true,
    };
    if closer {
        *best = Some((BehavioralPolicy::Pd { kp, kd, noise }, val));
    }
}

/// Re-renders a fraction of a dataset's episodes behind training
/// distractors, leaving the rest byte-identical.
///
/// The chosen episodes are replayed through the simulator with their
/// recorded actions under a distraction-bearing copy of the environment
/// config: dynamics ignore the distraction, so states, actions, and rewards
/// are unchanged and only the pixels differ. `fraction_pct` = 0 therefore
/// returns a dataset whose payload is byte-identical to the input's, and 100
/// re-renders every episode. Distractor ids are drawn from the train pool
/// only; held-out test ids never appear in training data.
pub fn apply_distraction_mixture(
    base: &Dataset,
    severity: Severity,
    fraction_pct: u32,
    seed: u64,
) -> Result<Dataset, DataError> {
    if fraction_pct > 100 {
        return Err(DataError::BadRequest(format!(
            "fraction must be 0..=100 percent, got {fraction_pct}"
        )));
    }
    if base.header.envs.len() != 1 {
        return Err(DataError::ConfigMismatch(
            "distraction mixtures need a single-environment base dataset".into(),
        ));
    }
    let plain = base.header.envs[0].clone();
    if plain.distraction.is_some() {
        return Err(DataError::ConfigMismatch(
            "base dataset is already rendered with a distraction".into(),
        ));
    }
    let n_eps = base.episodes.len();
    if n_eps == 0 {
        return Err(DataError::Empty);
    }
    // Round-half-up so the benchmark fractions {0,25,50,75,100}% hit exact
    // episode counts whenever the episode count is a multiple of 4.
    let n_distract = (n_eps * fraction_pct as usize + 50) / 100;

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0xD15C_7EC7));
    let mut chosen = rand::seq::index::sample(&mut rng, n_eps, n_distract).into_vec();
    chosen.sort_unstable();
    // Ids are assigned after sorting so the (episode -> id) map depends only
    // on the seed, not on sampling order.
    let assignments: Vec<(usize, DistractorId)> = chosen
        .into_iter()
        .map(|ep| {
            (
                ep,
                DistractorId::train(rng.random_range(0..DistractorId::TRAIN_COUNT)),
            )
        })
        .collect();

    let mut envs = vec![plain.clone()];
    let mut episodes = base.episodes.clone();
    let jobs: Vec<(usize, usize)> = assignments
        .iter()
        .map(|&(ep, id)| {
            let cfg = plain.clone().with_distraction(severity, id);
            let env_idx = envs.iter().position(|e| *e == cfg).unwrap_or_else(|| {
                envs.push(cfg);
                envs.len() - 1
            });
            (ep, env_idx)
        })
        .collect();

    let rendered: Vec<(usize, usize, Vec<u8>)> = jobs
        .par_iter()
        .map(|&(ep, env_idx)| {
            let frames = replay_frames(&envs[env_idx], &base.episodes[ep])?;
            Ok((ep, env_idx, frames))
        })
        .collect::<Result<_, DataError>>()?;
    for (ep, env_idx, frames) in rendered {
        episodes[ep].env_idx = env_idx;
        episodes[ep].frames = frames;
    }

    let policy = if n_distract == 0 {
        base.header.policy.clone()
    } else {
        format!(
            "{} + {fraction_pct}% of episodes re-rendered with {severity} train distractors",
            base.header.policy
        )
    };
    Dataset::from_episodes(base.header.distribution, policy, envs, episodes)
}

/// Replays an episode's recorded actions under a different rendering config
/// and returns the new quantized frames. The underlying dynamics must be
/// identical, which is checked against the recorded rewards.
fn replay_frames(cfg: &EnvConfig, ep: &EpisodeRecord) -> Result<Vec<u8>, DataError> {
    let mut env = Env::new(cfg.clone())?;
    let frame_len = cfg.render_size * cfg.render_size * 3;
    let dim = cfg.task.action_dim();
    let mut frames = Vec::with_capacity((ep.len() + 1) * frame_len);
    let (stack, _) = env.reset(ep.seed);
    frames.extend_from_slice(&stack.last().expect("stack is never empty").quantize());
    for t in 0..ep.len() {
        let step = env.step(&ep.actions[t * dim..(t + 1) * dim])?;
        frames.extend_from_slice(&step.frames.last().expect("stack is never empty").quantize());
        if step.reward != ep.rewards[t] {
            return Err(DataError::ConfigMismatch(format!(
                "replay diverged at step {t}: reward {} vs recorded {} — the \
                 replay config changed the dynamics, not just the pixels",
                step.reward, ep.rewards[t]
            )));
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;

    fn desk_cfg(task: Task) -> EnvConfig {
        let mut cfg = EnvConfig::new(task);
        cfg.episode_len = 100;
        cfg
    }

    #[test]
    fn collect_is_deterministic_and_sized() {
        let cfg = desk_cfg(Task::Pointmass);
        let a = collect(
            &cfg,
            &BehavioralPolicy::Random,
            300,
            7,
            Distribution::Random,
        )
        .unwrap();
        let b = collect(
            &cfg,
            &BehavioralPolicy::Random,
            300,
            7,
            Distribution::Random,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes.len(), 3);
        assert_eq!(a.transition_count(), 300);
        assert_eq!(a.episodes[0].frames.len(), 101 * 32 * 32 * 3);
        assert_eq!(a.episodes[0].actions.len(), 200);
        let c = collect(
            &cfg,
            &BehavioralPolicy::Random,
            300,
            8,
            Distribution::Random,
        )
        .unwrap();
        assert_ne!(a, c, "different seeds give different data");
    }

    #[test]
    fn collect_rejects_bad_sizes() {
        let cfg = desk_cfg(Task::Pointmass);
        assert!(matches!(
            collect(&cfg, &BehavioralPolicy::Random, 0, 1, Distribution::Random),
            Err(DataError::BadRequest(_))
        ));
        assert!(matches!(
            collect(
                &cfg,
                &BehavioralPolicy::Random,
                150,
                1,
                Distribution::Random
            ),
            Err(DataError::BadRequest(_))
        ));
    }

    #[test]
    fn random_pointmass_returns_are_low() {
        // Full-length episodes: a drifting point rarely sits on the target,
        // so uniform actions should earn well under a tenth of the maximum.
        let cfg = EnvConfig::new(Task::Pointmass);
        let mean = probe_mean_return(&cfg, &BehavioralPolicy::Random, 20, 99).unwrap();
        assert!(
            mean < 100.0,
            "random policy mean {mean} should be far below target"
        );
    }

    #[test]
    fn mixture_fraction_zero_is_payload_identical() {
        let cfg = desk_cfg(Task::Pointmass);
        let base = collect(
            &cfg,
            &BehavioralPolicy::Random,
            400,
            3,
            Distribution::Random,
        )
        .unwrap();
        let out = apply_distraction_mixture(&base, Severity::High, 0, 11).unwrap();
        assert_eq!(out.episodes, base.episodes);
        assert_eq!(out.header.envs, base.header.envs);
        assert_eq!(out.header.stats, base.header.stats);
    }

    #[test]
    fn mixture_renders_fraction_and_keeps_rewards() {
        let cfg = desk_cfg(Task::Pointmass);
        let base = collect(
            &cfg,
            &BehavioralPolicy::Random,
            400,
            3,
            Distribution::Random,
        )
        .unwrap();
        let out = apply_distraction_mixture(&base, Severity::High, 50, 11).unwrap();
        let distracted: Vec<usize> = out
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.env_idx != 0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(distracted.len(), 2, "half of 4 episodes re-rendered");
        for (i, (a, b)) in base.episodes.iter().zip(&out.episodes).enumerate() {
            assert_eq!(a.rewards, b.rewards, "dynamics unchanged");
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.seed, b.seed);
            if distracted.contains(&i) {
                assert_ne!(a.frames, b.frames, "episode {i} should be re-rendered");
            } else {
                assert_eq!(a.frames, b.frames, "episode {i} should be untouched");
            }
        }
        for env in &out.header.envs[1..] {
            let d = env.distraction.expect("appended envs carry distraction");
            assert!(
                d.id.is_train(),
                "only train ids may appear in training data"
            );
            assert_eq!(d.severity, Severity::High);
        }
        assert_eq!(out.header.stats, base.header.stats, "returns unchanged");
    }

    #[test]
    fn mixture_is_deterministic() {
        let cfg = desk_cfg(Task::Pointmass);
        let base = collect(
            &cfg,
            &BehavioralPolicy::Random,
            400,
            3,
            Distribution::Random,
        )
        .unwrap();
        let a = apply_distraction_mixture(&base, Severity::Low, 75, 5).unwrap();
        let b = apply_distraction_mixture(&base, Severity::Low, 75, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tier_ordering_and_bands_on_pointmass() {
        // Full-length episodes: the return bands are defined on the
        // [0, 1000] scale of 500-step episodes.
        let cfg = EnvConfig::new(Task::Pointmass);
        let n = 10 * cfg.episode_len;
        let random = make_distribution(&cfg, Distribution::Random, n, 42).unwrap();
        let medium = make_distribution(&cfg, Distribution::Medium, n, 42).unwrap();
        let expert = make_distribution(&cfg, Distribution::Expert, n, 42).unwrap();
        let (r, m, e) = (
            random.header.stats.mean,
            medium.header.stats.mean,
            expert.header.stats.mean,
        );
        assert!(r < 100.0, "random mean {r}");
        assert!((400.0..=600.0).contains(&m), "medium mean {m}");
        assert!(e >= 850.0, "expert mean {e}");
        assert!(
            e > m && m > r,
            "tier ordering must be strict: {e} > {m} > {r}"
        );
    }

    #[test]
    fn arm_tiers_calibrate_too() {
        let cfg = EnvConfig::new(Task::Arm);
        let n = 8 * cfg.episode_len;
        let medium = make_distribution(&cfg, Distribution::Medium, n, 7).unwrap();
        let m = medium.header.stats.mean;
        assert!((400.0..=600.0).contains(&m), "arm medium mean {m}");
        let expert = make_distribution(&cfg, Distribution::Expert, n, 7).unwrap();
        assert!(
            expert.header.stats.mean >= 850.0,
            "arm expert mean {}",
            expert.header.stats.mean
        );
    }

    #[test]
    fn medexp_concatenates_the_two_tiers() {
        let cfg = EnvConfig::new(Task::Pointmass);
        let n = 10 * cfg.episode_len;
        let medexp = make_distribution(&cfg, Distribution::Medexp, n, 13).unwrap();
        assert_eq!(
            medexp.transition_count(),
            n,
            "medexp count = medium + expert counts"
        );
        assert_eq!(medexp.header.distribution, Distribution::Medexp);
        // The two halves are visible in the return distribution: the low
        // half sits near the medium band, the top half near expert returns.
        let mean = medexp.header.stats.mean;
        assert!(
            mean > 600.0 && mean < 850.0,
            "medexp mean {mean} should land between the tiers"
        );
        assert!(medexp.header.stats.p75 >= 850.0, "top half is expert data");
        assert!(
            medexp.header.stats.p25 <= 600.0,
            "bottom half is medium data"
        );
    }

    #[test]
    fn mixed_spans_random_to_medium() {
        let cfg = EnvConfig::new(Task::Pointmass);
        let random =
            make_distribution(&cfg, Distribution::Random, 10 * cfg.episode_len, 3).unwrap();
        let medium =
            make_distribution(&cfg, Distribution::Medium, 10 * cfg.episode_len, 3).unwrap();
        let mixed = make_distribution(&cfg, Distribution::Mixed, 40 * cfg.episode_len, 3).unwrap();
        assert!(
            mixed.header.stats.min <= random.header.stats.p25,
            "mixed min {} should reach random's P25 {}",
            mixed.header.stats.min,
            random.header.stats.p25
        );
        assert!(
            mixed.header.stats.max >= medium.header.stats.p75,
            "mixed max {} should reach medium's P75 {}",
            mixed.header.stats.max,
            medium.header.stats.p75
        );
        // The anneal is monotone in expectation: early episodes are noise,
        // late episodes track the calibrated controller.
        let returns = mixed.returns();
        let head: f64 = returns[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = returns[35..].iter().sum::<f64>() / 5.0;
        assert!(
            head < 200.0,
            "early mixed episodes are near-random, got {head}"
        );
        assert!(
            tail > 350.0,
            "late mixed episodes are near-medium, got {tail}"
        );
    }

    #[test]
    fn make_distribution_is_deterministic() {
        let mut cfg = EnvConfig::new(Task::Pointmass);
        cfg.episode_len = 100;
        cfg.render_size = 16;
        let a = make_distribution(&cfg, Distribution::Random, 400, 5).unwrap();
        let b = make_distribution(&cfg, Distribution::Random, 400, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_rejects_bad_requests() {
        let cfg = desk_cfg(Task::Pointmass);
        let base = collect(
            &cfg,
            &BehavioralPolicy::Random,
            100,
            3,
            Distribution::Random,
        )
        .unwrap();
        assert!(matches!(
            apply_distraction_mixture(&base, Severity::Low, 101, 5),
            Err(DataError::BadRequest(_))
        ));
        let already = apply_distraction_mixture(&base, Severity::Low, 100, 5).unwrap();
        assert!(matches!(
            apply_distraction_mixture(&already, Severity::Low, 50, 5),
            Err(DataError::ConfigMismatch(_))
        ));
    }
}
