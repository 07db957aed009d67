//! Meta-training of the adaptation policy over simulated targets, and
//! iterative greedy adaptation of parameter distributions for a new target.

pub mod checkpoint;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptrl::{
    shape_reward, BdqNet, EpsilonSchedule, Learner, LearnerConfig, ReplayBuffer, Transition,
    STATE_DIM,
};
use crate::numerics::Matrix;
use crate::pendulum::{
    observe, EnvParams, ObsMode, RewardModel, Target, TaskConfig, TrajObservation,
};
use crate::simdist::{AdaptAction, ParamSpace, SimParamDist};
use crate::taskpolicy::{synthesize, LqrTrainer, PolicyCache, ReuseConfig, TaskPolicy};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner adaptation steps consumed by meta-training.
    pub total_steps: usize,
    /// Adaptation iterations per meta-training episode.
    pub horizon: usize,
    /// Step size as a fraction of each parameter range.
    pub delta: f64,
    pub gamma: f64,
    pub sparse_threshold: f64,
    /// Independent chains in target adaptation.
    pub n_chains: usize,
    /// Iterations per chain in target adaptation.
    pub adapt_horizon: usize,
    pub obs_mode: ObsMode,
    /// Multiplies observation entries before they enter the network.
    pub obs_scale: f64,
    pub space: ParamSpace,
    pub learner: LearnerConfig,
    pub reuse: ReuseConfig,
    pub task: TaskConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            total_steps: 10_000,
            horizon: 10,
            delta: 0.10,
            gamma: 0.9,
            sparse_threshold: 0.95,
            n_chains: 2,
            adapt_horizon: 10,
            obs_mode: ObsMode::Full,
            obs_scale: 10.0,
            space: ParamSpace::pendulum(),
            learner: LearnerConfig::default(),
            reuse: ReuseConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 || self.total_steps < self.horizon {
            return Err(format!(
                "total_steps ({}) must be at least horizon ({}) and horizon positive",
                self.total_steps, self.horizon
            ));
        }
        if !(self.delta > 0.0 && self.delta <= 0.5) {
            return Err(format!("delta {} outside (0, 0.5]", self.delta));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.sparse_threshold) {
            return Err(format!(
                "sparse_threshold {} outside [0, 1]",
                self.sparse_threshold
            ));
        }
        if self.n_chains == 0 {
            return Err("n_chains must be positive".into());
        }
        if self.space.dims() != 4 {
            return Err("the pendulum space has four dimensions".into());
        }
        self.space.validate().map_err(|e| e.to_string())
    }

    pub fn episodes(&self) -> usize {
        self.total_steps / self.horizon
    }
}

/// Network input: normalized distribution mean followed by the observation.
pub fn adapt_state(
    space: &ParamSpace,
    dist: &SimParamDist,
    obs: &TrajObservation,
    obs_scale: f64,
) -> Vec<f64> {
    let mut s = dist.normalized_mean(space);
    s.extend(obs.values.iter().map(|v| v * obs_scale));
    debug_assert_eq!(s.len(), STATE_DIM);
    s
}

/// A distribution encountered during meta-training and the policy used for it.
#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub dist: SimParamDist,
    pub policy: TaskPolicy,
}

/// Append-only record of meta-training distributions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistLibrary {
    entries: Vec<LibraryEntry>,
}

impl DistLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, dist: SimParamDist, policy: TaskPolicy) {
        self.entries.push(LibraryEntry { dist, policy });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }
}

/// One iteration of an adaptation chain.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptRecord {
    pub chain: usize,
    pub iteration: usize,
    pub mean: Vec<f64>,
    /// Step taken after this iteration; `None` on the last one.
    pub action: Option<AdaptAction>,
    pub raw_reward: f64,
    pub shaped_reward: f64,
    pub observation: TrajObservation,
}

/// Summary of one meta-training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub target: EnvParams,
    pub epsilon: f64,
    /// Raw rewards of iterations `0..=I`.
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub checkpoint: Checkpoint,
    pub episodes: Vec<EpisodeLog>,
    /// Every transition collected, oldest first unless the buffer wrapped.
    pub replay: ReplayBuffer,
}

/// Evaluates `policy` in `target`: raw reward and the observation of its
/// single observed trajectory.
fn evaluate(
    model: &RewardModel,
    target: &Target,
    gain: &Matrix,
    mode: ObsMode,
) -> (f64, TrajObservation) {
    let e = model.evaluate(target, gain);
    (e.reward.clamp(0.0, 1.0), observe(&e.trajectory, mode))
}

fn uniform_point(space: &ParamSpace, rng: &mut impl Rng) -> Vec<f64> {
    (0..space.dims())
        .map(|d| rng.random_range(space.lo[d]..=space.hi[d]))
        .collect()
}

/// Reward model with the calibration used throughout the crate.
pub fn calibrated_model(task: &TaskConfig) -> RewardModel {
    RewardModel::calibrate(task.clone())
}

/// Meta-trains an adaptation policy against targets drawn uniformly from the
/// parameter box.
pub fn meta_train(cfg: &MetaConfig, seed: u64) -> MetaOutcome {
    let model = calibrated_model(&cfg.task);
    meta_train_with(cfg, &model, seed, |_| {})
}

/// As [`meta_train`] with a given reward model, calling `progress` after
/// every episode.
pub fn meta_train_with(
    cfg: &MetaConfig,
    model: &RewardModel,
    seed: u64,
    mut progress: impl FnMut(&EpisodeLog),
) -> MetaOutcome {
    cfg.validate().expect("invalid meta-training config");
    let space = &cfg.space;
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut explore_rng = ChaCha8Rng::seed_from_u64(seed);
    explore_rng.set_stream(1);
    let mut learner = Learner::new(
        cfg.learner.clone(),
        space.dims(),
        seed.wrapping_add(0x9E37_79B9),
    );
    let mut cache = PolicyCache::new(cfg.reuse);
    let mut trainer = LqrTrainer {
        rollout: cfg.task.rollout.clone(),
    };
    let mut library = DistLibrary::new();
    let episodes = cfg.episodes();
    let schedule = EpsilonSchedule::new(episodes, cfg.learner.anneal_fraction);
    let mut logs = Vec::with_capacity(episodes);

    for episode in 0..episodes {
        let eps = schedule.value(episode);
        let target = model.target(EnvParams::from_slice(&uniform_point(space, &mut env_rng)));
        let mut dist = SimParamDist::dirac(space, uniform_point(space, &mut env_rng))
            .expect("point lies in the box");
        let mut rewards = Vec::with_capacity(cfg.horizon + 1);
        let mut pending: Option<(Vec<f64>, AdaptAction)> = None;

        for i in 0..=cfg.horizon {
            let (id, _) = cache.get_or_train(space, &dist, &mut trainer);
            let policy = cache.policy(id).clone();
            let (raw, obs) = evaluate(model, &target, &policy.gain, cfg.obs_mode);
            rewards.push(raw);
            library.push(dist.clone(), policy);
            let state = adapt_state(space, &dist, &obs, cfg.obs_scale);

            if let Some((prev_state, action)) = pending.take() {
                learner.buffer.push(Transition {
                    state: prev_state,
                    action: action.indices(),
                    reward: shape_reward(raw, cfg.sparse_threshold),
                    next_state: state.clone(),
                    terminal: i == cfg.horizon,
                });
                if learner.ready() {
                    for _ in 0..cfg.learner.updates_per_step {
                        learner.train_step(cfg.gamma);
                    }
                }
            }
            if i < cfg.horizon {
                let action = learner.online.epsilon_greedy(&state, eps, &mut explore_rng);
                dist = dist.apply_action(space, &action, cfg.delta);
                pending = Some((state, action));
            }
        }
        let log = EpisodeLog {
            target: target.params,
            epsilon: eps,
            rewards,
        };
        progress(&log);
        logs.push(log);
    }

    MetaOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            reward_map: model.map,
            seed,
            online: learner.online,
            target: learner.target,
            library,
        },
        episodes: logs,
        replay: learner.buffer,
    }
}

/// Adaptation result for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub best: TaskPolicy,
    pub best_reward: f64,
    pub trace: Vec<AdaptRecord>,
}

impl AdaptOutcome {
    /// Best reward seen at or before each iteration, over all chains.
    pub fn best_by_iteration(&self) -> Vec<f64> {
        let last = self.trace.iter().map(|r| r.iteration).max().unwrap_or(0);
        let mut out = vec![0.0_f64; last + 1];
        for r in &self.trace {
            out[r.iteration] = out[r.iteration].max(r.raw_reward);
        }
        for k in 1..out.len() {
            out[k] = out[k].max(out[k - 1]);
        }
        out
    }
}

/// Settings for target adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSettings<'a> {
    pub space: &'a ParamSpace,
    pub delta: f64,
    pub sparse_threshold: f64,
    pub obs_mode: ObsMode,
    pub obs_scale: f64,
    pub n_chains: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl<'a> AdaptSettings<'a> {
    pub fn from_config(cfg: &'a MetaConfig, seed: u64) -> Self {
        AdaptSettings {
            space: &cfg.space,
            delta: cfg.delta,
            sparse_threshold: cfg.sparse_threshold,
            obs_mode: cfg.obs_mode,
            obs_scale: cfg.obs_scale,
            n_chains: cfg.n_chains,
            horizon: cfg.adapt_horizon,
            seed,
        }
    }
}

/// Greedy iterative adaptation from `n_chains` library roots. Returns the
/// policy with the highest target reward seen across all chains and iterations.
pub fn adapt(
    model: &RewardModel,
    target: EnvParams,
    net: &BdqNet,
    library: &DistLibrary,
    settings: &AdaptSettings,
) -> AdaptOutcome {
    assert!(!library.is_empty(), "adaptation needs a nonempty library");
    assert!(settings.n_chains > 0);
    let target = model.target(target);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let roots: Vec<usize> = if settings.n_chains <= library.len() {
        index::sample(&mut rng, library.len(), settings.n_chains).into_vec()
    } else {
        (0..settings.n_chains)
            .map(|_| rng.random_range(0..library.len()))
            .collect()
    };

    let mut trace = Vec::new();
    let mut best: Option<(f64, TaskPolicy)> = None;
    for (chain, root) in roots.into_iter().enumerate() {
        let entry = &library.entries()[root];
        let mut dist = entry.dist.clone();
        let mut policy = entry.policy.clone();
        for i in 0..=settings.horizon {
            if i > 0 {
                policy = synthesize(&dist, &model.config.rollout);
            }
            let (raw, obs) = evaluate(model, &target, &policy.gain, settings.obs_mode);
            let action = if i < settings.horizon {
                Some(net.greedy_action(&adapt_state(
                    settings.space,
                    &dist,
                    &obs,
                    settings.obs_scale,
                )))
            } else {
                None
            };
            trace.push(AdaptRecord {
                chain,
                iteration: i,
                mean: dist.mean().to_vec(),
                action: action.clone(),
                raw_reward: raw,
                shaped_reward: shape_reward(raw, settings.sparse_threshold),
                observation: obs,
            });
            if best.as_ref().is_none_or(|(r, _)| raw > *r) {
                best = Some((raw, policy.clone()));
            }
            if let Some(a) = action {
                dist = dist.apply_action(settings.space, &a, settings.delta);
            }
        }
    }
    let (best_reward, best) = best.expect("at least one evaluation");
    AdaptOutcome {
        best,
        best_reward,
        trace,
    }
}

/// Rebuilds the reward model stored in a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> RewardModel {
    RewardModel::new(ck.config.task.clone(), ck.reward_map)
}
