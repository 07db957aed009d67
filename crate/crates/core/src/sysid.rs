//! System-identification baselines over a parameter lattice: a grid
//! posterior updated from trajectory discrepancies, and a point estimate
//! that picks the closest-matching grid point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::pendulum::{observe, rollout, EnvParams, ObsMode, RewardModel, TrajObservation};
use crate::simdist::{ParamSpace, SimParamDist};
use crate::taskpolicy::{synthesize, TaskPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SysIdConfig {
    /// Lattice points per dimension.
    pub resolution: usize,
    /// Likelihood width in observation units.
    pub sigma: f64,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        SysIdConfig {
            resolution: 9,
            sigma: 0.1,
        }
    }
}

/// Log-weights over a fixed lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    pub grid: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
}

impl GridPosterior {
    pub fn uniform(space: &ParamSpace, resolution: usize) -> Self {
        let grid = space.grid(resolution);
        let n = grid.len() as f64;
        GridPosterior {
            log_weights: vec![-n.ln(); grid.len()],
            grid,
        }
    }

    /// Adds `−‖obs_k − target‖² / 2σ²` to every log-weight and renormalizes.
    pub fn update(&mut self, grid_obs: &[TrajObservation], target: &TrajObservation, sigma: f64) {
        assert_eq!(
            grid_obs.len(),
            self.grid.len(),
            "one observation per grid point"
        );
        assert!(sigma > 0.0);
        let scale = 1.0 / (2.0 * sigma * sigma);
        for (w, o) in self.log_weights.iter_mut().zip(grid_obs) {
            *w -= discrepancy(o, target) * scale;
        }
        self.normalize();
    }

    /// Shifts log-weights so the weights sum to one; never produces NaN.
    pub fn normalize(&mut self) {
        let max = self
            .log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            let n = self.grid.len() as f64;
            self.log_weights.iter_mut().for_each(|w| *w = -n.ln());
            return;
        }
        let lse = max
            + self
                .log_weights
                .iter()
                .map(|w| (w - max).exp())
                .sum::<f64>()
                .ln();
        self.log_weights.iter_mut().for_each(|w| *w -= lse);
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let dims = self.grid[0].len();
        let mut m = vec![0.0; dims];
        for (p, w) in self.grid.iter().zip(self.weights()) {
            for d in 0..dims {
                m[d] += w * p[d];
            }
        }
        m
    }

    /// Highest-weight grid index; ties go to the lowest index.
    pub fn mode_index(&self) -> usize {
        argmin_by(&self.log_weights, |w| -w)
    }
}

/// Squared Euclidean distance between observations.
pub fn discrepancy(a: &TrajObservation, b: &TrajObservation) -> f64 {
    a.sq_distance(b)
}

fn argmin_by(values: &[f64], key: impl Fn(f64) -> f64) -> usize {
    let mut best = 0;
    for k in 1..values.len() {
        if key(values[k]) < key(values[best]) {
            best = k;
        }
    }
    best
}

/// Observations of `gain` rolled out from `x0` at every grid point.
pub fn grid_observations(
    grid: &[Vec<f64>],
    gain: &Matrix,
    model: &RewardModel,
    mode: ObsMode,
) -> Vec<TrajObservation> {
    grid.par_iter()
        .map(|p| {
            observe(
                &model.observation_rollout(&EnvParams::from_slice(p), gain),
                mode,
            )
        })
        .collect()
}

/// Index of the grid point whose observation is closest to `target`; ties go
/// to the lowest lexicographic index.
pub fn point_estimate(grid_obs: &[TrajObservation], target: &TrajObservation) -> usize {
    let d: Vec<f64> = grid_obs.iter().map(|o| discrepancy(o, target)).collect();
    argmin_by(&d, |v| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SysIdKind {
    Bayes,
    Point,
}

/// One iteration of a baseline run: the policy in use, its target reward and
/// the parameters it was synthesized for.
#[derive(Debug, Clone, PartialEq)]
pub struct SysIdRecord {
    pub iteration: usize,
    pub estimate: Vec<f64>,
    pub raw_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysIdOutcome {
    pub best: TaskPolicy,
    pub best_reward: f64,
    pub trace: Vec<SysIdRecord>,
    /// Target trajectories consumed.
    pub target_rollouts: usize,
}

/// Runs `iterations` rounds of observe-then-reidentify from the box centre.
/// Iteration 0 scores the prior policy; iteration `k` scores the policy after
/// `k` target observations.
pub fn sysid_adapt(
    kind: SysIdKind,
    model: &RewardModel,
    space: &ParamSpace,
    target: EnvParams,
    iterations: usize,
    mode: ObsMode,
    cfg: &SysIdConfig,
) -> SysIdOutcome {
    let scored = model.target(target);
    let mut posterior = GridPosterior::uniform(space, cfg.resolution);
    let mut estimate = space.centroid();
    let mut policy = synthesize(
        &SimParamDist::dirac(space, estimate.clone()).unwrap(),
        &model.config.rollout,
    );
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut best: Option<(f64, TaskPolicy)> = None;
    let mut target_rollouts = 0;

    for i in 0..=iterations {
        let raw = model.reward(&scored, &policy.gain).clamp(0.0, 1.0);
        trace.push(SysIdRecord {
            iteration: i,
            estimate: estimate.clone(),
            raw_reward: raw,
        });
        if best.as_ref().is_none_or(|(r, _)| raw > *r) {
            best = Some((raw, policy.clone()));
        }
        if i == iterations {
            break;
        }
        let observed = observe(&model.observation_rollout(&target, &policy.gain), mode);
        target_rollouts += 1;
        let sims = grid_observations(&posterior.grid, &policy.gain, model, mode);
        estimate = match kind {
            SysIdKind::Bayes => {
                posterior.update(&sims, &observed, cfg.sigma);
                space.clamp(&posterior.mean())
            }
            SysIdKind::Point => posterior.grid[point_estimate(&sims, &observed)].clone(),
        };
        policy = synthesize(
            &SimParamDist::dirac(space, estimate.clone()).unwrap(),
            &model.config.rollout,
        );
    }
    let (best_reward, best) = best.unwrap();
    SysIdOutcome {
        best,
        best_reward,
        trace,
        target_rollouts,
    }
}

pub fn sysid_bayes_adapt(
    model: &RewardModel,
    space: &ParamSpace,
    target: EnvParams,
    iterations: usize,
    mode: ObsMode,
    cfg: &SysIdConfig,
) -> SysIdOutcome {
    sysid_adapt(
        SysIdKind::Bayes,
        model,
        space,
        target,
        iterations,
        mode,
        cfg,
    )
}

pub fn sysid_point_adapt(
    model: &RewardModel,
    space: &ParamSpace,
    target: EnvParams,
    iterations: usize,
    mode: ObsMode,
    cfg: &SysIdConfig,
) -> SysIdOutcome {
    sysid_adapt(
        SysIdKind::Point,
        model,
        space,
        target,
        iterations,
        mode,
        cfg,
    )
}

/// Rollout of `gain` in `params` from `x0`, observed in `mode`.
pub fn observe_policy(
    params: &EnvParams,
    gain: &Matrix,
    x0: &[f64; 4],
    model: &RewardModel,
    mode: ObsMode,
) -> TrajObservation {
    observe(&rollout(params, gain, x0, &model.config.rollout), mode)
}
