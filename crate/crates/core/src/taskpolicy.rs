//! Task policies: exact LQR synthesis for a parameter distribution, the
//! uniform-randomization baseline, and a reuse cache that shares policies
//! between nearby distributions while keeping training-budget accounting.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::pendulum::{matched_lqr, RolloutConfig};
use crate::simdist::{dist_distance, ParamSpace, SimParamDist};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPolicy {
    /// `u = −gain · x`, 2×4.
    pub gain: Matrix,
    pub synthesized_for: SimParamDist,
    /// Trajectory budget spent training this policy.
    pub budget_used: u64,
    /// Number of additional distributions this policy was reused for.
    pub reuse_count: u32,
    /// Synthesis failed; the gain is zero.
    pub failed: bool,
}

/// LQR at the distribution mean. Failure yields a zero gain flagged `failed`.
pub fn synthesize(d: &SimParamDist, cfg: &RolloutConfig) -> TaskPolicy {
    let (gain, failed) = match matched_lqr(&d.mean_params(), cfg) {
        Ok(k) => (k, false),
        Err(_) => (Matrix::zeros(2, 4), true),
    };
    TaskPolicy {
        gain,
        synthesized_for: d.clone(),
        budget_used: 0,
        reuse_count: 0,
        failed,
    }
}

/// Single policy for the whole box: LQR at its centroid.
pub fn udr_policy(space: &ParamSpace, cfg: &RolloutConfig) -> TaskPolicy {
    let d = SimParamDist::dirac(space, space.centroid()).expect("centroid lies in the box");
    synthesize(&d, cfg)
}

/// Something that can train a policy for a distribution from scratch or
/// continue training an existing one.
pub trait PolicyTrainer {
    fn train(&mut self, d: &SimParamDist, budget: u64) -> TaskPolicy;
    fn fine_tune(&mut self, policy: &TaskPolicy, d: &SimParamDist, budget: u64) -> TaskPolicy;
}

/// Exact LQR; budgets are bookkeeping only and fine-tuning re-synthesizes
/// at the new distribution.
#[derive(Debug, Clone)]
pub struct LqrTrainer {
    pub rollout: RolloutConfig,
}

impl PolicyTrainer for LqrTrainer {
    fn train(&mut self, d: &SimParamDist, _budget: u64) -> TaskPolicy {
        synthesize(d, &self.rollout)
    }

    fn fine_tune(&mut self, policy: &TaskPolicy, d: &SimParamDist, _budget: u64) -> TaskPolicy {
        let fresh = synthesize(d, &self.rollout);
        TaskPolicy {
            budget_used: policy.budget_used,
            reuse_count: policy.reuse_count,
            ..fresh
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReuseConfig {
    /// Reuse threshold on normalized-mean distance; 0 disables reuse.
    pub reuse_threshold: f64,
    pub max_budget: u64,
    pub init_budget: u64,
    pub min_budget: u64,
    pub budget_discount: f64,
}

impl Default for ReuseConfig {
    fn default() -> Self {
        ReuseConfig {
            reuse_threshold: 0.16,
            max_budget: 30_000,
            init_budget: 10_000,
            min_budget: 1_000,
            budget_discount: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CacheEntry {
    dist: SimParamDist,
    policy: usize,
    reused: bool,
}

/// Where a cached lookup's policy came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Fresh,
    Reused { top_up: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCache {
    config: ReuseConfig,
    policies: Vec<TaskPolicy>,
    entries: Vec<CacheEntry>,
    total_budget: u64,
}

impl PolicyCache {
    pub fn new(config: ReuseConfig) -> Self {
        assert!(
            config.reuse_threshold >= 0.0,
            "reuse threshold must be nonnegative"
        );
        assert!(
            config.budget_discount > 0.0 && config.budget_discount < 1.0,
            "budget discount must lie in (0, 1)"
        );
        PolicyCache {
            config,
            policies: Vec::new(),
            entries: Vec::new(),
            total_budget: 0,
        }
    }

    pub fn config(&self) -> &ReuseConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of distinct policies ever trained from scratch.
    pub fn policy_count(&self) -> usize {
        self.policies.len()
    }

    /// Training budget spent across all policies.
    pub fn total_budget(&self) -> u64 {
        self.total_budget
    }

    pub fn policy(&self, id: usize) -> &TaskPolicy {
        &self.policies[id]
    }

    /// Returns the policy id for `d`, reusing a nearby non-reused entry's policy
    /// when one lies within the threshold, otherwise training a fresh one.
    pub fn get_or_train(
        &mut self,
        space: &ParamSpace,
        d: &SimParamDist,
        trainer: &mut impl PolicyTrainer,
    ) -> (usize, CacheOutcome) {
        let cfg = self.config;
        let nearest = self
            .entries
            .iter()
            .filter(|e| !e.reused)
            .map(|e| (e.policy, dist_distance(space, &e.dist, d)))
            .filter(|(_, dist)| *dist <= cfg.reuse_threshold && cfg.reuse_threshold > 0.0)
            // strict comparison keeps the earliest entry on ties
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            });

        if let Some((id, _)) = nearest {
            let current = &self.policies[id];
            let j = current.reuse_count + 1;
            let top_up = if current.budget_used >= cfg.max_budget {
                0
            } else {
                let scaled = cfg.budget_discount.powi(j as i32 - 1) * cfg.init_budget as f64;
                cfg.min_budget.max(scaled.round() as u64)
            };
            let mut next = if top_up > 0 {
                trainer.fine_tune(current, d, top_up)
            } else {
                current.clone()
            };
            next.reuse_count = j;
            next.budget_used = current.budget_used + top_up;
            self.total_budget += top_up;
            self.policies[id] = next;
            self.entries.push(CacheEntry {
                dist: d.clone(),
                policy: id,
                reused: true,
            });
            (id, CacheOutcome::Reused { top_up })
        } else {
            let mut policy = trainer.train(d, cfg.init_budget);
            policy.budget_used = cfg.init_budget;
            policy.reuse_count = 0;
            self.total_budget += cfg.init_budget;
            let id = self.policies.len();
            self.policies.push(policy);
            self.entries.push(CacheEntry {
                dist: d.clone(),
                policy: id,
                reused: false,
            });
            (id, CacheOutcome::Fresh)
        }
    }
}
