//! The adaptation policy: a branching dueling Q-network over per-dimension
//! steps, trained with Double Q-learning from a replay buffer.

pub mod bdq;
pub mod mlp;
pub mod replay;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bdq::{argmax, greedy_from_q, BdqNet, BranchQ, BRANCH_ACTIONS};
pub use mlp::{Dense, Mlp, Momentum};
pub use replay::{ReplayBuffer, Transition};

use crate::pendulum::OBS_DIM;

/// Normalized distribution mean followed by the trajectory observation.
pub const STATE_DIM: usize = 4 + OBS_DIM;

/// `raw` if it clears `threshold` (inclusive), else 0.
pub fn shape_reward(raw: f64, threshold: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&raw),
        "raw reward must lie in [0, 1], got {raw}"
    );
    if raw >= threshold {
        raw
    } else {
        0.0
    }
}

/// Linear decay from 1 to 0 over the first `anneal_fraction` of `total`
/// episodes, then 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub total: usize,
    pub anneal_fraction: f64,
}

impl EpsilonSchedule {
    pub fn new(total: usize, anneal_fraction: f64) -> Self {
        assert!(
            anneal_fraction > 0.0 && anneal_fraction <= 1.0,
            "anneal fraction must lie in (0, 1]"
        );
        EpsilonSchedule {
            total,
            anneal_fraction,
        }
    }

    pub fn value(&self, episode: usize) -> f64 {
        let span = self.anneal_fraction * self.total as f64;
        if span <= 0.0 {
            return 0.0;
        }
        (1.0 - episode as f64 / span).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Hard target copy every this many gradient steps.
    pub target_sync: usize,
    pub anneal_fraction: f64,
    /// Gradient steps per environment step once the buffer holds a batch.
    pub updates_per_step: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            hidden: vec![128, 128],
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            buffer_capacity: 100_000,
            target_sync: 500,
            anneal_fraction: 0.7,
            updates_per_step: 4,
        }
    }
}

/// Mean squared per-branch Double-Q error over `batch` and its gradient
/// with respect to the online parameters.
pub fn td_loss_and_grad(
    online: &BdqNet,
    target: &BdqNet,
    batch: &[&Transition],
    gamma: f64,
) -> (f64, BdqNet) {
    let n = batch.len();
    assert!(n > 0);
    let dim = online.input_dim();
    let branches = online.branches();
    let states: Vec<f64> = batch.iter().flat_map(|t| t.state.iter().copied()).collect();
    let next: Vec<f64> = batch
        .iter()
        .flat_map(|t| t.next_state.iter().copied())
        .collect();
    assert_eq!(states.len(), n * dim, "transition state size mismatch");

    let cache = online.forward_cached(&states, n);
    let next_online = online.forward_cached(&next, n).q;
    let next_target = target.forward_cached(&next, n).q;
    let scale = 1.0 / (n * branches) as f64;
    let mut loss = 0.0;
    let mut d_q: Vec<BranchQ> = vec![vec![[0.0; BRANCH_ACTIONS]; branches]; n];
    for (b, t) in batch.iter().enumerate() {
        assert_eq!(t.action.len(), branches, "action branch count mismatch");
        for d in 0..branches {
            let y = if t.terminal {
                t.reward
            } else {
                let a_star = argmax(&next_online[b][d]);
                t.reward + gamma * next_target[b][d][a_star]
            };
            let err = cache.q[b][d][t.action[d]] - y;
            loss += err * err * scale;
            d_q[b][d][t.action[d]] = 2.0 * err * scale;
        }
    }
    let mut grad = online.zeros_like();
    online.backward(&cache, &d_q, &mut grad);
    (loss, grad)
}

/// Online and target networks, optimizer state and replay.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: LearnerConfig,
    pub online: BdqNet,
    pub target: BdqNet,
    pub buffer: ReplayBuffer,
    optimizer: Momentum,
    since_sync: usize,
    updates: u64,
}

impl Learner {
    pub fn new(config: LearnerConfig, branches: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = BdqNet::new(STATE_DIM, &config.hidden, branches, &mut rng);
        Learner::from_net(config, online, seed)
    }

    pub fn from_net(config: LearnerConfig, online: BdqNet, seed: u64) -> Self {
        assert!(config.batch_size > 0 && config.target_sync > 0);
        let optimizer = Momentum::new(config.lr, config.momentum, online.param_count());
        Learner {
            buffer: ReplayBuffer::new(config.buffer_capacity, seed ^ 0x5EED),
            target: online.clone(),
            online,
            optimizer,
            since_sync: 0,
            updates: 0,
            config,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Gradient steps taken since the last target copy.
    pub fn since_sync(&self) -> usize {
        self.since_sync
    }

    pub fn ready(&self) -> bool {
        self.buffer.len() >= self.config.batch_size
    }

    /// One sampled minibatch gradient step followed by the periodic target
    /// copy. Returns the pre-step loss.
    pub fn train_step(&mut self, gamma: f64) -> f64 {
        let batch = self.buffer.sample(self.config.batch_size);
        let (loss, grad) = td_loss_and_grad(&self.online, &self.target, &batch, gamma);
        self.optimizer.step(self.online.params_mut(), grad.params());
        self.updates += 1;
        self.since_sync += 1;
        if self.since_sync >= self.config.target_sync {
            self.sync_target();
        }
        loss
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
        self.since_sync = 0;
    }
}
