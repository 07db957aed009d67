//! Branching dueling Q-network: a shared trunk, one state-value head and one
//! advantage head per parameter dimension.

use rand::Rng;

use super::mlp::{Mlp, MlpCache};
use crate::simdist::{AdaptAction, Step};

/// Actions per branch, ordered `+δ, 0, −δ`.
pub const BRANCH_ACTIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BdqNet {
    pub trunk: Mlp,
    pub value_head: Mlp,
    pub branch_heads: Vec<Mlp>,
}

/// Per-branch Q values, `q[d][a]`.
pub type BranchQ = Vec<[f64; BRANCH_ACTIONS]>;

/// Cached activations of one batched forward pass.
#[derive(Debug, Clone)]
pub struct BdqCache {
    trunk: MlpCache,
    value: MlpCache,
    branches: Vec<MlpCache>,
    /// `q[b][d][a]`
    pub q: Vec<BranchQ>,
}

impl BdqNet {
    /// `hidden` are the trunk widths after the input; the trunk output is
    /// rectified and feeds every head.
    pub fn new(input: usize, hidden: &[usize], branches: usize, rng: &mut impl Rng) -> Self {
        assert!(!hidden.is_empty(), "trunk needs at least one hidden layer");
        assert!(branches > 0);
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        let trunk = Mlp::new(&widths, true, rng);
        let feat = *hidden.last().unwrap();
        let value_head = Mlp::new(&[feat, 1], false, rng);
        let branch_heads = (0..branches)
            .map(|_| Mlp::new(&[feat, BRANCH_ACTIONS], false, rng))
            .collect();
        BdqNet {
            trunk,
            value_head,
            branch_heads,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn branches(&self) -> usize {
        self.branch_heads.len()
    }

    pub fn param_count(&self) -> usize {
        self.nets().map(Mlp::param_count).sum()
    }

    fn nets(&self) -> impl Iterator<Item = &Mlp> {
        std::iter::once(&self.trunk)
            .chain(std::iter::once(&self.value_head))
            .chain(self.branch_heads.iter())
    }

    fn nets_mut(&mut self) -> impl Iterator<Item = &mut Mlp> {
        std::iter::once(&mut self.trunk)
            .chain(std::iter::once(&mut self.value_head))
            .chain(self.branch_heads.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.nets().flat_map(Mlp::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.nets_mut().flat_map(Mlp::params_mut)
    }

    pub fn zeros_like(&self) -> BdqNet {
        BdqNet {
            trunk: self.trunk.zeros_like(),
            value_head: self.value_head.zeros_like(),
            branch_heads: self.branch_heads.iter().map(Mlp::zeros_like).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    /// Zeroes the final layer of the value and advantage heads.
    pub fn zero_heads(&mut self) {
        for head in std::iter::once(&mut self.value_head).chain(self.branch_heads.iter_mut()) {
            let last = head.layers.last_mut().unwrap();
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// State value `V(s)` for one state.
    pub fn value(&self, state: &[f64]) -> f64 {
        let feat = self.trunk.forward(state, 1);
        self.value_head.forward(&feat, 1)[0]
    }

    pub fn forward(&self, state: &[f64]) -> BranchQ {
        self.forward_cached(state, 1).q.pop().unwrap()
    }

    /// `Q_d(s, a) = V(s) + A_d(s, a) − mean_a' A_d(s, a')`, batched.
    pub fn forward_cached(&self, states: &[f64], batch: usize) -> BdqCache {
        assert!(states.iter().all(|v| v.is_finite()), "state must be finite");
        let trunk = self.trunk.forward_cached(states, batch);
        let value = self.value_head.forward_cached(trunk.output(), batch);
        let branches: Vec<MlpCache> = self
            .branch_heads
            .iter()
            .map(|h| h.forward_cached(trunk.output(), batch))
            .collect();
        let q = (0..batch)
            .map(|b| {
                let v = value.output()[b];
                branches
                    .iter()
                    .map(|c| {
                        let adv = &c.output()[b * BRANCH_ACTIONS..(b + 1) * BRANCH_ACTIONS];
                        let m = adv.iter().sum::<f64>() / BRANCH_ACTIONS as f64;
                        std::array::from_fn(|a| v + adv[a] - m)
                    })
                    .collect()
            })
            .collect();
        BdqCache {
            trunk,
            value,
            branches,
            q,
        }
    }

    /// Backpropagates `∂L/∂Q[b][d][a]` and accumulates into `grad`.
    pub fn backward(&self, cache: &BdqCache, d_q: &[BranchQ], grad: &mut BdqNet) {
        let batch = cache.trunk.batch;
        let n = BRANCH_ACTIONS as f64;
        let mut d_value = vec![0.0; batch];
        let mut d_feat = vec![0.0; cache.trunk.output().len()];
        for (d, head) in self.branch_heads.iter().enumerate() {
            let mut d_adv = vec![0.0; batch * BRANCH_ACTIONS];
            for b in 0..batch {
                let g = &d_q[b][d];
                let total: f64 = g.iter().sum();
                d_value[b] += total;
                for a in 0..BRANCH_ACTIONS {
                    d_adv[b * BRANCH_ACTIONS + a] = g[a] - total / n;
                }
            }
            let df = head.backward(&cache.branches[d], &d_adv, &mut grad.branch_heads[d]);
            d_feat.iter_mut().zip(df).for_each(|(x, y)| *x += y);
        }
        let df = self
            .value_head
            .backward(&cache.value, &d_value, &mut grad.value_head);
        d_feat.iter_mut().zip(df).for_each(|(x, y)| *x += y);
        self.trunk.backward(&cache.trunk, &d_feat, &mut grad.trunk);
    }

    pub fn greedy_action(&self, state: &[f64]) -> AdaptAction {
        greedy_from_q(&self.forward(state))
    }

    /// With probability `eps` a uniformly random action on every branch,
    /// otherwise the greedy one.
    pub fn epsilon_greedy(&self, state: &[f64], eps: f64, rng: &mut impl Rng) -> AdaptAction {
        assert!((0.0..=1.0).contains(&eps), "epsilon must lie in [0, 1]");
        if eps > 0.0 && rng.random::<f64>() < eps {
            let idx: Vec<usize> = (0..self.branches())
                .map(|_| rng.random_range(0..BRANCH_ACTIONS))
                .collect();
            AdaptAction::from_indices(&idx)
        } else {
            self.greedy_action(state)
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(q: &[f64; BRANCH_ACTIONS]) -> usize {
    let mut best = 0;
    for a in 1..BRANCH_ACTIONS {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

/// Per-branch argmax, ties broken in the order `+δ, 0, −δ`.
pub fn greedy_from_q(q: &BranchQ) -> AdaptAction {
    AdaptAction::new(q.iter().map(|b| Step::from_index(argmax(b))).collect())
}
