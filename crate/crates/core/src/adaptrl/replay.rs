//! Fixed-capacity ring buffer of adaptation transitions.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Per-branch action indices.
    pub action: Vec<usize>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<Transition>,
    /// Slot the next push overwrites once full.
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            entries: Vec::new(),
            head: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        assert!(
            (0.0..=1.0).contains(&t.reward),
            "shaped reward must lie in [0, 1]"
        );
        if self.entries.len() < self.capacity {
            self.entries.push(t);
        } else {
            self.entries[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Storage-order view; after wrapping, the oldest entry is not first.
    pub fn entries(&self) -> &[Transition] {
        &self.entries
    }

    /// Indices of `batch` distinct entries, uniformly at random.
    pub fn sample_indices(&mut self, batch: usize) -> Vec<usize> {
        assert!(batch <= self.entries.len(), "batch larger than buffer");
        index::sample(&mut self.rng, self.entries.len(), batch).into_vec()
    }

    pub fn sample(&mut self, batch: usize) -> Vec<&Transition> {
        let idx = self.sample_indices(batch);
        idx.into_iter().map(|i| &self.entries[i]).collect()
    }
}
