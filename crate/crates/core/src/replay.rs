//! Proportional prioritized experience replay.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("index {0} is not a stored experience")]
    BadIndex(usize),
    #[error("priority must be positive and finite, got {0}")]
    BadPriority(f64),
    #[error("capacity must be positive")]
    ZeroCapacity,
}

/// Binary tree whose internal nodes hold an associative reduction of their
/// children. Every update recomputes the path to the root from scratch, so
/// rounding errors never accumulate.
#[derive(Debug, Clone)]
struct Tree {
    leaves: usize,
    nodes: Vec<f64>,
    empty: f64,
    op: fn(f64, f64) -> f64,
}

impl Tree {
    fn new(capacity: usize, empty: f64, op: fn(f64, f64) -> f64) -> Self {
        let leaves = capacity.next_power_of_two();
        Self {
            leaves,
            nodes: vec![empty; 2 * leaves],
            empty,
            op,
        }
    }

    fn set(&mut self, i: usize, value: f64) {
        let mut n = i + self.leaves;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = (self.op)(self.nodes[2 * n], self.nodes[2 * n + 1]);
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[i + self.leaves]
    }

    fn root(&self) -> f64 {
        if self.leaves == 0 {
            self.empty
        } else {
            self.nodes[1]
        }
    }
}

/// Sum tree over non-negative leaf values with prefix-sum search.
#[derive(Debug, Clone)]
pub struct SumTree {
    tree: Tree,
    capacity: usize,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        Self {
            tree: Tree::new(capacity, 0.0, |a, b| a + b),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn set(&mut self, i: usize, value: f64) {
        assert!(i < self.capacity, "leaf {i} out of range");
        self.tree.set(i, value);
    }

    pub fn get(&self, i: usize) -> f64 {
        self.tree.get(i)
    }

    pub fn total(&self) -> f64 {
        self.tree.root()
    }

    /// Leaf `i` such that the prefix sum before `i` is `<= u` and the prefix
    /// sum through `i` exceeds it. Never returns an empty leaf while the
    /// total is positive.
    pub fn find(&self, mut u: f64) -> usize {
        let nodes = &self.tree.nodes;
        let mut n = 1;
        while n < self.tree.leaves {
            let left = nodes[2 * n];
            if u < left || nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                u -= left;
                n = 2 * n + 1;
            }
        }
        n - self.tree.leaves
    }
}

/// Indices and normalized importance weights of a sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Ring buffer sampled in proportion to `priority^alpha`.
#[derive(Debug, Clone)]
pub struct PrioritizedBuffer<T> {
    capacity: usize,
    alpha: f64,
    priority_floor: f64,
    items: Vec<T>,
    next: usize,
    sums: SumTree,
    mins: Tree,
    max_priority: f64,
}

impl<T> PrioritizedBuffer<T> {
    pub fn new(capacity: usize, alpha: f64, priority_floor: f64) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            alpha,
            priority_floor,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            next: 0,
            sums: SumTree::new(capacity),
            mins: Tree::new(capacity, f64::INFINITY, f64::min),
            max_priority: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn tree(&self) -> &SumTree {
        &self.sums
    }

    /// Stores an item at the current maximum priority, overwriting the
    /// oldest item once full. Returns the slot used.
    pub fn push(&mut self, item: T) -> usize {
        let p = self.max_priority;
        self.push_with_priority(item, p)
            .expect("max priority is always positive")
    }

    pub fn push_with_priority(&mut self, item: T, priority: f64) -> Result<usize, ReplayError> {
        if !(priority.is_finite() && priority > 0.0) {
            return Err(ReplayError::BadPriority(priority));
        }
        let slot = self.next;
        if slot == self.items.len() {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
        self.next = (self.next + 1) % self.capacity;
        self.set_priority(slot, priority);
        Ok(slot)
    }

    fn set_priority(&mut self, slot: usize, priority: f64) {
        self.max_priority = self.max_priority.max(priority);
        let scaled = priority.powf(self.alpha);
        self.sums.set(slot, scaled);
        self.mins.set(slot, scaled);
    }

    /// Sampling probability of slot `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.sums.get(i) / self.sums.total()
    }

    /// Stratified proportional sampling with importance weights
    /// `(N P(i))^-beta`, normalized by the largest weight in the buffer.
    pub fn sample<R: rand::Rng + ?Sized>(
        &self,
        batch: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<SampledBatch, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        if batch == 0 {
            return Err(ReplayError::ZeroBatch);
        }
        let total = self.sums.total();
        let n = self.len() as f64;
        let segment = total / batch as f64;
        let max_weight = (n * self.mins.root() / total).powf(-beta);
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for k in 0..batch {
            let u = (k as f64 + rng.gen::<f64>()) * segment;
            let i = self.sums.find(u).min(self.len() - 1);
            let w = (n * self.sums.get(i) / total).powf(-beta) / max_weight;
            indices.push(i);
            weights.push(w);
        }
        Ok(SampledBatch { indices, weights })
    }

    /// Sets priorities to `|td| + floor`.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<(), ReplayError> {
        for (&i, td) in indices.iter().zip(td_errors) {
            if i >= self.len() {
                return Err(ReplayError::BadIndex(i));
            }
            let p = td.abs() + self.priority_floor;
            if !p.is_finite() {
                return Err(ReplayError::BadPriority(p));
            }
            self.set_priority(i, p);
        }
        Ok(())
    }
}
