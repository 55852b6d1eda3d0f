//! Binary segment trees over a power-of-two number of leaves.
//!
//! Node `1` is the root, node `k` has children `2k` and `2k + 1`, and leaf `i`
//! lives at node `capacity + i`.

#[derive(Debug, Clone)]
struct Tree {
    capacity: usize,
    nodes: Vec<f64>,
    combine: fn(f64, f64) -> f64,
}

impl Tree {
    fn new(min_capacity: usize, combine: fn(f64, f64) -> f64) -> Self {
        let capacity = min_capacity.max(1).next_power_of_two();
        Self {
            capacity,
            nodes: vec![0.0; 2 * capacity],
            combine,
        }
    }

    fn set(&mut self, i: usize, value: f64) {
        assert!(i < self.capacity, "leaf {i} out of range");
        let mut node = self.capacity + i;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = (self.combine)(self.nodes[2 * node], self.nodes[2 * node + 1]);
        }
    }
}

/// Sum tree with prefix-sum search.
#[derive(Debug, Clone)]
pub struct SumTree(Tree);

impl SumTree {
    /// Leaf count is `min_capacity` rounded up to a power of two.
    pub fn new(min_capacity: usize) -> Self {
        Self(Tree::new(min_capacity, |a, b| a + b))
    }

    pub fn capacity(&self) -> usize {
        self.0.capacity
    }

    pub fn set(&mut self, i: usize, mass: f64) {
        debug_assert!(mass >= 0.0 && mass.is_finite(), "bad mass {mass}");
        self.0.set(i, mass);
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0.nodes[self.0.capacity + i]
    }

    pub fn total(&self) -> f64 {
        self.0.nodes[1]
    }

    pub fn leaves(&self) -> &[f64] {
        &self.0.nodes[self.0.capacity..]
    }

    /// Smallest leaf index whose inclusive cumulative mass exceeds `query`.
    /// Queries at or past the total resolve to the last leaf with mass.
    pub fn find_prefix(&self, mut query: f64) -> usize {
        let nodes = &self.0.nodes;
        let mut node = 1;
        while node < self.0.capacity {
            let left = 2 * node;
            if query < nodes[left] || nodes[left + 1] == 0.0 {
                node = left;
            } else {
                query -= nodes[left];
                node = left + 1;
            }
        }
        node - self.0.capacity
    }

    /// Every internal node equals the sum of its children, within `rel_tol`.
    pub fn is_consistent(&self, rel_tol: f64) -> bool {
        let n = &self.0.nodes;
        (1..self.0.capacity).all(|k| {
            let s = n[2 * k] + n[2 * k + 1];
            (n[k] - s).abs() <= rel_tol * s.abs().max(f64::MIN_POSITIVE)
        }) && {
            let direct: f64 = self.leaves().iter().sum();
            (self.total() - direct).abs() <= rel_tol * direct.abs().max(1.0)
        }
    }
}

/// Max tree, used to track the largest stored priority.
#[derive(Debug, Clone)]
pub struct MaxTree(Tree);

impl MaxTree {
    pub fn new(min_capacity: usize) -> Self {
        Self(Tree::new(min_capacity, f64::max))
    }

    pub fn set(&mut self, i: usize, value: f64) {
        self.0.set(i, value);
    }

    pub fn max(&self) -> f64 {
        self.0.nodes[1]
    }
}
