use serde::Serialize;

use super::ModelError;

/// Uniform grid `t_k = k T / N` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(ModelError::InvalidGrid("steps must be positive".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    /// Time to maturity `T - t_k`.
    pub fn remaining(&self, k: usize) -> f64 {
        self.horizon * (self.steps - k) as f64 / self.steps as f64
    }

    /// Largest grid index with `t_k <= t` (up to rounding).
    pub fn index_at_or_before(&self, t: f64) -> usize {
        let x = t / self.dt();
        let k = (x + 1e-9).floor();
        (k.max(0.0) as usize).min(self.steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Recombining binomial tree laid over a [`TimeGrid`].
///
/// Layer `k` starts at grid point `k * stride` and holds `k + 1` nodes; node
/// `i` is reached by `i` up moves. Each move is `±sqrt(stride * dt)` with
/// probability 1/2. The leaves (layer `depth`) sit at `T`. A depth-0 tree is
/// a single deterministic path whose one node is also the leaf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioTree {
    grid: TimeGrid,
    depth: usize,
    stride: usize,
}

impl ScenarioTree {
    pub fn build(grid: TimeGrid, depth: usize) -> Result<Self, ModelError> {
        let n = grid.steps();
        if depth > n {
            return Err(ModelError::DepthExceedsSteps { depth, steps: n });
        }
        if depth > 0 && !n.is_multiple_of(depth) {
            return Err(ModelError::DepthDoesNotDivide { depth, steps: n });
        }
        let stride = n.checked_div(depth).unwrap_or(n);
        Ok(ScenarioTree {
            grid,
            depth,
            stride,
        })
    }

    pub fn deterministic(grid: TimeGrid) -> Self {
        ScenarioTree {
            grid,
            depth: 0,
            stride: grid.steps(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn is_deterministic(&self) -> bool {
        self.depth == 0
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Number of layers that own time intervals.
    pub fn interval_layers(&self) -> usize {
        self.depth.max(1)
    }

    pub fn layer_of_point(&self, j: usize) -> usize {
        if self.depth == 0 {
            0
        } else {
            (j / self.stride).min(self.depth)
        }
    }

    pub fn layer_of_interval(&self, j: usize) -> usize {
        if self.depth == 0 {
            0
        } else {
            j / self.stride
        }
    }

    pub fn nodes_at_point(&self, j: usize) -> usize {
        self.layer_of_point(j) + 1
    }

    pub fn nodes_at_interval(&self, j: usize) -> usize {
        self.layer_of_interval(j) + 1
    }

    pub fn leaf_count(&self) -> usize {
        self.depth + 1
    }

    /// Grid point `j` starts a new layer, so values there differ by child.
    pub fn is_branch_point(&self, j: usize) -> bool {
        self.depth > 0 && j > 0 && j.is_multiple_of(self.stride)
    }

    pub fn layer_start(&self, k: usize) -> usize {
        k * self.stride
    }

    pub fn layer_dt(&self) -> f64 {
        self.stride as f64 * self.grid.dt()
    }

    pub fn increment(&self) -> f64 {
        self.layer_dt().sqrt()
    }

    /// Brownian level of node `i` on layer `k`.
    pub fn brownian_value(&self, k: usize, i: usize) -> f64 {
        (2.0 * i as f64 - k as f64) * self.increment()
    }

    /// Path-probability weights of the nodes of layer `k`.
    pub fn layer_weights(&self, k: usize) -> Vec<f64> {
        binomial_weights(k)
    }

    pub fn leaf_weights(&self) -> Vec<f64> {
        binomial_weights(self.depth)
    }

    /// Weights of the nodes at grid point `j`.
    pub fn point_weights(&self, j: usize) -> Vec<f64> {
        binomial_weights(self.layer_of_point(j))
    }

    /// Probability of reaching node `to` on layer `k + m` from node `from` on layer `k`.
    pub fn transition(&self, m: usize, from: usize, to: usize) -> f64 {
        if to < from || to - from > m {
            return 0.0;
        }
        binomial_weights(m)[to - from]
    }
}

/// `C(k, i) / 2^k` for `i = 0..=k`.
pub fn binomial_weights(k: usize) -> Vec<f64> {
    let mut w = vec![1.0];
    for _ in 0..k {
        let mut next = vec![0.0; w.len() + 1];
        for (i, v) in w.iter().enumerate() {
            next[i] += 0.5 * v;
            next[i + 1] += 0.5 * v;
        }
        w = next;
    }
    w
}

/// Values indexed by grid point (or interval) and tree node.
///
/// A row holding a single entry is broadcast to every node of its layer, which
/// is how deterministic data is embedded in a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField<T> {
    rows: Vec<Vec<T>>,
}

impl<T: Clone> NodeField<T> {
    pub fn new(rows: Vec<Vec<T>>) -> Self {
        NodeField { rows }
    }

    pub fn constant(len: usize, value: T) -> Self {
        NodeField {
            rows: vec![vec![value]; len],
        }
    }

    pub fn from_fn(
        len: usize,
        nodes: impl Fn(usize) -> usize,
        mut f: impl FnMut(usize, usize) -> T,
    ) -> Self {
        NodeField {
            rows: (0..len)
                .map(|j| (0..nodes(j)).map(|i| f(j, i)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, j: usize) -> &[T] {
        &self.rows[j]
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn row_mut(&mut self, j: usize) -> &mut Vec<T> {
        &mut self.rows[j]
    }

    pub fn get(&self, j: usize, node: usize) -> &T {
        let row = &self.rows[j];
        if row.len() == 1 {
            &row[0]
        } else {
            &row[node]
        }
    }

    pub fn truncated(&self, len: usize) -> Self {
        NodeField {
            rows: self.rows[..len].to_vec(),
        }
    }

    pub fn is_broadcast(&self) -> bool {
        self.rows.iter().all(|r| r.len() == 1)
    }

    pub fn map<U: Clone>(&self, mut f: impl FnMut(usize, usize, &T) -> U) -> NodeField<U> {
        NodeField {
            rows: self
                .rows
                .iter()
                .enumerate()
                .map(|(j, r)| r.iter().enumerate().map(|(i, v)| f(j, i, v)).collect())
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(j, r)| r.iter().enumerate().map(move |(i, v)| (j, i, v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.remaining(1), 1.5);
        assert_eq!(g.index_at_or_before(1.2), 2);
        assert_eq!(g.index_at_or_before(1.0), 2);
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn tree_examples() {
        let g = TimeGrid::new(1.0, 12).unwrap();
        let t1 = ScenarioTree::build(g, 1).unwrap();
        assert_eq!(t1.leaf_weights(), vec![0.5, 0.5]);

        let t3 = ScenarioTree::build(g, 3).unwrap();
        let sizes: Vec<_> = (0..=3).map(|k| t3.layer_weights(k).len()).collect();
        assert_eq!(sizes, vec![1, 2, 3, 4]);
        assert_eq!(t3.leaf_weights(), vec![0.125, 0.375, 0.375, 0.125]);
        assert_eq!(t3.stride(), 4);
        assert_eq!(t3.nodes_at_point(3), 1);
        assert_eq!(t3.nodes_at_point(4), 2);
        assert_eq!(t3.nodes_at_point(12), 4);
        assert!(t3.is_branch_point(8));
        assert!(!t3.is_branch_point(0));
        assert_eq!(t3.nodes_at_interval(11), 3);

        let t0 = ScenarioTree::build(g, 0).unwrap();
        assert_eq!(t0.leaf_weights(), vec![1.0]);
        assert!((0..=12).all(|j| t0.nodes_at_point(j) == 1 && !t0.is_branch_point(j)));

        assert!(matches!(
            ScenarioTree::build(g, 13),
            Err(ModelError::DepthExceedsSteps { .. })
        ));
        assert!(matches!(
            ScenarioTree::build(g, 5),
            Err(ModelError::DepthDoesNotDivide { .. })
        ));
    }

    #[test]
    fn weights_sum_to_one() {
        for k in 0..40 {
            let s: f64 = binomial_weights(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "layer {k}: {s}");
        }
    }

    #[test]
    fn transitions() {
        let t = ScenarioTree::build(TimeGrid::new(1.0, 4).unwrap(), 4).unwrap();
        assert_eq!(t.transition(2, 1, 2), 0.5);
        assert_eq!(t.transition(2, 1, 0), 0.0);
        assert_eq!(t.transition(1, 0, 1), 0.5);
        assert_eq!(t.brownian_value(2, 0), -2.0 * 0.5);
    }
}
