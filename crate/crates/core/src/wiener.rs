//! Discrete substitutes for the Wiener process and its filtration.
//!
//! [`WienerTree`] is a non-recombining Gauss–Hermite tree: every node has
//! `B^d1` children whose increments match the first two Gaussian moments
//! exactly. Nodes are addressed arithmetically (the `j`-th node of level `k`
//! has children `j*C .. (j+1)*C` on level `k+1`), so the tree itself stores
//! only the one-step rule. [`PathEnsemble`] is the seeded Monte Carlo
//! counterpart.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scenario::WienerHistory;

/// Default cap on the number of nodes a tree may enumerate.
pub const DEFAULT_NODE_BUDGET: u128 = 1 << 22;

/// Nodes and weights of the `n`-point Gauss–Hermite rule for the standard
/// normal law (Golub–Welsch), symmetrized so odd moments vanish exactly.
pub fn gauss_hermite_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    // Rescale so the second moment is exactly one.
    let m2: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
    let s = m2.sqrt();
    nodes.iter_mut().for_each(|x| *x /= s);
    (nodes, weights)
}

/// Address of a tree node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

/// One child slot of the one-step rule.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub parent: usize,
    pub increment: Vec<f64>,
    /// Conditional weight relative to the parent.
    pub weight: f64,
}

/// Non-recombining quadrature tree over `n_steps` uniform steps.
#[derive(Debug, Clone)]
pub struct WienerTree {
    dim_w: usize,
    n_steps: usize,
    dt: f64,
    horizon: f64,
    branching: usize,
    children: usize,
    child_increments: Vec<Vec<f64>>,
    child_weights: Vec<f64>,
    enumerable: bool,
}

fn checked_pow(base: u128, exp: usize) -> Option<u128> {
    let mut out: u128 = 1;
    for _ in 0..exp {
        out = out.checked_mul(base)?;
    }
    Some(out)
}

/// Builds a tree under [`DEFAULT_NODE_BUDGET`].
pub fn build_tree(dim_w: usize, n_steps: usize, branching: usize, horizon: f64) -> Result<WienerTree> {
    WienerTree::with_budget(dim_w, n_steps, branching, horizon, DEFAULT_NODE_BUDGET)
}

impl WienerTree {
    /// Builds a tree whose total node count must not exceed `budget`.
    pub fn with_budget(dim_w: usize, n_steps: usize, branching: usize, horizon: f64, budget: u128) -> Result<Self> {
        let tree = Self::symbolic(dim_w, n_steps, branching, horizon)?;
        let total = tree.total_nodes().unwrap_or(u128::MAX);
        if total > budget {
            return Err(Error::Budget {
                what: "tree nodes",
                required: total,
                budget,
            });
        }
        Ok(Self {
            enumerable: true,
            ..tree
        })
    }

    /// A tree that is never enumerated node by node. Only solvers that can
    /// reduce a level to a single representative (deterministic scenarios)
    /// accept it.
    pub fn symbolic(dim_w: usize, n_steps: usize, branching: usize, horizon: f64) -> Result<Self> {
        if ![2, 3, 5].contains(&branching) {
            return Err(Error::Structural(format!(
                "branching must be 2, 3 or 5 (got {branching})"
            )));
        }
        if dim_w == 0 || n_steps == 0 || !(horizon > 0.0) {
            return Err(Error::Structural(
                "tree needs dim_w >= 1, n_steps >= 1 and a positive horizon".into(),
            ));
        }
        let dt = horizon / n_steps as f64;
        let (nodes, weights) = gauss_hermite_rule(branching);
        let children = branching.pow(dim_w as u32);
        let sd = dt.sqrt();
        let mut child_increments = Vec::with_capacity(children);
        let mut child_weights = Vec::with_capacity(children);
        for c in 0..children {
            let mut rest = c;
            let mut inc = vec![0.0; dim_w];
            let mut w = 1.0;
            for k in (0..dim_w).rev() {
                let digit = rest % branching;
                rest /= branching;
                inc[k] = sd * nodes[digit];
                w *= weights[digit];
            }
            child_increments.push(inc);
            child_weights.push(w);
        }
        Ok(Self {
            dim_w,
            n_steps,
            dt,
            horizon,
            branching,
            children,
            child_increments,
            child_weights,
            enumerable: false,
        })
    }

    pub fn dim_w(&self) -> usize {
        self.dim_w
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    /// Children per node, `B^d1`.
    pub fn children_per_node(&self) -> usize {
        self.children
    }

    pub fn is_enumerable(&self) -> bool {
        self.enumerable
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Node count of `level`, `None` on overflow.
    pub fn level_size(&self, level: usize) -> Option<u128> {
        checked_pow(self.children as u128, level)
    }

    pub fn total_nodes(&self) -> Option<u128> {
        (0..=self.n_steps).try_fold(0u128, |acc, k| acc.checked_add(self.level_size(k)?))
    }

    /// Node count of an enumerable level.
    pub fn level_len(&self, level: usize) -> usize {
        debug_assert!(self.enumerable);
        self.level_size(level).expect("enumerable tree level fits") as usize
    }

    pub fn child_increments(&self) -> &[Vec<f64>] {
        &self.child_increments
    }

    pub fn child_weights(&self) -> &[f64] {
        &self.child_weights
    }

    /// Parent index, increment and conditional weight of a node.
    pub fn node(&self, id: NodeId) -> TreeNode {
        let slot = id.index % self.children;
        TreeNode {
            parent: if id.level == 0 { 0 } else { id.index / self.children },
            increment: self.child_increments[slot].clone(),
            weight: if id.level == 0 { 1.0 } else { self.child_weights[slot] },
        }
    }

    /// Range of child indices on `level + 1`.
    pub fn children_of(&self, index: usize) -> std::ops::Range<usize> {
        index * self.children..(index + 1) * self.children
    }

    /// Ancestor chain of the node as a Wiener history.
    pub fn history(&self, id: NodeId) -> WienerHistory {
        let mut slots = Vec::with_capacity(id.level);
        let mut idx = id.index;
        for _ in 0..id.level {
            slots.push(idx % self.children);
            idx /= self.children;
        }
        let mut incs = Vec::with_capacity(id.level * self.dim_w);
        for &s in slots.iter().rev() {
            incs.extend_from_slice(&self.child_increments[s]);
        }
        WienerHistory::from_increments(self.dim_w, self.dt, incs).expect("consistent tree history")
    }

    /// Unconditional probability of reaching the node.
    pub fn probability(&self, id: NodeId) -> f64 {
        let mut idx = id.index;
        let mut p = 1.0;
        for _ in 0..id.level {
            p *= self.child_weights[idx % self.children];
            idx /= self.children;
        }
        p
    }

    /// Probabilities of every node of an enumerable level.
    pub fn level_probabilities(&self, level: usize) -> Vec<f64> {
        let mut probs = vec![1.0];
        for _ in 0..level {
            probs = probs
                .iter()
                .flat_map(|&p| self.child_weights.iter().map(move |w| p * w))
                .collect();
        }
        probs
    }

    /// `E[X | node]` for real child values.
    pub fn conditional_expectation(&self, _node: NodeId, child_values: &[f64]) -> Result<f64> {
        self.check_children(child_values.len())?;
        Ok(child_values.iter().zip(&self.child_weights).map(|(v, w)| v * w).sum())
    }

    /// Discrete martingale-representation coefficient
    /// `E[X dW^k | node] / dt` for each Wiener component.
    pub fn martingale_coefficient(&self, _node: NodeId, child_values: &[f64]) -> Result<Vec<f64>> {
        self.check_children(child_values.len())?;
        let mut out = vec![0.0; self.dim_w];
        for ((v, w), inc) in child_values.iter().zip(&self.child_weights).zip(&self.child_increments) {
            for (o, dw) in out.iter_mut().zip(inc) {
                *o += w * v * dw;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.dt);
        Ok(out)
    }

    fn check_children(&self, got: usize) -> Result<()> {
        if got != self.children {
            return Err(Error::LengthMismatch {
                expected: self.children,
                got,
            });
        }
        Ok(())
    }

    /// Weighted average of coefficient vectors.
    pub(crate) fn expect_vectors<'a, I>(&self, children: I, len: usize) -> Vec<Complex64>
    where
        I: IntoIterator<Item = &'a [Complex64]>,
    {
        let mut out = vec![Complex64::new(0.0, 0.0); len];
        for (v, w) in children.into_iter().zip(&self.child_weights) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x * w;
            }
        }
        out
    }

    /// Martingale coefficients of coefficient vectors, one vector per
    /// Wiener component.
    pub(crate) fn martingale_vectors<'a, I>(&self, children: I, len: usize) -> Vec<Vec<Complex64>>
    where
        I: IntoIterator<Item = &'a [Complex64]>,
    {
        let mut out = vec![vec![Complex64::new(0.0, 0.0); len]; self.dim_w];
        for ((v, w), inc) in children
            .into_iter()
            .zip(&self.child_weights)
            .zip(&self.child_increments)
        {
            for (ok, dw) in out.iter_mut().zip(inc) {
                let f = w * dw / self.dt;
                for (o, x) in ok.iter_mut().zip(v) {
                    *o += x * f;
                }
            }
        }
        out
    }
}

/// Seeded ensemble of Gaussian increments, `[path][step][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub dim_w: usize,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
    increments: Vec<f64>,
}

/// Draws `n_paths` independent Wiener paths with `N(0, dt)` increments.
pub fn sample_paths(dim_w: usize, n_steps: usize, n_paths: usize, horizon: f64, seed: u64) -> Result<PathEnsemble> {
    if dim_w == 0 || n_steps == 0 || n_paths == 0 || !(horizon > 0.0) {
        return Err(Error::Structural(
            "ensemble needs positive dim_w, n_steps, n_paths and horizon".into(),
        ));
    }
    let total = (n_paths as u128) * (n_steps as u128) * (dim_w as u128);
    let budget: u128 = 1 << 28;
    if total > budget {
        return Err(Error::Budget {
            what: "ensemble increments",
            required: total,
            budget,
        });
    }
    let dt = horizon / n_steps as f64;
    let sd = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let increments = (0..total as usize)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    Ok(PathEnsemble {
        dim_w,
        n_steps,
        n_paths,
        seed,
        dt,
        increments,
    })
}

impl PathEnsemble {
    /// Increment of `path` over step `step`.
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.n_steps + step) * self.dim_w;
        &self.increments[start..start + self.dim_w]
    }

    /// Wiener value of `path` after `steps` steps.
    pub fn w_at(&self, path: usize, steps: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.dim_w];
        for s in 0..steps {
            for (wk, dw) in w.iter_mut().zip(self.increment(path, s)) {
                *wk += dw;
            }
        }
        w
    }

    /// History of `path` after `steps` steps.
    pub fn history(&self, path: usize, steps: usize) -> WienerHistory {
        let start = path * self.n_steps * self.dim_w;
        let incs = self.increments[start..start + steps * self.dim_w].to_vec();
        WienerHistory::from_increments(self.dim_w, self.dt, incs).expect("consistent ensemble history")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent reference: roots of the probabilists' Hermite polynomial
    /// by bisection-seeded Newton on the three-term recurrence, weights
    /// `n! / (n He_{n-1}(x))^2`.
    fn hermite_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
        let he = |m: usize, x: f64| -> f64 {
            let (mut p0, mut p1) = (1.0, x);
            if m == 0 {
                return 1.0;
            }
            for k in 1..m {
                let p2 = x * p1 - k as f64 * p0;
                p0 = p1;
                p1 = p2;
            }
            p1
        };
        let mut roots = Vec::new();
        let (lo, hi, steps) = (-10.000_123, 9.999_877, 20_001);
        let mut prev = he(n, lo);
        for s in 1..=steps {
            let x = lo + (hi - lo) * s as f64 / steps as f64;
            let cur = he(n, x);
            if prev * cur < 0.0 {
                let mut r = x;
                for _ in 0..50 {
                    let d = n as f64 * he(n - 1, r);
                    r -= he(n, r) / d;
                }
                roots.push(r);
            }
            prev = cur;
        }
        let fact: f64 = (1..=n).map(|k| k as f64).product();
        let weights = roots
            .iter()
            .map(|&x| fact / (n as f64 * he(n - 1, x)).powi(2))
            .collect();
        (roots, weights)
    }

    #[test]
    fn rules_match_hermite_reference() {
        for n in [2, 3, 5] {
            let (x, w) = gauss_hermite_rule(n);
            let (xr, wr) = hermite_reference(n);
            assert_eq!(xr.len(), n);
            for i in 0..n {
                assert!((x[i] - xr[i]).abs() < 1e-12, "node {i} of {n}");
                assert!((w[i] - wr[i]).abs() < 1e-12, "weight {i} of {n}");
            }
        }
    }

    #[test]
    fn two_point_tree_levels() {
        let t = build_tree(1, 2, 2, 1.0).unwrap();
        assert_eq!(t.level_size(0), Some(1));
        assert_eq!(t.level_size(1), Some(2));
        assert_eq!(t.level_size(2), Some(4));
        let s = 0.5f64.sqrt();
        assert!((t.child_increments()[0][0] + s).abs() < 1e-15);
        assert!((t.child_increments()[1][0] - s).abs() < 1e-15);
        assert_eq!(t.child_weights(), &[0.5, 0.5]);
    }

    #[test]
    fn tensor_children() {
        let t = build_tree(2, 1, 2, 1.0).unwrap();
        assert_eq!(t.children_per_node(), 4);
        assert_eq!(t.level_size(1), Some(4));
        let mut seen: Vec<(i32, i32)> = t
            .child_increments()
            .iter()
            .map(|v| (v[0].signum() as i32, v[1].signum() as i32))
            .collect();
        seen.sort();
        assert_eq!(seen, vec![(-1, -1), (-1, 1), (1, -1), (1, 1)]);
    }

    #[test]
    fn three_point_rule_scaled() {
        let t = build_tree(1, 1, 3, 1.0).unwrap();
        let (xr, wr) = hermite_reference(3);
        for c in 0..3 {
            assert!((t.child_increments()[c][0] - xr[c]).abs() < 1e-12);
            assert!((t.child_weights()[c] - wr[c]).abs() < 1e-12);
        }
        assert!((t.child_increments()[2][0] - 3f64.sqrt()).abs() < 1e-12);
        assert!((t.child_weights()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn moment_matching() {
        for (d1, b) in [(1, 2), (1, 3), (1, 5), (2, 2), (2, 3), (3, 2)] {
            let t = build_tree(d1, 3, b, 0.7).unwrap();
            let dt = t.dt();
            let w = t.child_weights();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for k in 0..d1 {
                let m1: f64 = w.iter().zip(t.child_increments()).map(|(w, x)| w * x[k]).sum();
                let m2: f64 = w.iter().zip(t.child_increments()).map(|(w, x)| w * x[k] * x[k]).sum();
                assert!(m1.abs() < 1e-15);
                assert!((m2 - dt).abs() < 1e-15);
                for l in (k + 1)..d1 {
                    let cross: f64 = w.iter().zip(t.child_increments()).map(|(w, x)| w * x[k] * x[l]).sum();
                    assert!(cross.abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let err = WienerTree::with_budget(1, 30, 2, 1.0, 1000).unwrap_err();
        match err {
            Error::Budget { required, .. } => assert_eq!(required, (1u128 << 31) - 1),
            e => panic!("unexpected {e:?}"),
        }
        assert!(WienerTree::symbolic(1, 64, 2, 1.0).is_ok());
        assert!(build_tree(1, 2, 4, 1.0).is_err());
    }

    #[test]
    fn conditional_expectation_examples() {
        let t = build_tree(1, 1, 3, 1.0).unwrap();
        let root = NodeId { level: 0, index: 0 };
        assert!((t.conditional_expectation(root, &[7.0; 3]).unwrap() - 7.0).abs() < 1e-15);
        let dw: Vec<f64> = t.child_increments().iter().map(|v| v[0]).collect();
        assert!(t.conditional_expectation(root, &dw).unwrap().abs() < 1e-15);
        let dw2: Vec<f64> = dw.iter().map(|v| v * v).collect();
        assert!((t.conditional_expectation(root, &dw2).unwrap() - t.dt()).abs() < 1e-15);
        assert!(matches!(
            t.conditional_expectation(root, &[1.0, 2.0]),
            Err(Error::LengthMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn martingale_coefficient_examples() {
        let t = build_tree(1, 2, 2, 1.0).unwrap();
        let root = NodeId { level: 0, index: 0 };
        let vals: Vec<f64> = t.child_increments().iter().map(|v| 3.0 * v[0]).collect();
        assert!((t.martingale_coefficient(root, &vals).unwrap()[0] - 3.0).abs() < 1e-14);
        assert_eq!(t.martingale_coefficient(root, &[5.0, 5.0]).unwrap(), vec![0.0]);

        let t2 = build_tree(2, 1, 3, 1.0).unwrap();
        let vals: Vec<f64> = t2.child_increments().iter().map(|v| 1.7 + 2.0 * v[1]).collect();
        let q = t2.martingale_coefficient(root, &vals).unwrap();
        assert!(q[0].abs() < 1e-14 && (q[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn tower_property_on_random_leaves() {
        use rand::Rng;
        let t = build_tree(2, 3, 2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves: Vec<f64> = (0..t.level_len(3)).map(|_| rng.random::<f64>() - 0.5).collect();
        let probs = t.level_probabilities(3);
        let direct: f64 = leaves.iter().zip(&probs).map(|(v, p)| v * p).sum();
        let mut level = leaves;
        for k in (0..3).rev() {
            level = (0..t.level_len(k))
                .map(|j| {
                    t.conditional_expectation(NodeId { level: k, index: j }, &level[t.children_of(j)])
                        .unwrap()
                })
                .collect();
        }
        assert!((level[0] - direct).abs() < 1e-15);
    }

    #[test]
    fn histories_and_probabilities() {
        let t = build_tree(1, 3, 2, 1.0).unwrap();
        let id = NodeId { level: 3, index: 0b101 };
        let h = t.history(id);
        let s = (1.0f64 / 3.0).sqrt();
        assert_eq!(h.step(), 3);
        assert!((h.increment(0)[0] - s).abs() < 1e-15);
        assert!((h.increment(1)[0] + s).abs() < 1e-15);
        assert!((h.w(0) - s).abs() < 1e-15);
        assert!((t.probability(id) - 0.125).abs() < 1e-15);
        assert_eq!(t.node(id).parent, 0b10);
    }

    #[test]
    fn ensembles_are_reproducible() {
        let a = sample_paths(2, 4, 100, 1.0, 42).unwrap();
        let b = sample_paths(2, 4, 100, 1.0, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_paths(2, 4, 100, 1.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn terminal_variance_close_to_horizon() {
        let e = sample_paths(1, 1, 100_000, 1.0, 9).unwrap();
        let (mut s1, mut s2) = (0.0, 0.0);
        for p in 0..e.n_paths {
            let w = e.w_at(p, 1)[0];
            s1 += w;
            s2 += w * w;
        }
        let n = e.n_paths as f64;
        let mean = s1 / n;
        let var = s2 / n - mean * mean;
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn sample_mean_clt_bound_pass_rate() {
        // |mean| <= 4 sqrt(dt / n) should fail with probability ~6e-5.
        let n_paths = 100_000;
        let mut passes = 0;
        let seeds = 40;
        for seed in 0..seeds {
            let e = sample_paths(1, 2, n_paths, 1.0, 1000 + seed).unwrap();
            let mean: f64 = (0..n_paths).map(|p| e.increment(p, 0)[0]).sum::<f64>() / n_paths as f64;
            if mean.abs() <= 4.0 * (e.dt / n_paths as f64).sqrt() {
                passes += 1;
            }
        }
        assert_eq!(passes, seeds);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn martingale_coefficient_recovers_linear_combination(
                c0 in -5.0f64..5.0, c1 in -5.0f64..5.0, base in -3.0f64..3.0, b in prop::sample::select(vec![2usize, 3, 5])
            ) {
                let t = build_tree(2, 2, b, 0.9).unwrap();
                let root = NodeId { level: 0, index: 0 };
                let vals: Vec<f64> = t.child_increments().iter().map(|v| base + c0 * v[0] + c1 * v[1]).collect();
                let q = t.martingale_coefficient(root, &vals).unwrap();
                prop_assert!((q[0] - c0).abs() < 1e-12);
                prop_assert!((q[1] - c1).abs() < 1e-12);
                prop_assert!((t.conditional_expectation(root, &vals).unwrap() - base).abs() < 1e-12);
            }
        }
    }
}
