//! Backward Galerkin solver on the discrete filtration and the residual
//! checks of the weak and strong solution identities.
//!
//! At every node the martingale coefficient `q` is read off the children
//! first, then `p` solves the theta step
//! `(I - theta dt L) p = E[p+] + dt [(1 - theta) L E[p+] + M^k q^k + F]`
//! with `L`, `M^k`, `F` evaluated at the node's time and history.

mod engine;
mod regression;

pub use engine::STORAGE_BUDGET;
pub use regression::{solve_regression, RegressionSolution};

pub(crate) use engine::{backward, into_fields, step, CVec, NodeOps, Op, StepInputs};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::{CoefficientField, EquationForm, Scenario, WienerHistory};
use crate::space::{
    assemble_l, assemble_m, grid_points, multiplication_matrix, project, spectral_gradient_samples, SpatialField,
    SpectralBasis,
};
use crate::wiener::{NodeId, WienerTree};

/// Either one value shared by every node of a level or one value per node.
#[derive(Debug, Clone, PartialEq)]
pub enum PerLevel<T> {
    Shared(T),
    Nodes(Vec<T>),
}

impl<T> PerLevel<T> {
    pub fn get(&self, node: usize) -> &T {
        match self {
            PerLevel::Shared(v) => v,
            PerLevel::Nodes(vs) => &vs[node],
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, PerLevel::Shared(_))
    }

    /// Number of stored values.
    pub fn stored(&self) -> usize {
        match self {
            PerLevel::Shared(_) => 1,
            PerLevel::Nodes(vs) => vs.len(),
        }
    }

    pub fn values(&self) -> Box<dyn Iterator<Item = &T> + '_> {
        match self {
            PerLevel::Shared(v) => Box::new(std::iter::once(v)),
            PerLevel::Nodes(vs) => Box::new(vs.iter()),
        }
    }
}

/// Node-wise spectral field on the tree, with `components` vectors per node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    basis: SpectralBasis,
    components: usize,
    levels: Vec<PerLevel<Vec<CVec>>>,
}

impl AdaptedField {
    pub fn new(basis: SpectralBasis, components: usize, levels: Vec<PerLevel<Vec<CVec>>>) -> Self {
        Self {
            basis,
            components,
            levels,
        }
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &PerLevel<Vec<CVec>> {
        &self.levels[k]
    }

    /// Coefficient vectors at a node.
    pub fn value(&self, level: usize, node: usize) -> &[CVec] {
        self.levels[level].get(node)
    }

    pub fn field(&self, level: usize, node: usize, component: usize) -> SpatialField {
        SpatialField {
            basis: self.basis.clone(),
            coefficients: self.value(level, node)[component].clone(),
        }
    }

    /// True when a level stores one value for every node.
    pub fn is_collapsed(&self, level: usize) -> bool {
        self.levels[level].is_shared()
    }

    /// `alpha * self + beta * other`, node by node.
    pub fn combine(&self, alpha: f64, other: &AdaptedField, beta: f64) -> Result<AdaptedField> {
        if self.levels.len() != other.levels.len() || self.components != other.components {
            return Err(Error::Structural("adapted fields have different shapes".into()));
        }
        let mix = |a: &Vec<CVec>, b: &Vec<CVec>| -> Vec<CVec> {
            a.iter()
                .zip(b)
                .map(|(x, y)| x * Complex64::new(alpha, 0.0) + y * Complex64::new(beta, 0.0))
                .collect()
        };
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| match (a, b) {
                (PerLevel::Shared(x), PerLevel::Shared(y)) => PerLevel::Shared(mix(x, y)),
                _ => {
                    let n = a.stored().max(b.stored());
                    PerLevel::Nodes((0..n).map(|j| mix(a.get(j), b.get(j))).collect())
                }
            })
            .collect();
        Ok(AdaptedField {
            basis: self.basis.clone(),
            components: self.components,
            levels,
        })
    }

    /// Largest coefficient difference over all stored nodes.
    pub fn max_abs_diff(&self, other: &AdaptedField) -> f64 {
        let mut out = 0.0f64;
        for (a, b) in self.levels.iter().zip(&other.levels) {
            let n = a.stored().max(b.stored());
            for j in 0..n {
                for (x, y) in a.get(j).iter().zip(b.get(j)) {
                    out = out.max((x - y).camax());
                }
            }
        }
        out
    }

    /// Largest coefficient magnitude over all stored nodes.
    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.values())
            .flatten()
            .map(|v| v.camax())
            .fold(0.0, f64::max)
    }
}

/// How the `M q` term is coupled to the martingale coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MCoupling {
    /// `q` is the martingale coefficient of the children's `p`.
    Explicit,
    /// `q` solves `q = E[(p+ + dt M_c q) dW] / dt`, where `M_c` is the
    /// operator at each child, iterated to `fp_tol`. Identical to
    /// `Explicit` when the operators do not depend on the path.
    FixedPoint,
}

/// Time-discretization choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeConfig {
    pub theta: f64,
    pub m_coupling: MCoupling,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    /// Solve one representative per level when nothing depends on the path.
    pub collapse: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            m_coupling: MCoupling::Explicit,
            fp_tol: 1e-13,
            fp_max_iter: 100,
            collapse: true,
        }
    }
}

impl SchemeConfig {
    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_coupling(mut self, c: MCoupling) -> Self {
        self.m_coupling = c;
        self
    }

    pub fn with_collapse(mut self, on: bool) -> Self {
        self.collapse = on;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Structural(format!(
                "theta must lie in [0, 1] (got {})",
                self.theta
            )));
        }
        if !(self.fp_tol > 0.0) || self.fp_max_iter == 0 {
            return Err(Error::Structural("fp_tol must be positive and fp_max_iter >= 1".into()));
        }
        Ok(())
    }
}

/// The solution pair on a tree: `p` on levels `0..=N`, `q` on `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPair {
    pub p: AdaptedField,
    pub q: AdaptedField,
    pub scheme: SchemeConfig,
    pub dt: f64,
    pub n_steps: usize,
}

impl SolutionPair {
    pub fn basis(&self) -> &SpectralBasis {
        self.p.basis()
    }

    /// `p(0, .)` at the root.
    pub fn p0(&self) -> SpatialField {
        self.p.field(0, 0, 0)
    }

    /// Values at a node as `(p, q)`.
    pub fn node(&self, level: usize, node: usize) -> (&CVec, Option<&[CVec]>) {
        let p = &self.p.value(level, node)[0];
        let q = (level < self.n_steps).then(|| self.q.value(level, node));
        (p, q)
    }
}

/// Projects a field at `(t, history)` onto the basis.
pub fn project_field(field: &CoefficientField, t: f64, history: &WienerHistory, basis: &SpectralBasis) -> CVec {
    if field.is_zero() {
        return CVec::zeros(basis.total_modes());
    }
    if let Some(c) = field.as_constant() {
        let mut v = CVec::zeros(basis.total_modes());
        let zero = basis.mode_index(&vec![0; basis.dim_x()]).expect("zero mode");
        v[zero] = Complex64::new(c, 0.0);
        return v;
    }
    let values: Vec<f64> = basis.grid_points().iter().map(|x| field.eval(t, x, history)).collect();
    project(basis, &values).expect("grid-sized samples").coefficients
}

/// `theta p + (1 - theta) E[p+]` at a node of a solution.
pub(crate) fn theta_state(sol: &SolutionPair, tree: &WienerTree, level: usize, node: usize, theta: f64) -> CVec {
    let u = &sol.p.value(level, node)[0];
    if theta == 1.0 {
        return u.clone();
    }
    let next = sol.p.level(level + 1);
    let eu = if next.is_shared() {
        next.get(0)[0].clone()
    } else {
        let kids: Vec<&CVec> = tree.children_of(node).map(|c| &next.get(c)[0]).collect();
        CVec::from_vec(tree.expect_vectors(kids.iter().map(|v| v.as_slice()), u.len()))
    };
    u * Complex64::new(theta, 0.0) + eu * Complex64::new(1.0 - theta, 0.0)
}

/// Probability of each stored value of a level.
pub(crate) fn stored_weights(level: &PerLevel<Vec<CVec>>, tree: &WienerTree, k: usize) -> Vec<f64> {
    if level.is_shared() {
        vec![1.0]
    } else {
        tree.level_probabilities(k)
    }
}

/// Step inputs taken directly from a scenario.
pub(crate) struct ScenarioInputs<'a> {
    pub scenario: &'a Scenario,
    pub basis: &'a SpectralBasis,
    pub dt: f64,
}

impl StepInputs for ScenarioInputs<'_> {
    fn ops(&self, level: usize, history: &WienerHistory) -> (Op, Vec<Op>) {
        let t = level as f64 * self.dt;
        (
            Op::Dense(assemble_l(self.scenario, t, history, self.basis)),
            assemble_m(self.scenario, t, history, self.basis)
                .into_iter()
                .map(Op::Dense)
                .collect(),
        )
    }

    fn ops_adapted(&self) -> bool {
        !self.scenario.operators_deterministic()
    }

    fn source(&self, level: usize, _node: usize, history: &WienerHistory) -> CVec {
        project_field(&self.scenario.free_term, level as f64 * self.dt, history, self.basis)
    }

    fn source_adapted(&self) -> bool {
        self.scenario.free_term.is_adapted()
    }
}

/// Projected terminal datum, per leaf when it depends on the path.
pub(crate) fn terminal_values(scenario: &Scenario, tree: &WienerTree, basis: &SpectralBasis) -> Result<PerLevel<CVec>> {
    let n = tree.n_steps();
    let t = tree.horizon();
    if !scenario.phi.is_adapted() {
        let h = WienerHistory::from_increments(tree.dim_w(), tree.dt(), vec![0.0; n * tree.dim_w()])?;
        return Ok(PerLevel::Shared(project_field(&scenario.phi, t, &h, basis)));
    }
    if !tree.is_enumerable() {
        return Err(Error::Budget {
            what: "tree nodes (tree is symbolic; the terminal datum needs every leaf)",
            required: tree.total_nodes().unwrap_or(u128::MAX),
            budget: crate::wiener::DEFAULT_NODE_BUDGET,
        });
    }
    Ok(PerLevel::Nodes(
        (0..tree.level_len(n))
            .into_par_iter()
            .map(|j| project_field(&scenario.phi, t, &tree.history(NodeId { level: n, index: j }), basis))
            .collect(),
    ))
}

pub(crate) fn check_compatible(scenario: &Scenario, tree: &WienerTree, basis: &SpectralBasis) -> Result<()> {
    scenario.check_structure()?;
    if tree.dim_w() != scenario.dim_w {
        return Err(Error::Structural(format!(
            "tree has {} Wiener components, scenario {}",
            tree.dim_w(),
            scenario.dim_w
        )));
    }
    if (tree.horizon() - scenario.horizon).abs() > 1e-12 * scenario.horizon {
        return Err(Error::Structural(
            "tree horizon differs from the scenario horizon".into(),
        ));
    }
    if basis.dim_x() != scenario.dim_x || (basis.domain_halfwidth() - scenario.domain_halfwidth).abs() > 0.0 {
        return Err(Error::Structural("basis does not match the scenario domain".into()));
    }
    Ok(())
}

/// Marches the Galerkin system backward over the tree.
pub fn solve_tree(
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    scheme: &SchemeConfig,
) -> Result<SolutionPair> {
    check_compatible(scenario, tree, basis)?;
    scheme.check()?;
    let inputs = ScenarioInputs {
        scenario,
        basis,
        dt: tree.dt(),
    };
    let terminal = terminal_values(scenario, tree, basis)?;
    let (p, q) = backward(&inputs, tree, basis.total_modes(), terminal, scheme)?;
    let (p, q) = engine::into_fields(basis, p, q, tree.dim_w());
    Ok(SolutionPair {
        p,
        q,
        scheme: *scheme,
        dt: tree.dt(),
        n_steps: tree.n_steps(),
    })
}

/// History of a stored node; collapsed levels use the all-zero path.
pub(crate) fn node_history(tree: &WienerTree, level: usize, node: usize) -> WienerHistory {
    if tree.is_enumerable() {
        tree.history(NodeId { level, index: node })
    } else {
        WienerHistory::from_increments(tree.dim_w(), tree.dt(), vec![0.0; level * tree.dim_w()]).expect("zero history")
    }
}

/// `E[p+ | node]`, the theta-averaged state and the node operators.
struct NodeView {
    e: CVec,
    p: CVec,
    q: Vec<CVec>,
    children: Vec<CVec>,
}

fn node_view(solution: &SolutionPair, tree: &WienerTree, level: usize, node: usize) -> NodeView {
    let n_modes = solution.basis().total_modes();
    let next = solution.p.level(level + 1);
    let children: Vec<CVec> = if solution.p.is_collapsed(level) || next.is_shared() {
        vec![next.get(0)[0].clone(); tree.children_per_node()]
    } else {
        tree.children_of(node).map(|c| next.get(c)[0].clone()).collect()
    };
    let e = tree.expect_vectors(children.iter().map(|v| v.as_slice()), n_modes);
    NodeView {
        e: CVec::from_vec(e),
        p: solution.p.value(level, node)[0].clone(),
        q: solution.q.value(level, node).to_vec(),
        children,
    }
}

/// Per-level, per-stored-node norm of
/// `p - E[p+] - dt [theta L p + (1 - theta) L E[p+] + M q + F]`.
pub fn strong_residual(
    solution: &SolutionPair,
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
) -> Result<Vec<Vec<f64>>> {
    check_compatible(scenario, tree, basis)?;
    let theta = solution.scheme.theta;
    let dt = solution.dt;
    (0..solution.n_steps)
        .map(|k| {
            let count = solution.p.level(k).stored();
            (0..count)
                .into_par_iter()
                .map(|j| {
                    let h = node_history(tree, k, j);
                    let t = k as f64 * dt;
                    let v = node_view(solution, tree, k, j);
                    let l = assemble_l(scenario, t, &h, basis);
                    let ms = assemble_m(scenario, t, &h, basis);
                    let f = project_field(&scenario.free_term, t, &h, basis);
                    let mut drift =
                        &l * (&v.p * Complex64::new(theta, 0.0) + &v.e * Complex64::new(1.0 - theta, 0.0)) + f;
                    for (m, qk) in ms.iter().zip(&v.q) {
                        drift += m * qk;
                    }
                    Ok((&v.p - &v.e - drift * Complex64::new(dt, 0.0)).norm())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// Per-child defect of the unconditioned step `p+_c = p - dt drift + q.dW_c`,
/// i.e. the norm of `p+_c - p + dt drift - q.dW_c` for each child of a
/// stored node.
pub fn strong_residual_children(
    solution: &SolutionPair,
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    level: usize,
    node: usize,
) -> Result<Vec<f64>> {
    check_compatible(scenario, tree, basis)?;
    let theta = solution.scheme.theta;
    let dt = solution.dt;
    let h = node_history(tree, level, node);
    let t = level as f64 * dt;
    let v = node_view(solution, tree, level, node);
    let l = assemble_l(scenario, t, &h, basis);
    let ms = assemble_m(scenario, t, &h, basis);
    let f = project_field(&scenario.free_term, t, &h, basis);
    let mut drift = &l * (&v.p * Complex64::new(theta, 0.0) + &v.e * Complex64::new(1.0 - theta, 0.0)) + f;
    for (m, qk) in ms.iter().zip(&v.q) {
        drift += m * qk;
    }
    Ok(v.children
        .iter()
        .zip(tree.child_increments())
        .map(|(c, dw)| {
            let mut r = c - &v.p + &drift * Complex64::new(dt, 0.0);
            for (qk, w) in v.q.iter().zip(dw) {
                r -= qk * Complex64::new(*w, 0.0);
            }
            r.norm()
        })
        .collect())
}

/// Samples of `a^{ij}` and its gradient on the coefficient grid.
fn leading_samples(
    field: &CoefficientField,
    t: f64,
    h: &WienerHistory,
    basis: &SpectralBasis,
    points: &[Vec<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let vals: Vec<f64> = points.iter().map(|x| field.eval(t, x, h)).collect();
    let grad = match field.gradient() {
        Some(g) => {
            let per_point: Vec<Vec<f64>> = points.iter().map(|x| g(t, x, h)).collect();
            (0..basis.dim_x())
                .map(|i| per_point.iter().map(|v| v[i]).collect())
                .collect()
        }
        None => spectral_gradient_samples(
            &vals,
            basis.dim_x(),
            basis.coefficient_grid_len(),
            basis.domain_halfwidth(),
        ),
    };
    (vals, grad)
}

/// Weak form of the step identity tested against `eta`, with the
/// second-order term moved onto `eta` by parts. Returns the real part of
/// the pairing per level and stored node.
pub fn weak_residual(
    solution: &SolutionPair,
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    test_field: &SpatialField,
) -> Result<Vec<Vec<f64>>> {
    check_compatible(scenario, tree, basis)?;
    if test_field.basis != *basis {
        return Err(Error::Structural("test field uses a different basis".into()));
    }
    let theta = solution.scheme.theta;
    let dt = solution.dt;
    let d = scenario.dim_x;
    let points = grid_points(d, basis.coefficient_grid_len(), basis.domain_halfwidth());
    let dsym: Vec<CVec> = (0..d)
        .map(|i| {
            let mut alpha = vec![0; d];
            alpha[i] = 1;
            crate::space::derivative_symbol(basis, &alpha)
        })
        .collect();
    let eta = &test_field.coefficients;
    let deta: Vec<CVec> = dsym.iter().map(|s| s.component_mul(eta)).collect();
    let pair = |u: &CVec, v: &CVec| -> Complex64 { u.iter().zip(v.iter()).map(|(a, b)| a * b.conj()).sum() };
    // Scenario with the second-order part removed: its L holds only b and c.
    let mut lower = scenario.clone();
    lower.a = vec![vec![CoefficientField::zero(); d]; d];
    (0..solution.n_steps)
        .map(|k| {
            let count = solution.p.level(k).stored();
            (0..count)
                .into_par_iter()
                .map(|j| {
                    let h = node_history(tree, k, j);
                    let t = k as f64 * dt;
                    let v = node_view(solution, tree, k, j);
                    let u = &v.p * Complex64::new(theta, 0.0) + &v.e * Complex64::new(1.0 - theta, 0.0);
                    let l_low = assemble_l(&lower, t, &h, basis);
                    let ms = assemble_m(scenario, t, &h, basis);
                    let f = project_field(&scenario.free_term, t, &h, basis);
                    let mut rest = &l_low * &u + f;
                    for (m, qk) in ms.iter().zip(&v.q) {
                        rest += m * qk;
                    }
                    let mut drift_pair = pair(&rest, eta);
                    for i in 0..d {
                        for jj in 0..d {
                            let field = &scenario.a[i][jj];
                            if field.is_zero() {
                                continue;
                            }
                            let (vals, grad) = leading_samples(field, t, &h, basis, &points);
                            let du = dsym[jj].component_mul(&u);
                            let a_du = multiplication_matrix(basis, &vals) * &du;
                            drift_pair -= pair(&a_du, &deta[i]);
                            if scenario.form == EquationForm::NonDivergence {
                                let da_du = multiplication_matrix(basis, &grad[i]) * &du;
                                drift_pair -= pair(&da_du, eta);
                            }
                        }
                    }
                    let total = pair(&(&v.p - &v.e), eta) - drift_pair * dt;
                    Ok(total.re)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::project_fn;
    use crate::wiener::build_tree;
    use std::f64::consts::PI;

    fn g(x: &[f64]) -> f64 {
        (PI * x[0]).cos() + 0.5 * (2.0 * PI * x[0]).sin() + 0.2
    }

    #[test]
    fn constant_data_propagates() {
        let s = Scenario::zero_operator(1, 1, 1.0, 1.0).with_phi(CoefficientField::deterministic(|_, x| g(x)));
        let tree = build_tree(1, 3, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 4, 1.0).unwrap();
        for collapse in [true, false] {
            let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default().with_collapse(collapse)).unwrap();
            let pg = project_fn(&basis, g).coefficients;
            for k in 0..=3 {
                for j in 0..sol.p.level(k).stored() {
                    assert!((&sol.p.value(k, j)[0] - &pg).camax() < 1e-14);
                }
            }
            assert!(sol.q.max_abs() < 1e-14);
        }
    }

    #[test]
    fn martingale_representation_exact() {
        let s = Scenario::zero_operator(1, 1, 1.0, 1.0).with_phi(CoefficientField::adapted(|_, x, h| g(x) * h.w(0)));
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        let pg = project_fn(&basis, g).coefficients;
        for b in [2, 3, 5] {
            let tree = build_tree(1, 3, b, 1.0).unwrap();
            let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
            for k in 0..3 {
                for j in 0..tree.level_len(k) {
                    let w = tree.history(NodeId { level: k, index: j }).w(0);
                    assert!((&sol.p.value(k, j)[0] - &pg * Complex64::new(w, 0.0)).camax() < 1e-12);
                    assert!((&sol.q.value(k, j)[0] - &pg).camax() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_is_self_consistent_and_detects_perturbation() {
        let mut s = Scenario::heat(1, 1, 0.5, 1.0);
        s.a[0][0] = CoefficientField::adapted(|_, x, h| 0.5 + 0.1 * (PI * x[0]).sin() * h.w(0).tanh());
        s.sigma[0][0] = CoefficientField::constant(0.3);
        s.b[0] = CoefficientField::deterministic(|_, x| 0.2 * (PI * x[0]).cos());
        s.free_term = CoefficientField::deterministic(|t, x| t * (PI * x[0]).sin());
        s.phi = CoefficientField::adapted(|_, x, h| (PI * x[0]).cos() * (1.0 + h.w(0)));
        let tree = build_tree(1, 3, 2, 0.5).unwrap();
        let basis = SpectralBasis::new(1, 4, 1.0).unwrap();
        for theta in [1.0, 0.5] {
            let scheme = SchemeConfig::default().with_theta(theta);
            let sol = solve_tree(&s, &tree, &basis, &scheme).unwrap();
            let r = strong_residual(&sol, &s, &tree, &basis).unwrap();
            assert!(r.iter().flatten().all(|&v| v <= 1e-10), "{r:?}");
            let mut bad = sol.clone();
            let eps = 1e-3;
            if let PerLevel::Nodes(vs) = &mut bad.p.levels[1] {
                vs[1][0][4] += Complex64::new(eps, 0.0);
            }
            let r2 = strong_residual(&bad, &s, &tree, &basis).unwrap();
            let ratio = r2[1][1] / eps;
            assert!((ratio - 1.0).abs() < 0.5, "{ratio}");
        }
    }

    #[test]
    fn binary_tree_children_identity_is_exact_without_operators() {
        let s = Scenario::zero_operator(1, 1, 1.0, 1.0)
            .with_phi(CoefficientField::adapted(|_, x, h| g(x) * h.w(0).powi(3)));
        let tree = build_tree(1, 3, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
        for j in 0..2 {
            let r = strong_residual_children(&sol, &s, &tree, &basis, 1, j).unwrap();
            assert!(r.iter().all(|&v| v < 1e-12));
        }
    }

    #[test]
    fn deterministic_reduction_without_collapse() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.a[0][0] = CoefficientField::deterministic(|_, x| 0.5 + 0.1 * (PI * x[0]).sin());
        s.nu[0] = CoefficientField::constant(0.2);
        s.phi = CoefficientField::deterministic(|_, x| g(x));
        let tree = build_tree(1, 4, 3, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 4, 1.0).unwrap();
        let full = solve_tree(&s, &tree, &basis, &SchemeConfig::default().with_collapse(false)).unwrap();
        let fast = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
        assert!(full.q.max_abs() < 1e-13);
        assert!(full.p.max_abs_diff(&fast.p) < 1e-13);
        assert!(!full.p.is_collapsed(2) && fast.p.is_collapsed(2));
    }

    #[test]
    fn linearity_in_data() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.sigma[0][0] = CoefficientField::adapted(|_, x, h| 0.3 * (PI * x[0]).cos() * h.w(0).sin());
        let f1 = CoefficientField::deterministic(|_, x| (PI * x[0]).sin());
        let f2 = CoefficientField::adapted(|_, x, h| h.w(0) * (PI * x[0]).cos());
        let p1 = CoefficientField::adapted(|_, x, h| h.w(0) * (PI * x[0]).sin());
        let p2 = CoefficientField::deterministic(|_, x| g(x));
        let tree = build_tree(1, 3, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        let sc = SchemeConfig::default();
        let s1 = solve_tree(
            &s.clone().with_free_term(f1.clone()).with_phi(p1.clone()),
            &tree,
            &basis,
            &sc,
        )
        .unwrap();
        let s2 = solve_tree(
            &s.clone().with_free_term(f2.clone()).with_phi(p2.clone()),
            &tree,
            &basis,
            &sc,
        )
        .unwrap();
        let (al, be) = (1.7, -0.4);
        let f = CoefficientField::adapted(move |t, x, h| al * f1.eval(t, x, h) + be * f2.eval(t, x, h));
        let p = CoefficientField::adapted(move |t, x, h| al * p1.eval(t, x, h) + be * p2.eval(t, x, h));
        let s3 = solve_tree(&s.clone().with_free_term(f).with_phi(p), &tree, &basis, &sc).unwrap();
        let comb_p = s1.p.combine(al, &s2.p, be).unwrap();
        let comb_q = s1.q.combine(al, &s2.q, be).unwrap();
        assert!(s3.p.max_abs_diff(&comb_p) < 1e-12);
        assert!(s3.q.max_abs_diff(&comb_q) < 1e-12);
    }

    #[test]
    fn fixed_point_coupling_converges() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.sigma[0][0] = CoefficientField::adapted(|_, x, h| 0.3 * (PI * x[0]).cos() * h.w(0).tanh());
        s.phi = CoefficientField::adapted(|_, x, h| h.w(0) * (PI * x[0]).sin());
        let tree = build_tree(1, 3, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        let sc = SchemeConfig::default().with_coupling(MCoupling::FixedPoint);
        let sol = solve_tree(&s, &tree, &basis, &sc).unwrap();
        let exp = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
        // Path-dependent sigma: q picks up a small correction.
        let diff = sol.q.max_abs_diff(&exp.q);
        assert!(diff > 0.0 && diff < 0.5 * exp.q.max_abs().max(1.0), "{diff}");
        let det =
            Scenario::heat(1, 1, 1.0, 1.0).with_phi(CoefficientField::adapted(|_, x, h| h.w(0) * (PI * x[0]).sin()));
        let a = solve_tree(&det, &tree, &basis, &sc).unwrap();
        let b = solve_tree(&det, &tree, &basis, &SchemeConfig::default()).unwrap();
        assert!(a.q.max_abs_diff(&b.q) < 1e-14 && a.p.max_abs_diff(&b.p) < 1e-14);
        let tight = SchemeConfig { fp_max_iter: 1, ..sc };
        assert!(matches!(
            solve_tree(&s, &tree, &basis, &tight),
            Err(Error::FixedPoint { .. })
        ));
    }

    #[test]
    fn weak_and_strong_agree_for_constant_coefficients() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.b[0] = CoefficientField::constant(0.3);
        s.sigma[0][0] = CoefficientField::constant(0.4);
        s.phi = CoefficientField::adapted(|_, x, h| (PI * x[0]).cos() * (1.0 + h.w(0)));
        s.free_term = CoefficientField::deterministic(|_, x| (2.0 * PI * x[0]).sin());
        let tree = build_tree(1, 3, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 4, 1.0).unwrap();
        for form in [EquationForm::Divergence, EquationForm::NonDivergence] {
            let s = s.clone().with_form(form);
            let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
            for xi in [0i64, 1, 3] {
                let eta = SpatialField::unit_mode(&basis, &[xi]).unwrap();
                let w = weak_residual(&sol, &s, &tree, &basis, &eta).unwrap();
                assert!(w.iter().flatten().all(|v| v.abs() <= 1e-8), "{w:?}");
            }
            // Mode 4 is absent from p, q, F and phi.
            let eta = SpatialField::unit_mode(&basis, &[4]).unwrap();
            let w = weak_residual(&sol, &s, &tree, &basis, &eta).unwrap();
            assert!(w.iter().flatten().all(|v| v.abs() <= 1e-12));
        }
    }

    #[test]
    fn symbolic_tree_requires_deterministic_problem() {
        let s = Scenario::heat(1, 1, 1.0, 1.0).with_phi(CoefficientField::adapted(|_, _, h| h.w(0)));
        let tree = WienerTree::symbolic(1, 40, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 2, 1.0).unwrap();
        assert!(matches!(
            solve_tree(&s, &tree, &basis, &SchemeConfig::default()),
            Err(Error::Budget { .. })
        ));
        let det = Scenario::heat(1, 1, 1.0, 1.0).with_phi(CoefficientField::deterministic(|_, x| g(x)));
        assert!(solve_tree(&det, &tree, &basis, &SchemeConfig::default()).is_ok());
    }

    #[test]
    fn theta_scheme_orders() {
        // Single mode of the heat equation: exact factor exp(-k^2 T / 2).
        let l = 1.0;
        let s = Scenario::heat(1, 1, 1.0, l).with_phi(CoefficientField::deterministic(|_, x| (PI * x[0]).cos()));
        let basis = SpectralBasis::new(1, 2, l).unwrap();
        let idx = basis.mode_index(&[1]).unwrap();
        let exact = 0.5 * (-PI * PI / 2.0).exp();
        for (theta, order) in [(1.0, 1.0), (0.5, 2.0)] {
            let errs: Vec<f64> = [16, 32, 64]
                .iter()
                .map(|&n| {
                    let tree = WienerTree::symbolic(1, n, 2, 1.0).unwrap();
                    let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default().with_theta(theta)).unwrap();
                    (sol.p.value(0, 0)[0][idx].re - exact).abs()
                })
                .collect();
            for w in errs.windows(2) {
                let observed = (w[0] / w[1]).log2();
                assert!((observed - order).abs() < 0.2, "theta {theta}: {errs:?}");
            }
        }
    }
}
