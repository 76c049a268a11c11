use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::{CoefficientField, EquationForm, Scenario, WienerHistory};
use crate::solver::{
    backward, check_compatible, into_fields, project_field, solve_tree, terminal_values, theta_state, CVec, Op,
    PerLevel, SchemeConfig, SolutionPair, StepInputs,
};
use crate::space::{
    assemble_l, assemble_m, coefficient_points, derivative_symbol, multiplication_matrix, sobolev_norm_sq,
    spectral_gradient_samples, SpectralBasis,
};
use crate::wiener::WienerTree;

/// Largest `|alpha|` the harness differentiates to.
pub const MAX_DERIVATIVE_ORDER: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MultiIndex {
    pub alpha: Vec<usize>,
}

impl MultiIndex {
    pub fn new(alpha: Vec<usize>) -> Self {
        Self { alpha }
    }

    /// `e_i` in dimension `d`.
    pub fn unit(d: usize, i: usize) -> Self {
        let mut alpha = vec![0; d];
        alpha[i] = 1;
        Self { alpha }
    }

    pub fn order(&self) -> usize {
        self.alpha.iter().sum()
    }

    /// Every `beta <= alpha` with the product of binomial coefficients.
    fn sub_indices(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out = vec![(Vec::new(), 1.0)];
        for &a in &self.alpha {
            out = out
                .into_iter()
                .flat_map(|(b, c)| {
                    (0..=a).map(move |bi| {
                        let mut nb = b.clone();
                        nb.push(bi);
                        (nb, c * binomial(a, bi))
                    })
                })
                .collect();
        }
        out
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn add(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn minus(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn unit(d: usize, i: usize) -> Vec<usize> {
    MultiIndex::unit(d, i).alpha
}

/// Solution of the differentiated equation and its comparison with the
/// spectral derivative of the base solution.
#[derive(Debug, Clone, PartialEq)]
pub struct HigherRegularity {
    /// `(u, v)`, approximating `(D^alpha p, D^alpha q)`.
    pub solution: SolutionPair,
    pub base: SolutionPair,
    /// `(dt sum_k E|u_k - D^alpha p_k|_0^2)^{1/2}`.
    pub defect: f64,
    /// Same for `v - D^alpha q`.
    pub defect_q: f64,
    /// `(dt sum_k E|D^alpha p_k|_0^2)^{1/2}`.
    pub reference_norm: f64,
}

/// Samples of `D^beta f` on the coefficient grid; `None` when identically zero.
struct CoefficientDerivatives<'a> {
    basis: &'a SpectralBasis,
    points: Vec<Vec<f64>>,
    g: usize,
}

impl CoefficientDerivatives<'_> {
    fn spectral(&self, mut values: Vec<f64>, beta: &[usize]) -> Vec<f64> {
        for (axis, &count) in beta.iter().enumerate() {
            for _ in 0..count {
                values = spectral_gradient_samples(&values, self.basis.dim_x(), self.g, self.basis.domain_halfwidth())
                    .swap_remove(axis);
            }
        }
        values
    }

    fn of(&self, f: &CoefficientField, beta: &[usize], t: f64, h: &WienerHistory) -> Option<Vec<f64>> {
        if f.is_zero() {
            return None;
        }
        let order: usize = beta.iter().sum();
        if order == 0 {
            return Some(self.points.iter().map(|x| f.eval(t, x, h)).collect());
        }
        if f.as_constant().is_some() {
            return None;
        }
        if let Some(grad) = f.gradient() {
            let axis = beta.iter().position(|&b| b > 0).expect("nonzero order");
            let vals: Vec<f64> = self.points.iter().map(|x| grad(t, x, h)[axis]).collect();
            let mut rest = beta.to_vec();
            rest[axis] -= 1;
            return Some(self.spectral(vals, &rest));
        }
        let vals: Vec<f64> = self.points.iter().map(|x| f.eval(t, x, h)).collect();
        Some(self.spectral(vals, beta))
    }

    /// `D^beta` of `b_i` in non-divergence form, adding `sum_j D_j a_ji` for
    /// divergence-form input.
    fn drift(&self, s: &Scenario, i: usize, beta: &[usize], t: f64, h: &WienerHistory) -> Option<Vec<f64>> {
        let mut acc = self.of(&s.b[i], beta, t, h);
        if s.form == EquationForm::Divergence {
            for j in 0..s.dim_x {
                let extra = self.of(&s.a[j][i], &add(beta, &unit(s.dim_x, j)), t, h);
                acc = sum_opt(acc, extra);
            }
        }
        acc
    }

    /// `D^beta` of `nu_k`, adding `sum_i D_i sigma_ik` for divergence form.
    fn zeroth_m(&self, s: &Scenario, k: usize, beta: &[usize], t: f64, h: &WienerHistory) -> Option<Vec<f64>> {
        let mut acc = self.of(&s.nu[k], beta, t, h);
        if s.form == EquationForm::Divergence {
            for i in 0..s.dim_x {
                let extra = self.of(&s.sigma[i][k], &add(beta, &unit(s.dim_x, i)), t, h);
                acc = sum_opt(acc, extra);
            }
        }
        acc
    }
}

fn sum_opt(a: Option<Vec<f64>>, b: Option<Vec<f64>>) -> Option<Vec<f64>> {
    match (a, b) {
        (Some(mut x), Some(y)) => {
            for (u, v) in x.iter_mut().zip(y) {
                *u += v;
            }
            Some(x)
        }
        (x, None) => x,
        (None, y) => y,
    }
}

struct DerivedInputs<'a> {
    scenario: &'a Scenario,
    leading: Scenario,
    base: &'a SolutionPair,
    tree: &'a WienerTree,
    basis: &'a SpectralBasis,
    alpha: &'a MultiIndex,
    coeffs: CoefficientDerivatives<'a>,
    dt: f64,
    theta: f64,
}

impl DerivedInputs<'_> {
    fn apply(&self, samples: Option<Vec<f64>>, gamma: &[usize], v: &CVec, scale: f64, out: &mut CVec) {
        let Some(samples) = samples else { return };
        let m: DMatrix<Complex64> = multiplication_matrix(self.basis, &samples);
        let dv = v.component_mul(&derivative_symbol(self.basis, gamma));
        *out += m * dv * Complex64::new(scale, 0.0);
    }
}

impl StepInputs for DerivedInputs<'_> {
    fn ops(&self, level: usize, history: &WienerHistory) -> (Op, Vec<Op>) {
        let t = level as f64 * self.dt;
        (
            Op::Dense(assemble_l(&self.leading, t, history, self.basis)),
            assemble_m(&self.leading, t, history, self.basis)
                .into_iter()
                .map(Op::Dense)
                .collect(),
        )
    }

    fn ops_adapted(&self) -> bool {
        !self.leading.operators_deterministic()
    }

    fn source(&self, level: usize, node: usize, history: &WienerHistory) -> CVec {
        let s = self.scenario;
        let d = s.dim_x;
        let t = level as f64 * self.dt;
        let alpha = &self.alpha.alpha;
        let p = theta_state(self.base, self.tree, level, node, self.theta);
        let q = self.base.q.value(level, node);
        let mut out =
            project_field(&s.free_term, t, history, self.basis).component_mul(&derivative_symbol(self.basis, alpha));
        for (beta, c) in self.alpha.sub_indices() {
            let gamma = minus(alpha, &beta);
            let leading = beta.iter().any(|&b| b > 0);
            for i in 0..d {
                if leading {
                    for j in 0..d {
                        let a = self.coeffs.of(&s.a[i][j], &beta, t, history);
                        self.apply(a, &add(&gamma, &add(&unit(d, i), &unit(d, j))), &p, c, &mut out);
                    }
                    for (k, qk) in q.iter().enumerate() {
                        let sg = self.coeffs.of(&s.sigma[i][k], &beta, t, history);
                        self.apply(sg, &add(&gamma, &unit(d, i)), qk, c, &mut out);
                    }
                }
                let b = self.coeffs.drift(s, i, &beta, t, history);
                self.apply(b, &add(&gamma, &unit(d, i)), &p, c, &mut out);
            }
            let cc = self.coeffs.of(&s.c, &beta, t, history);
            self.apply(cc, &gamma, &p, -c, &mut out);
            for (k, qk) in q.iter().enumerate() {
                let nu = self.coeffs.zeroth_m(s, k, &beta, t, history);
                self.apply(nu, &gamma, qk, c, &mut out);
            }
        }
        out
    }

    fn source_adapted(&self) -> bool {
        let base_adapted = (0..self.base.p.n_levels()).any(|k| !self.base.p.is_collapsed(k));
        base_adapted || !self.scenario.operators_deterministic() || self.scenario.free_term.is_adapted()
    }
}

/// Solves the equation satisfied by `(D^alpha p, D^alpha q)`: leading terms
/// `a^{ij} D_ij u + sigma^{ik} D_i v^k` and the Leibniz source built from the
/// base solution, then compares with the spectral derivative of the base.
pub fn higher_regularity_solve(
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    alpha: &MultiIndex,
    scheme: &SchemeConfig,
) -> Result<HigherRegularity> {
    check_compatible(scenario, tree, basis)?;
    if alpha.alpha.len() != scenario.dim_x {
        return Err(Error::Structural("multi-index has the wrong dimension".into()));
    }
    if alpha.order() > MAX_DERIVATIVE_ORDER {
        return Err(Error::Precondition(format!(
            "|alpha| = {} exceeds the maximum order {MAX_DERIVATIVE_ORDER}",
            alpha.order()
        )));
    }
    if scheme.m_coupling != crate::solver::MCoupling::Explicit {
        return Err(Error::Precondition(
            "the differentiated solve supports the explicit M coupling only".into(),
        ));
    }
    let base = solve_tree(scenario, tree, basis, scheme)?;
    let mut leading = scenario.clone();
    leading.form = EquationForm::NonDivergence;
    leading.b = vec![CoefficientField::zero(); scenario.dim_x];
    leading.c = CoefficientField::zero();
    leading.nu = vec![CoefficientField::zero(); scenario.dim_w];
    leading.free_term = CoefficientField::zero();
    let g = basis.coefficient_grid_len();
    let inputs = DerivedInputs {
        scenario,
        leading,
        base: &base,
        tree,
        basis,
        alpha,
        coeffs: CoefficientDerivatives {
            basis,
            points: coefficient_points(basis),
            g,
        },
        dt: tree.dt(),
        theta: scheme.theta,
    };
    let symbol = derivative_symbol(basis, &alpha.alpha);
    let terminal = match terminal_values(scenario, tree, basis)? {
        PerLevel::Shared(v) => PerLevel::Shared(v.component_mul(&symbol)),
        PerLevel::Nodes(vs) => PerLevel::Nodes(vs.into_iter().map(|v| v.component_mul(&symbol)).collect()),
    };
    let (p, q) = backward(&inputs, tree, basis.total_modes(), terminal, scheme)?;
    let (p, q) = into_fields(basis, p, q, tree.dim_w());
    let solution = SolutionPair {
        p,
        q,
        scheme: *scheme,
        dt: tree.dt(),
        n_steps: tree.n_steps(),
    };

    let dt = tree.dt();
    let (mut dp, mut dq, mut rn) = (0.0, 0.0, 0.0);
    for k in 0..tree.n_steps() {
        let stored = solution.p.level(k).stored().max(base.p.level(k).stored());
        let weights = if stored == 1 {
            vec![1.0]
        } else {
            tree.level_probabilities(k)
        };
        for (j, w) in weights.iter().enumerate() {
            let reference = base.p.value(k, j)[0].component_mul(&symbol);
            let diff = &solution.p.value(k, j)[0] - &reference;
            dp += w * sobolev_norm_sq(basis, diff.as_slice(), 0);
            rn += w * sobolev_norm_sq(basis, reference.as_slice(), 0);
            for (v, bq) in solution.q.value(k, j).iter().zip(base.q.value(k, j)) {
                let diff = v - bq.component_mul(&symbol);
                dq += w * sobolev_norm_sq(basis, diff.as_slice(), 0);
            }
        }
    }
    Ok(HigherRegularity {
        solution,
        base,
        defect: (dt * dp).sqrt(),
        defect_q: (dt * dq).sqrt(),
        reference_norm: (dt * rn).sqrt(),
    })
}
