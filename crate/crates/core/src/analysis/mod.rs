//! Audits run on computed solutions: energy estimates, the discrete Itô
//! energy balance, positivity and negative parts, coefficient mollification,
//! and the differentiated equation behind higher regularity.

mod mollify;
mod positivity;
mod regularity;

pub use mollify::{mollify, MollifierConfig};
pub use positivity::{positivity_check, PositivityReport};
pub use regularity::{higher_regularity_solve, HigherRegularity, MultiIndex, MAX_DERIVATIVE_ORDER};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::scenario::Scenario;
use crate::solver::{
    check_compatible, node_history, project_field, stored_weights, terminal_values, AdaptedField, CVec, PerLevel,
    SolutionPair,
};
use crate::space::{assemble_l, assemble_m, sobolev_norm_sq, SpectralBasis};
use crate::wiener::WienerTree;

/// Which a-priori estimate an audit evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EstimateKind {
    /// `|p|_1^2 + |q|_0^2 + E sup |p|_0^2 <= C (|F|_{-1}^2 + E|phi|_0^2)`.
    Weak,
    /// `|p|_2^2 + |q|_1^2 + E sup |p|_1^2 <= C (|F|_0^2 + E|phi|_1^2)`.
    Strong,
    /// `|p|_{n+2}^2 + |q|_{n+1}^2 + E sup |p|_{n+1}^2 <= C (|F|_n^2 + E|phi|_{n+1}^2)`.
    Higher { n: u32 },
    /// `sup_t E int (p^-)^2 <= C (E int (phi^-)^2 + E int int (F^-)^2)`.
    NegativePart,
}

impl EstimateKind {
    pub fn name(&self) -> String {
        match self {
            EstimateKind::Weak => "weak".into(),
            EstimateKind::Strong => "strong".into(),
            EstimateKind::Higher { n } => format!("higher_{n}"),
            EstimateKind::NegativePart => "negative_part".into(),
        }
    }

    /// Sobolev orders `(p, q, sup p, F, phi)`.
    fn orders(&self) -> (i32, i32, i32, i32, i32) {
        match *self {
            EstimateKind::Weak => (1, 0, 0, -1, 0),
            EstimateKind::Strong => (2, 1, 1, 0, 1),
            EstimateKind::Higher { n } => {
                let n = n as i32;
                (n + 2, n + 1, n + 1, n, n + 1)
            }
            EstimateKind::NegativePart => (0, 0, 0, 0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub kind: EstimateKind,
    pub lhs: f64,
    pub rhs_data: f64,
    /// `lhs / rhs_data`, with `0 / 0 = 0`.
    pub fitted_c: f64,
    pub ceiling: f64,
    pub pass: bool,
    /// `E sup_t |p(t)|^2` at the sup order.
    pub expectation_of_sup: f64,
    /// `sup_t E |p(t)|^2` at the sup order.
    pub sup_of_expectation: f64,
}

/// Per stored node of level `k`: the squared norm of `p` (component 0) or
/// the sum over `q` components.
fn level_norms(level: &PerLevel<Vec<CVec>>, basis: &SpectralBasis, order: i32) -> Vec<f64> {
    level
        .values()
        .map(|comps| comps.iter().map(|c| sobolev_norm_sq(basis, c.as_slice(), order)).sum())
        .collect()
}

fn expect(values: &[f64], weights: &[f64]) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// `E max_k values[k]` along tree paths; levels store one value or one per node.
pub(crate) fn expected_path_max(values: &[Vec<f64>], tree: &WienerTree) -> f64 {
    let mut running = values[0].clone();
    for (k, level) in values.iter().enumerate().skip(1) {
        if level.len() == 1 && running.len() == 1 {
            running[0] = running[0].max(level[0]);
            continue;
        }
        let c = tree.children_per_node();
        running = (0..tree.level_len(k))
            .map(|j| {
                let parent = if running.len() == 1 { running[0] } else { running[j / c] };
                parent.max(if level.len() == 1 { level[0] } else { level[j] })
            })
            .collect();
    }
    let n = values.len() - 1;
    let weights = if running.len() == 1 {
        vec![1.0]
    } else {
        tree.level_probabilities(n)
    };
    expect(&running, &weights)
}

/// `dt sum_k E |F(t_k)|_order^2` and `E |phi|_order^2`.
pub(crate) fn data_norms(
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    f_order: i32,
    phi_order: i32,
) -> Result<(f64, f64)> {
    let n = tree.n_steps();
    let dt = tree.dt();
    let mut f_total = 0.0;
    if !scenario.free_term.is_zero() {
        for k in 0..n {
            let t = k as f64 * dt;
            let e = if scenario.free_term.is_adapted() {
                let probs = tree.level_probabilities(k);
                (0..tree.level_len(k))
                    .into_par_iter()
                    .map(|j| {
                        let f = project_field(&scenario.free_term, t, &node_history(tree, k, j), basis);
                        probs[j] * sobolev_norm_sq(basis, f.as_slice(), f_order)
                    })
                    .collect::<Vec<_>>()
                    .iter()
                    .sum()
            } else {
                let f = project_field(&scenario.free_term, t, &node_history(tree, k, 0), basis);
                sobolev_norm_sq(basis, f.as_slice(), f_order)
            };
            f_total += dt * e;
        }
    }
    let phi = terminal_values(scenario, tree, basis)?;
    let phi_norms: Vec<f64> = phi
        .values()
        .map(|v| sobolev_norm_sq(basis, v.as_slice(), phi_order))
        .collect();
    let w = if phi.is_shared() {
        vec![1.0]
    } else {
        tree.level_probabilities(n)
    };
    Ok((f_total, expect(&phi_norms, &w)))
}

/// `(E int_0^T |u(t)|_order^2 dt)^{1/2}` on the left-point levels
/// `0..N`, summed over components.
pub fn triple_norm(field: &AdaptedField, tree: &WienerTree, order: i32) -> f64 {
    let dt = tree.dt();
    (0..tree.n_steps())
        .map(|k| {
            let level = field.level(k);
            dt * expect(
                &level_norms(level, field.basis(), order),
                &stored_weights(level, tree, k),
            )
        })
        .sum::<f64>()
        .sqrt()
}

/// Evaluates one a-priori estimate on a computed solution.
pub fn energy_audit(
    solution: &SolutionPair,
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    kind: EstimateKind,
    ceiling: f64,
) -> Result<EstimateReport> {
    check_compatible(scenario, tree, basis)?;
    let n = solution.n_steps;
    let dt = solution.dt;
    let (lhs, rhs, e_sup, sup_e) = if kind == EstimateKind::NegativePart {
        let pos = positivity_check(solution, scenario, tree, basis)?;
        let lhs = pos.negpart_per_level.iter().cloned().fold(0.0, f64::max);
        let rhs = pos.data_per_level.first().copied().unwrap_or(0.0);
        (lhs, rhs, lhs, lhs)
    } else {
        let (op, oq, osup, of, ophi) = kind.orders();
        let mut lhs = 0.0;
        let mut sup_levels = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let pl = solution.p.level(k);
            let w = stored_weights(pl, tree, k);
            if k < n {
                let ql = solution.q.level(k);
                let wq = stored_weights(ql, tree, k);
                lhs += dt * (expect(&level_norms(pl, basis, op), &w) + expect(&level_norms(ql, basis, oq), &wq));
            }
            sup_levels.push(level_norms(pl, basis, osup));
        }
        let e_sup = expected_path_max(&sup_levels, tree);
        let sup_e = (0..=n)
            .map(|k| expect(&sup_levels[k], &stored_weights(solution.p.level(k), tree, k)))
            .fold(0.0, f64::max);
        let (f, phi) = data_norms(scenario, tree, basis, of, ophi)?;
        (lhs + e_sup, f + phi, e_sup, sup_e)
    };
    let fitted_c = if rhs > 0.0 {
        lhs / rhs
    } else if lhs > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(EstimateReport {
        kind,
        lhs,
        rhs_data: rhs,
        fitted_c,
        ceiling,
        pass: fitted_c <= ceiling,
        expectation_of_sup: e_sup,
        sup_of_expectation: sup_e,
    })
}

/// Cumulative defect, per level `k`, of the discrete energy balance
/// `E|p_k|^2 = E|phi|^2 + sum_{j >= k} dt (2 E Re<p, L p + F> + 2 E Re<p_j, M q_j> - E|q_j|^2)`.
/// The `p`-only flux uses the trapezoidal rule over `t_j, t_{j+1}`; the terms
/// involving `q` use the left point, where `q` is defined.
pub fn ito_identity_check(
    solution: &SolutionPair,
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
) -> Result<Vec<f64>> {
    check_compatible(scenario, tree, basis)?;
    let n = solution.n_steps;
    let dt = solution.dt;
    let energy: Vec<f64> = (0..=n)
        .map(|k| {
            let pl = solution.p.level(k);
            expect(&level_norms(pl, basis, 0), &stored_weights(pl, tree, k))
        })
        .collect();
    // (2 E Re<p_k, L p_k + F_k>, 2 E Re<p_k, M q_k> - E|q_k|^2)
    let flux: Vec<(f64, f64)> = (0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            let pl = solution.p.level(k);
            let ql = (k < n).then(|| solution.q.level(k));
            let count = pl.stored().max(ql.map_or(1, |q| q.stored()));
            let weights = if count == 1 {
                vec![1.0]
            } else {
                tree.level_probabilities(k)
            };
            (0..count)
                .into_par_iter()
                .map(|j| {
                    let h = node_history(tree, k, j);
                    let p = &pl.get(j)[0];
                    let g = assemble_l(scenario, t, &h, basis) * p + project_field(&scenario.free_term, t, &h, basis);
                    let inner: Complex64 = p.iter().zip(g.iter()).map(|(a, b)| a.conj() * b).sum();
                    let mut qpart = 0.0;
                    if let Some(ql) = ql {
                        let q = ql.get(j);
                        let mut mq = CVec::zeros(p.len());
                        for (m, qk) in assemble_m(scenario, t, &h, basis).iter().zip(q) {
                            mq += m * qk;
                        }
                        let cross: Complex64 = p.iter().zip(mq.iter()).map(|(a, b)| a.conj() * b).sum();
                        let qn: f64 = q.iter().map(|v| v.norm_squared()).sum();
                        qpart = 2.0 * cross.re - qn;
                    }
                    (weights[j] * 2.0 * inner.re, weights[j] * qpart)
                })
                .collect::<Vec<_>>()
                .iter()
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1))
        })
        .collect();
    let mut out = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let step = energy[k] - energy[k + 1] - dt * (0.5 * (flux[k].0 + flux[k + 1].0) + flux[k].1);
        out[k] = out[k + 1] + step;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::CoefficientField;
    use crate::solver::{solve_tree, SchemeConfig};
    use crate::space::project_fn;
    use crate::wiener::build_tree;
    use std::f64::consts::PI;

    fn g(x: &[f64]) -> f64 {
        (PI * x[0]).cos() + 0.5 * (2.0 * PI * x[0]).sin()
    }

    #[test]
    fn triple_norm_of_constant_in_time_field() {
        let s = Scenario::zero_operator(1, 1, 2.0, 1.0).with_phi(CoefficientField::deterministic(|_, x| g(x)));
        let tree = build_tree(1, 4, 2, 2.0).unwrap();
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
        let n0 = sobolev_norm_sq(&basis, project_fn(&basis, g).coefficients.as_slice(), 0);
        assert!((triple_norm(&sol.p, &tree, 0) - (2.0 * n0).sqrt()).abs() < 1e-12);
        assert_eq!(triple_norm(&sol.q, &tree, 0), 0.0);
    }

    #[test]
    fn zero_data_gives_zero_constant() {
        let s = Scenario::heat(1, 1, 1.0, 1.0);
        let tree = build_tree(1, 3, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
        let r = energy_audit(&sol, &s, &tree, &basis, EstimateKind::Weak, 10.0).unwrap();
        assert_eq!((r.lhs, r.rhs_data, r.fitted_c), (0.0, 0.0, 0.0));
        assert!(r.pass);
    }

    #[test]
    fn constant_solution_closed_form() {
        let s = Scenario::zero_operator(1, 1, 2.0, 1.0).with_phi(CoefficientField::deterministic(|_, x| g(x)));
        let tree = build_tree(1, 4, 2, 2.0).unwrap();
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
        let gf = project_fn(&basis, g);
        let n0 = sobolev_norm_sq(&basis, gf.coefficients.as_slice(), 0);
        let n1 = sobolev_norm_sq(&basis, gf.coefficients.as_slice(), 1);
        let r = energy_audit(&sol, &s, &tree, &basis, EstimateKind::Weak, 10.0).unwrap();
        assert!((r.lhs - (2.0 * n1 + n0)).abs() < 1e-12);
        assert!((r.rhs_data - n0).abs() < 1e-12);
        assert!((r.expectation_of_sup - n0).abs() < 1e-12);
    }

    #[test]
    fn sign_flip_invariance() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.sigma[0][0] = CoefficientField::constant(0.3);
        s.phi = CoefficientField::adapted(|_, x, h| g(x) * (1.0 + h.w(0)));
        s.free_term = CoefficientField::deterministic(|_, x| (PI * x[0]).sin());
        let tree = build_tree(1, 3, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 4, 1.0).unwrap();
        let flipped = s.scaled_data(-1.0);
        for kind in [EstimateKind::Weak, EstimateKind::Strong, EstimateKind::Higher { n: 1 }] {
            let a = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
            let b = solve_tree(&flipped, &tree, &basis, &SchemeConfig::default()).unwrap();
            let ra = energy_audit(&a, &s, &tree, &basis, kind, 100.0).unwrap();
            let rb = energy_audit(&b, &flipped, &tree, &basis, kind, 100.0).unwrap();
            assert_eq!(ra.lhs, rb.lhs);
            assert_eq!(ra.rhs_data, rb.rhs_data);
        }
    }

    #[test]
    fn path_sup_differs_from_sup_of_expectation() {
        let s = Scenario::zero_operator(1, 1, 1.0, 1.0).with_phi(CoefficientField::adapted(|_, x, h| g(x) * h.w(0)));
        let tree = build_tree(1, 4, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
        let r = energy_audit(&sol, &s, &tree, &basis, EstimateKind::Weak, 100.0).unwrap();
        assert!(r.expectation_of_sup > r.sup_of_expectation);
    }

    #[test]
    fn ito_identity_exact_for_martingale() {
        let s = Scenario::zero_operator(1, 1, 1.0, 1.0).with_phi(CoefficientField::adapted(|_, x, h| g(x) * h.w(0)));
        for b in [2, 3, 5] {
            let tree = build_tree(1, 4, b, 1.0).unwrap();
            let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
            let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
            let d = ito_identity_check(&sol, &s, &tree, &basis).unwrap();
            assert!(d.iter().all(|v| v.abs() <= 1e-12), "{d:?}");
        }
        let zero = Scenario::zero_operator(1, 1, 1.0, 1.0);
        let tree = build_tree(1, 3, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(1, 2, 1.0).unwrap();
        let sol = solve_tree(&zero, &tree, &basis, &SchemeConfig::default()).unwrap();
        assert!(ito_identity_check(&sol, &zero, &tree, &basis)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn ito_defect_first_order_for_heat() {
        let s = Scenario::heat(1, 1, 1.0, 1.0).with_phi(CoefficientField::deterministic(|_, x| g(x)));
        let basis = SpectralBasis::new(1, 4, 1.0).unwrap();
        let mut defects = Vec::new();
        for n in [16, 32, 64] {
            let tree = WienerTree::symbolic(1, n, 2, 1.0).unwrap();
            let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default().with_theta(0.5)).unwrap();
            let d = ito_identity_check(&sol, &s, &tree, &basis).unwrap();
            defects.push(d.iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
        for w in defects.windows(2) {
            assert!((w[0] / w[1]).log2() >= 1.0, "{defects:?}");
        }
    }
}
