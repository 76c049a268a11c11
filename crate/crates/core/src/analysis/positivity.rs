use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::scenario::{CoefficientField, Scenario};
use crate::solver::{check_compatible, node_history, stored_weights, SolutionPair};
use crate::space::{reconstruct, SpectralBasis};
use crate::wiener::WienerTree;

/// Minimum of `p` and the negative-part envelope
/// `E int (p^-)^2 (t) <= e^{C (T - t)} [E int (phi^-)^2 + E int_t^T int (F^-)^2]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    /// Over every stored node and collocation point.
    pub min_value: f64,
    /// `E int (p^-)^2` per level.
    pub negpart_per_level: Vec<f64>,
    /// Bracketed data term per level.
    pub data_per_level: Vec<f64>,
    /// Smallest `C >= 0` for which the envelope holds at every level `t < T`;
    /// infinite when some level has negative part but no negative data.
    pub fitted_c: f64,
    /// Least-squares slope of `ln(neg / data)` against `T - t`.
    pub regression_c: f64,
    /// `E int (p_N^-)^2 - E int (phi^-)^2`; nonzero through projection only.
    pub terminal_excess: f64,
    pub envelope_holds: bool,
}

fn neg_sq_integral(values: &[f64], cell: f64) -> f64 {
    cell * values.iter().map(|v| v.min(0.0).powi(2)).sum::<f64>()
}

/// `E int (f^-)^2` of a field at level `k`, sampled pointwise on the grid.
fn field_negpart(field: &CoefficientField, t: f64, tree: &WienerTree, k: usize, basis: &SpectralBasis) -> f64 {
    if field.is_zero() {
        return 0.0;
    }
    let points = basis.grid_points();
    let cell = basis.cell_volume();
    let at = |j: usize| {
        let h = node_history(tree, k, j);
        let vals: Vec<f64> = points.iter().map(|x| field.eval(t, x, &h)).collect();
        neg_sq_integral(&vals, cell)
    };
    if !field.is_adapted() || !tree.is_enumerable() {
        return at(0);
    }
    let probs = tree.level_probabilities(k);
    let parts: Vec<f64> = (0..tree.level_len(k))
        .into_par_iter()
        .map(|j| probs[j] * at(j))
        .collect();
    parts.iter().sum()
}

/// Checks positivity of `p` on the collocation grid and fits the
/// negative-part envelope.
pub fn positivity_check(
    solution: &SolutionPair,
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
) -> Result<PositivityReport> {
    check_compatible(scenario, tree, basis)?;
    let n = solution.n_steps;
    let dt = solution.dt;
    let cell = basis.cell_volume();
    let mut min_value = f64::INFINITY;
    let mut negpart = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let level = solution.p.level(k);
        let weights = stored_weights(level, tree, k);
        let per_node: Vec<(f64, f64)> = (0..level.stored())
            .into_par_iter()
            .map(|j| {
                let vals = reconstruct(&solution.p.field(k, j, 0));
                let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                (min, neg_sq_integral(&vals, cell))
            })
            .collect();
        for (m, _) in &per_node {
            min_value = min_value.min(*m);
        }
        negpart.push(per_node.iter().zip(&weights).map(|((_, v), w)| v * w).sum());
    }

    let phi_neg = field_negpart(&scenario.phi, tree.horizon(), tree, n, basis);
    let f_neg: Vec<f64> = (0..n)
        .map(|k| field_negpart(&scenario.free_term, k as f64 * dt, tree, k, basis))
        .collect();
    let mut data = vec![0.0; n + 1];
    data[n] = phi_neg;
    for k in (0..n).rev() {
        data[k] = data[k + 1] + dt * f_neg[k];
    }

    let scale = negpart.iter().chain(&data).cloned().fold(0.0, f64::max);
    let floor = 1e-14 * scale.max(1e-300);
    let mut fitted_c: f64 = 0.0;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for k in 0..n {
        let tau = tree.horizon() - k as f64 * dt;
        if negpart[k] <= floor {
            continue;
        }
        if data[k] <= 0.0 {
            fitted_c = f64::INFINITY;
            continue;
        }
        let y = (negpart[k] / data[k]).ln();
        fitted_c = fitted_c.max(y / tau);
        sxy += tau * y;
        sxx += tau * tau;
    }
    let regression_c = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(PositivityReport {
        min_value,
        terminal_excess: negpart[n] - data[n],
        negpart_per_level: negpart,
        data_per_level: data,
        envelope_holds: fitted_c.is_finite(),
        fitted_c,
        regression_c,
    })
}
