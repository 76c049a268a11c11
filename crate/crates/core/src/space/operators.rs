//! Pseudo-spectral assembly of the drift operator `L` and the operators `M^k`
//! that act on the martingale integrand.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{grid_points, raw_lookup, raw_transform, sobolev_norm_sq, SpatialField, SpectralBasis};
use crate::scenario::{CoefficientField, EquationForm, Scenario, WienerHistory};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Matrix of `u -> P_M(f u)` from samples of `f` on the coefficient grid.
pub fn multiplication_matrix(basis: &SpectralBasis, samples: &[f64]) -> DMatrix<Complex64> {
    let g = basis.coefficient_grid_len();
    let raw = raw_transform(samples, basis.dim_x(), g);
    let n = basis.total_modes();
    let modes: Vec<Vec<i64>> = (0..n).map(|m| basis.mode(m)).collect();
    let mut delta = vec![0i64; basis.dim_x()];
    DMatrix::from_fn(n, n, |r, c| {
        for (d, (a, b)) in delta.iter_mut().zip(modes[r].iter().zip(&modes[c])) {
            *d = a - b;
        }
        raw_lookup(&raw, g, &delta)
    })
}

/// Multiplication operator of a field at `(t, history)`; `None` when zero.
fn field_matrix(
    basis: &SpectralBasis,
    points: &[Vec<f64>],
    field: &CoefficientField,
    t: f64,
    history: &WienerHistory,
) -> Option<DMatrix<Complex64>> {
    if field.is_zero() {
        return None;
    }
    let n = basis.total_modes();
    if let Some(c) = field.as_constant() {
        return Some(DMatrix::from_diagonal_element(n, n, Complex64::new(c, 0.0)));
    }
    let samples: Vec<f64> = points.iter().map(|x| field.eval(t, x, history)).collect();
    Some(multiplication_matrix(basis, &samples))
}

pub(crate) fn coefficient_points(basis: &SpectralBasis) -> Vec<Vec<f64>> {
    grid_points(basis.dim_x(), basis.coefficient_grid_len(), basis.domain_halfwidth())
}

/// `k_i` for every mode.
fn wavenumbers(basis: &SpectralBasis) -> Vec<Vec<f64>> {
    (0..basis.total_modes()).map(|m| basis.wavenumber(m)).collect()
}

/// Scales column `c` by `s[c]`.
fn scale_columns(m: &mut DMatrix<Complex64>, s: impl Fn(usize) -> Complex64) {
    for c in 0..m.ncols() {
        let f = s(c);
        for v in m.column_mut(c).iter_mut() {
            *v *= f;
        }
    }
}

fn scale_rows(m: &mut DMatrix<Complex64>, s: impl Fn(usize) -> Complex64) {
    for r in 0..m.nrows() {
        let f = s(r);
        for v in m.row_mut(r).iter_mut() {
            *v *= f;
        }
    }
}

/// Drift operator of the scenario's form at `(t, history)`.
pub fn assemble_l(scenario: &Scenario, t: f64, history: &WienerHistory, basis: &SpectralBasis) -> DMatrix<Complex64> {
    let n = basis.total_modes();
    let d = scenario.dim_x;
    let points = coefficient_points(basis);
    let ks = wavenumbers(basis);
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..d {
        for j in 0..d {
            let Some(mut m) = field_matrix(basis, &points, &scenario.a[i][j], t, history) else {
                continue;
            };
            match scenario.form {
                EquationForm::NonDivergence => {
                    scale_columns(&mut m, |c| Complex64::new(-ks[c][i] * ks[c][j], 0.0));
                }
                EquationForm::Divergence => {
                    scale_rows(&mut m, |r| I * ks[r][i]);
                    scale_columns(&mut m, |c| I * ks[c][j]);
                }
            }
            out += m;
        }
    }
    for i in 0..d {
        if let Some(mut m) = field_matrix(basis, &points, &scenario.b[i], t, history) {
            scale_columns(&mut m, |c| I * ks[c][i]);
            out += m;
        }
    }
    if let Some(m) = field_matrix(basis, &points, &scenario.c, t, history) {
        out -= m;
    }
    out
}

/// The `d1` operators `M^k` at `(t, history)`.
pub fn assemble_m(
    scenario: &Scenario,
    t: f64,
    history: &WienerHistory,
    basis: &SpectralBasis,
) -> Vec<DMatrix<Complex64>> {
    let n = basis.total_modes();
    let points = coefficient_points(basis);
    let ks = wavenumbers(basis);
    (0..scenario.dim_w)
        .map(|k| {
            let mut out = DMatrix::<Complex64>::zeros(n, n);
            for i in 0..scenario.dim_x {
                let Some(mut m) = field_matrix(basis, &points, &scenario.sigma[i][k], t, history) else {
                    continue;
                };
                match scenario.form {
                    EquationForm::NonDivergence => scale_columns(&mut m, |c| I * ks[c][i]),
                    EquationForm::Divergence => scale_rows(&mut m, |r| I * ks[r][i]),
                }
                out += m;
            }
            if let Some(m) = field_matrix(basis, &points, &scenario.nu[k], t, history) {
                out += m;
            }
            out
        })
        .collect()
}

/// `L` and `M^1..M^d1` at one `(t, node)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrices {
    pub l_mat: DMatrix<Complex64>,
    pub m_mats: Vec<DMatrix<Complex64>>,
    pub form: EquationForm,
}

impl OperatorMatrices {
    pub fn assemble(scenario: &Scenario, t: f64, history: &WienerHistory, basis: &SpectralBasis) -> Self {
        Self {
            l_mat: assemble_l(scenario, t, history, basis),
            m_mats: assemble_m(scenario, t, history, basis),
            form: scenario.form,
        }
    }

    /// `2 Re<x, Lx> + sum_k |M^k* x|^2`.
    pub fn coercivity_form(&self, x: &DVector<Complex64>) -> f64 {
        let lx = &self.l_mat * x;
        let mut q = 2.0 * x.dotc(&lx).re;
        for m in &self.m_mats {
            q += (m.adjoint() * x).norm_squared();
        }
        q
    }
}

/// Outcome of [`coercivity_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityEstimate {
    pub lambda: f64,
    pub big_lambda: f64,
    /// Every trial satisfies the inequality with the reported pair.
    pub ok: bool,
    /// `lambda > 0`: the operator pair is coercive on the trials.
    pub coercive: bool,
}

/// Fits `2<x,Lx> + |M* x|^2 <= -lambda |x|_1^2 + Lambda |x|_0^2` over the
/// trial fields by least squares, then raises `Lambda` to the smallest value
/// that makes every trial inequality hold.
pub fn coercivity_probe(ops: &OperatorMatrices, trials: &[SpatialField]) -> CoercivityEstimate {
    assert!(!trials.is_empty(), "coercivity probe needs trial fields");
    let rows: Vec<(f64, f64, f64)> = trials
        .iter()
        .map(|f| {
            let c = f.coefficients.as_slice();
            (
                ops.coercivity_form(&f.coefficients),
                sobolev_norm_sq(&f.basis, c, 1),
                sobolev_norm_sq(&f.basis, c, 0),
            )
        })
        .collect();
    // Unknowns (lambda, Lambda) with design row (-v, h).
    let (mut s_vv, mut s_vh, mut s_hh, mut s_qv, mut s_qh) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(q, v, h) in &rows {
        s_vv += v * v;
        s_vh += v * h;
        s_hh += h * h;
        s_qv += q * v;
        s_qh += q * h;
    }
    let det = s_vv * s_hh - s_vh * s_vh;
    let scale = s_vv * s_hh;
    let (lambda, fitted) = if det.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        ((-s_qv * s_hh + s_qh * s_vh) / det, (s_vv * s_qh - s_vh * s_qv) / det)
    } else if s_vv > 0.0 {
        (-s_qv / s_vv, 0.0)
    } else {
        (0.0, 0.0)
    };
    let needed = rows
        .iter()
        .filter(|r| r.2 > 0.0)
        .map(|&(q, v, h)| (q + lambda * v) / h)
        .fold(f64::NEG_INFINITY, f64::max);
    let big_lambda = fitted.max(needed);
    let slack = |q: f64, v: f64, h: f64| 1e-10 * (q.abs() + lambda.abs() * v + big_lambda.abs() * h);
    let ok = rows
        .iter()
        .all(|&(q, v, h)| q <= -lambda * v + big_lambda * h + slack(q, v, h));
    CoercivityEstimate {
        lambda,
        big_lambda,
        ok,
        coercive: lambda > 1e-12,
    }
}
