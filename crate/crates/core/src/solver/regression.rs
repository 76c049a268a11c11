//! Least-squares Monte Carlo version of the backward recursion: conditional
//! expectations become cross-sectional regressions on polynomials of the
//! current Wiener state.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use super::{project_field, step, CVec, MCoupling, NodeOps, Op, SchemeConfig};
use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::space::{assemble_l, assemble_m, SpatialField, SpectralBasis};
use crate::wiener::PathEnsemble;

/// Per-path solution of the regression scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSolution {
    pub basis: SpectralBasis,
    pub n_steps: usize,
    pub n_paths: usize,
    pub dt: f64,
    /// Polynomial degree of the regression basis.
    pub degree: usize,
    /// `p[level][path]`.
    pub p: Vec<Vec<CVec>>,
    /// `q[level][path][component]`.
    pub q: Vec<Vec<Vec<CVec>>>,
}

impl RegressionSolution {
    /// Path average of `p` at a level.
    pub fn mean_p(&self, level: usize) -> SpatialField {
        let n = self.basis.total_modes();
        let mut acc = CVec::zeros(n);
        for v in &self.p[level] {
            acc += v;
        }
        SpatialField {
            basis: self.basis.clone(),
            coefficients: acc / Complex64::new(self.n_paths as f64, 0.0),
        }
    }

    /// Standard error of the path average of `p` at a level, in the
    /// coefficient `l2` norm.
    pub fn stderr_p(&self, level: usize) -> f64 {
        let mean = self.mean_p(level).coefficients;
        let var: f64 =
            self.p[level].iter().map(|v| (v - &mean).norm_squared()).sum::<f64>() / (self.n_paths.max(2) - 1) as f64;
        (var / self.n_paths as f64).sqrt()
    }

    pub fn q_field(&self, level: usize, path: usize, component: usize) -> SpatialField {
        SpatialField {
            basis: self.basis.clone(),
            coefficients: self.q[level][path][component].clone(),
        }
    }
}

/// Multi-indices of total degree at most `degree` in `vars` variables.
fn monomials(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; vars]];
    for total in 1..=degree {
        let mut current = vec![0; vars];
        fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos + 1 == cur.len() {
                cur[pos] = left;
                out.push(cur.clone());
                return;
            }
            for v in (0..=left).rev() {
                cur[pos] = v;
                rec(pos + 1, left - v, cur, out);
            }
        }
        rec(0, total, &mut current, &mut out);
    }
    out
}

/// Least-squares projector onto the span of the design columns.
struct Projector {
    design: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Projector {
    fn new(design: DMatrix<f64>, step: usize) -> Result<Self> {
        let qr = design.clone().qr();
        let r = qr.r();
        let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        if design.nrows() < design.ncols() || diag.iter().any(|&d| !(d > 1e-10 * max.max(1e-300))) {
            return Err(Error::RankDeficient { step });
        }
        Ok(Self { design, q: qr.q(), r })
    }

    /// Fitted values of every column of `y` (`paths x cols`).
    fn fit(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let qty = self.q.transpose() * y;
        let coef = self.r.solve_upper_triangular(&qty).expect("checked rank");
        &self.design * coef
    }

    /// Fitted complex vectors, one per path.
    fn fit_complex(&self, rows: &[CVec]) -> Vec<CVec> {
        let paths = rows.len();
        let n = rows[0].len();
        let y = DMatrix::from_fn(
            paths,
            2 * n,
            |i, j| {
                if j < n {
                    rows[i][j].re
                } else {
                    rows[i][j - n].im
                }
            },
        );
        let f = self.fit(&y);
        (0..paths)
            .map(|i| CVec::from_iterator(n, (0..n).map(|j| Complex64::new(f[(i, j)], f[(i, j + n)]))))
            .collect()
    }
}

/// Backward recursion on a path ensemble with regression-based conditional
/// expectations. `degree` is the total polynomial degree of the regression
/// basis in the standardized Wiener state `W_t / sqrt(t)`; the first step
/// uses constants only. Only the explicit `M q` coupling is available here.
pub fn solve_regression(
    scenario: &Scenario,
    ensemble: &PathEnsemble,
    basis: &SpectralBasis,
    degree: usize,
    scheme: &SchemeConfig,
) -> Result<RegressionSolution> {
    scenario.check_structure()?;
    scheme.check()?;
    if scheme.m_coupling != MCoupling::Explicit {
        return Err(Error::Precondition(
            "the regression solver supports the explicit M q coupling only".into(),
        ));
    }
    if ensemble.dim_w != scenario.dim_w {
        return Err(Error::Structural(
            "ensemble and scenario Wiener dimensions differ".into(),
        ));
    }
    let horizon = ensemble.dt * ensemble.n_steps as f64;
    if (horizon - scenario.horizon).abs() > 1e-12 * scenario.horizon {
        return Err(Error::Structural(
            "ensemble horizon differs from the scenario horizon".into(),
        ));
    }
    let n = ensemble.n_steps;
    let paths = ensemble.n_paths;
    let d1 = ensemble.dim_w;
    let n_modes = basis.total_modes();
    let stored = (n as u128 + 1) * paths as u128 * n_modes as u128 * (1 + d1 as u128);
    if stored > super::STORAGE_BUDGET {
        return Err(Error::Budget {
            what: "stored regression coefficients",
            required: stored,
            budget: super::STORAGE_BUDGET,
        });
    }
    let dt = ensemble.dt;
    let theta = scheme.theta;
    let t_end = scenario.horizon;
    let terminal: Vec<CVec> = if scenario.phi.is_adapted() {
        (0..paths)
            .into_par_iter()
            .map(|i| project_field(&scenario.phi, t_end, &ensemble.history(i, n), basis))
            .collect()
    } else {
        vec![project_field(&scenario.phi, t_end, &ensemble.history(0, n), basis); paths]
    };
    let ops_adapted = !scenario.operators_deterministic();
    let src_adapted = scenario.free_term.is_adapted();
    let make_ops = |k: usize, path: usize| -> Result<NodeOps> {
        let h = ensemble.history(path, k);
        let t = k as f64 * dt;
        let l = Op::Dense(assemble_l(scenario, t, &h, basis));
        let m = assemble_m(scenario, t, &h, basis).into_iter().map(Op::Dense).collect();
        NodeOps::new(l, m, theta, dt).ok_or(Error::Singular { level: k, node: path })
    };

    let mut p_levels: Vec<Vec<CVec>> = vec![Vec::new(); n + 1];
    let mut q_levels: Vec<Vec<Vec<CVec>>> = vec![Vec::new(); n];
    p_levels[n] = terminal;
    for k in (0..n).rev() {
        let vars = if k == 0 { Vec::new() } else { monomials(d1, degree) };
        let n_basis = vars.len().max(1);
        let scale = if k == 0 { 1.0 } else { (k as f64 * dt).sqrt() };
        let design = DMatrix::from_fn(paths, n_basis, |i, b| {
            if k == 0 {
                return 1.0;
            }
            let w = ensemble.w_at(i, k);
            vars[b]
                .iter()
                .zip(&w)
                .map(|(&e, wv)| (wv / scale).powi(e as i32))
                .product()
        });
        let proj = Projector::new(design, k)?;
        let next = &p_levels[k + 1];
        let e = proj.fit_complex(next);
        let q: Vec<Vec<CVec>> = {
            let per_comp: Vec<Vec<CVec>> = (0..d1)
                .map(|l| {
                    let rows: Vec<CVec> = next
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * Complex64::new(ensemble.increment(i, k)[l] / dt, 0.0))
                        .collect();
                    proj.fit_complex(&rows)
                })
                .collect();
            (0..paths)
                .map(|i| per_comp.iter().map(|c| c[i].clone()).collect())
                .collect()
        };
        let shared_ops = if ops_adapted { None } else { Some(make_ops(k, 0)?) };
        let shared_src = if src_adapted {
            None
        } else {
            Some(project_field(
                &scenario.free_term,
                k as f64 * dt,
                &ensemble.history(0, k),
                basis,
            ))
        };
        let p: Vec<CVec> = (0..paths)
            .into_par_iter()
            .map(|i| -> Result<CVec> {
                let own;
                let ops = match &shared_ops {
                    Some(o) => o,
                    None => {
                        own = make_ops(k, i)?;
                        &own
                    }
                };
                let src = match &shared_src {
                    Some(s) => s.clone(),
                    None => project_field(&scenario.free_term, k as f64 * dt, &ensemble.history(i, k), basis),
                };
                step(ops, &e[i], &q[i], &src, theta, dt).ok_or(Error::Singular { level: k, node: i })
            })
            .collect::<Result<Vec<_>>>()?;
        p_levels[k] = p;
        q_levels[k] = q;
    }
    Ok(RegressionSolution {
        basis: basis.clone(),
        n_steps: n,
        n_paths: paths,
        dt,
        degree,
        p: p_levels,
        q: q_levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::CoefficientField;
    use crate::solver::solve_tree;
    use crate::space::{project_fn, sobolev_norm};
    use crate::wiener::{build_tree, sample_paths};
    use std::f64::consts::PI;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 0).len(), 1);
    }

    #[test]
    fn constant_free_term_is_exact() {
        let s = Scenario::zero_operator(1, 1, 1.0, 1.0).with_free_term(CoefficientField::constant(1.0));
        let basis = SpectralBasis::new(1, 2, 1.0).unwrap();
        let ens = sample_paths(1, 4, 200, 1.0, 3).unwrap();
        let sol = solve_regression(&s, &ens, &basis, 2, &SchemeConfig::default()).unwrap();
        let zero = basis.mode_index(&[0]).unwrap();
        for k in 0..=4 {
            let expect = 1.0 - k as f64 * 0.25;
            for v in &sol.p[k] {
                assert!((v[zero].re - expect).abs() < 1e-12);
                let others: f64 = (0..basis.total_modes())
                    .filter(|&m| m != zero)
                    .map(|m| v[m].norm())
                    .sum();
                assert!(others < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_agrees_with_tree() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.a[0][0] = CoefficientField::deterministic(|_, x| 0.5 + 0.1 * (PI * x[0]).sin());
        s.phi = CoefficientField::deterministic(|_, x| (PI * x[0]).cos());
        let basis = SpectralBasis::new(1, 4, 1.0).unwrap();
        let ens = sample_paths(1, 4, 500, 1.0, 1).unwrap();
        let reg = solve_regression(&s, &ens, &basis, 1, &SchemeConfig::default()).unwrap();
        let tree = build_tree(1, 4, 2, 1.0).unwrap();
        let sol = solve_tree(&s, &tree, &basis, &SchemeConfig::default()).unwrap();
        let diff = (&reg.mean_p(0).coefficients - &sol.p0().coefficients).norm();
        assert!(diff <= (3.0 * reg.stderr_p(0)).max(1e-10));
    }

    #[test]
    fn martingale_integrand_recovered() {
        let g = |x: &[f64]| (PI * x[0]).cos() + 0.3;
        let s =
            Scenario::zero_operator(1, 1, 1.0, 1.0).with_phi(CoefficientField::adapted(move |_, x, h| g(x) * h.w(0)));
        let basis = SpectralBasis::new(1, 2, 1.0).unwrap();
        let ens = sample_paths(1, 4, 10_000, 1.0, 7).unwrap();
        let reg = solve_regression(&s, &ens, &basis, 1, &SchemeConfig::default()).unwrap();
        let pg = project_fn(&basis, g);
        let mut worst = 0.0f64;
        for k in 0..4 {
            for i in (0..10_000).step_by(997) {
                let q = reg.q_field(k, i, 0);
                let err = SpatialField {
                    basis: basis.clone(),
                    coefficients: &q.coefficients - &pg.coefficients,
                };
                worst = worst.max(sobolev_norm(&err, 0) / sobolev_norm(&pg, 0));
            }
        }
        assert!(worst <= 0.05, "{worst}");
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let s = Scenario::zero_operator(1, 1, 1.0, 1.0);
        let basis = SpectralBasis::new(1, 1, 1.0).unwrap();
        let ens = sample_paths(1, 3, 2, 1.0, 0).unwrap();
        match solve_regression(&s, &ens, &basis, 3, &SchemeConfig::default()) {
            Err(Error::RankDeficient { step }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
    }
}
