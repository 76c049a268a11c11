//! Constant-coefficient spectral solver, Picard iteration around frozen
//! coefficients, and the continuation in the leading coefficients.
//!
//! With `a`, `sigma` independent of `x` and no lower-order terms every
//! Fourier mode decouples into the scalar backward equation
//! `dp = -(-k.a k p + i sigma^{ik} k_i q^k + F) dt + q^k dW^k`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::{CoefficientField, Scenario, WienerHistory};
use crate::solver::{
    backward, check_compatible, into_fields, project_field, terminal_values, theta_state, AdaptedField, CVec,
    MCoupling, Op, PerLevel, SchemeConfig, SolutionPair, StepInputs,
};
use crate::space::{assemble_l, assemble_m, sobolev_norm_sq, SpectralBasis};
use crate::wiener::WienerTree;

/// Scenario whose leading coefficients do not depend on `x`.
#[derive(Debug, Clone)]
pub struct FrozenScenario {
    scenario: Scenario,
    /// Point at which `a` and `sigma` are read.
    x0: Vec<f64>,
}

impl FrozenScenario {
    /// Accepts a scenario with constant `a` and `sigma`.
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.check_structure()?;
        if !scenario.leading_constant() {
            return Err(Error::Precondition(
                "a and sigma must be independent of x; use FrozenScenario::freeze".into(),
            ));
        }
        let x0 = vec![0.0; scenario.dim_x];
        Ok(Self { scenario, x0 })
    }

    /// Replaces `a` and `sigma` by their values at `x0`.
    pub fn freeze(scenario: &Scenario, x0: &[f64]) -> Result<Self> {
        scenario.check_structure()?;
        if x0.len() != scenario.dim_x {
            return Err(Error::Structural("freeze point has the wrong dimension".into()));
        }
        Ok(Self {
            scenario: scenario.frozen_at(x0),
            x0: x0.to_vec(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn a0(&self, t: f64, h: &WienerHistory) -> DMatrix<f64> {
        self.scenario.eval_a(t, &self.x0, h)
    }

    pub fn sigma0(&self, t: f64, h: &WienerHistory) -> DMatrix<f64> {
        self.scenario.eval_sigma(t, &self.x0, h)
    }

    fn leading_adapted(&self) -> bool {
        self.scenario
            .a
            .iter()
            .flatten()
            .chain(self.scenario.sigma.iter().flatten())
            .any(CoefficientField::is_adapted)
    }

    /// Diagonal symbols `-k.a0 k` and `i sigma0^{ik} k_i`.
    fn symbols(&self, t: f64, h: &WienerHistory, basis: &SpectralBasis) -> (Op, Vec<Op>) {
        let a = self.a0(t, h);
        let s = self.sigma0(t, h);
        let d = basis.dim_x();
        let d1 = s.ncols();
        let n = basis.total_modes();
        let mut l = CVec::zeros(n);
        let mut m = vec![CVec::zeros(n); d1];
        for idx in 0..n {
            let k = basis.wavenumber(idx);
            let mut kak = 0.0;
            for i in 0..d {
                for j in 0..d {
                    kak += k[i] * a[(i, j)] * k[j];
                }
            }
            l[idx] = Complex64::new(-kak, 0.0);
            for (c, mc) in m.iter_mut().enumerate() {
                let sk: f64 = (0..d).map(|i| s[(i, c)] * k[i]).sum();
                mc[idx] = Complex64::new(0.0, sk);
            }
        }
        (Op::Diagonal(l), m.into_iter().map(Op::Diagonal).collect())
    }
}

struct FrozenInputs<'a> {
    frozen: &'a FrozenScenario,
    basis: &'a SpectralBasis,
    dt: f64,
}

impl StepInputs for FrozenInputs<'_> {
    fn ops(&self, level: usize, history: &WienerHistory) -> (Op, Vec<Op>) {
        self.frozen.symbols(level as f64 * self.dt, history, self.basis)
    }

    fn ops_adapted(&self) -> bool {
        self.frozen.leading_adapted()
    }

    fn source(&self, level: usize, _node: usize, history: &WienerHistory) -> CVec {
        project_field(
            &self.frozen.scenario.free_term,
            level as f64 * self.dt,
            history,
            self.basis,
        )
    }

    fn source_adapted(&self) -> bool {
        self.frozen.scenario.free_term.is_adapted()
    }
}

/// Mode-by-mode backward solve of a frozen problem without lower-order terms.
pub fn solve_frozen(
    frozen: &FrozenScenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    scheme: &SchemeConfig,
) -> Result<SolutionPair> {
    let s = &frozen.scenario;
    if !s.lower_order_zero() {
        return Err(Error::Precondition("solve_frozen needs b = 0, c = 0 and nu = 0".into()));
    }
    check_compatible(s, tree, basis)?;
    scheme.check()?;
    let inputs = FrozenInputs {
        frozen,
        basis,
        dt: tree.dt(),
    };
    let terminal = terminal_values(s, tree, basis)?;
    let (p, q) = backward(&inputs, tree, basis.total_modes(), terminal, scheme)?;
    let (p, q) = into_fields(basis, p, q, tree.dim_w());
    Ok(SolutionPair {
        p,
        q,
        scheme: *scheme,
        dt: tree.dt(),
        n_steps: tree.n_steps(),
    })
}

/// Outcome of a Picard iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub iterations: usize,
    /// Ratio of successive distances in the mixed norm.
    pub contraction_ratios: Vec<f64>,
    pub converged: bool,
    /// Last successive distance.
    pub final_defect: f64,
}

impl IterationReport {
    fn summary(&self) -> String {
        format!(
            "{} iterations, last distance {:e}, last ratio {}",
            self.iterations,
            self.final_defect,
            self.contraction_ratios
                .last()
                .map_or_else(|| "n/a".to_string(), |r| format!("{r:.4}"))
        )
    }
}

/// Distance `(dt sum_k E[|u|_{H^2}^2 + sum |v^k|_{H^1}^2])^{1/2}` between two
/// solution pairs on the same tree.
pub fn mixed_norm_distance(a: &SolutionPair, b: &SolutionPair, tree: &WienerTree) -> Result<f64> {
    let dp = a.p.combine(1.0, &b.p, -1.0)?;
    let dq = a.q.combine(1.0, &b.q, -1.0)?;
    let basis = a.basis();
    let mut total = 0.0;
    for k in 0..a.n_steps {
        let stored = dp.level(k).stored().max(dq.level(k).stored());
        let probs = if stored == 1 {
            vec![1.0]
        } else {
            tree.level_probabilities(k)
        };
        for (j, w) in probs.iter().enumerate() {
            let u = sobolev_norm_sq(basis, dp.value(k, j)[0].as_slice(), 2);
            let v: f64 = dq
                .value(k, j)
                .iter()
                .map(|c| sobolev_norm_sq(basis, c.as_slice(), 1))
                .sum();
            total += w * (u + v);
        }
    }
    Ok((a.dt * total).sqrt())
}

fn zero_pair(basis: &SpectralBasis, tree: &WienerTree, scheme: &SchemeConfig) -> SolutionPair {
    let n = tree.n_steps();
    let z = CVec::zeros(basis.total_modes());
    SolutionPair {
        p: AdaptedField::new(
            basis.clone(),
            1,
            (0..=n).map(|_| PerLevel::Shared(vec![z.clone()])).collect(),
        ),
        q: AdaptedField::new(
            basis.clone(),
            tree.dim_w(),
            (0..n)
                .map(|_| PerLevel::Shared(vec![z.clone(); tree.dim_w()]))
                .collect(),
        ),
        scheme: *scheme,
        dt: tree.dt(),
        n_steps: n,
    }
}

/// Operator the Picard map inverts.
enum Base<'a> {
    Frozen(&'a FrozenScenario),
    Galerkin(&'a Scenario),
}

/// `T(u, v)`: solve with the base operator and source
/// `F + (L - L_b)[theta u + (1 - theta) E u+] + (M - M_b) v`.
struct PicardInputs<'a> {
    target: &'a Scenario,
    base: &'a Base<'a>,
    prev: &'a SolutionPair,
    tree: &'a WienerTree,
    basis: &'a SpectralBasis,
    dt: f64,
    theta: f64,
}

impl PicardInputs<'_> {
    fn base_ops(&self, level: usize, history: &WienerHistory) -> (Op, Vec<Op>) {
        let t = level as f64 * self.dt;
        match self.base {
            Base::Frozen(f) => f.symbols(t, history, self.basis),
            Base::Galerkin(s) => (
                Op::Dense(assemble_l(s, t, history, self.basis)),
                assemble_m(s, t, history, self.basis)
                    .into_iter()
                    .map(Op::Dense)
                    .collect(),
            ),
        }
    }
}

impl StepInputs for PicardInputs<'_> {
    fn ops(&self, level: usize, history: &WienerHistory) -> (Op, Vec<Op>) {
        self.base_ops(level, history)
    }

    fn ops_adapted(&self) -> bool {
        match self.base {
            Base::Frozen(f) => f.leading_adapted(),
            Base::Galerkin(s) => !s.operators_deterministic(),
        }
    }

    fn source(&self, level: usize, node: usize, history: &WienerHistory) -> CVec {
        let t = level as f64 * self.dt;
        let (lb, mb) = self.base_ops(level, history);
        let lt = assemble_l(self.target, t, history, self.basis);
        let mt = assemble_m(self.target, t, history, self.basis);
        let mix = theta_state(self.prev, self.tree, level, node, self.theta);
        let mut out = project_field(&self.target.free_term, t, history, self.basis);
        out += &lt * &mix - lb.apply(&mix);
        for ((m, b), v) in mt.iter().zip(&mb).zip(self.prev.q.value(level, node)) {
            out += m * v - b.apply(v);
        }
        out
    }

    fn source_adapted(&self) -> bool {
        let prev_adapted = (0..self.prev.p.n_levels()).any(|k| !self.prev.p.is_collapsed(k))
            || (0..self.prev.q.n_levels()).any(|k| !self.prev.q.is_collapsed(k));
        prev_adapted || self.target.free_term.is_adapted() || !self.target.operators_deterministic()
    }
}

/// Picard iteration options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub scheme: SchemeConfig,
}

impl PicardOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            scheme: SchemeConfig::default(),
        }
    }

    fn check(&self) -> Result<()> {
        self.scheme.check()?;
        if self.scheme.m_coupling != MCoupling::Explicit {
            return Err(Error::Precondition(
                "Picard iteration supports the explicit M coupling only".into(),
            ));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Structural("tol must be positive and max_iter >= 1".into()));
        }
        Ok(())
    }
}

/// Runs the Picard map from `start` and always returns the last iterate.
fn picard(
    target: &Scenario,
    base: &Base,
    start: SolutionPair,
    tree: &WienerTree,
    basis: &SpectralBasis,
    opts: &PicardOptions,
) -> Result<(SolutionPair, IterationReport)> {
    let terminal = terminal_values(target, tree, basis)?;
    let mut z = start;
    let mut report = IterationReport {
        iterations: 0,
        contraction_ratios: Vec::new(),
        converged: false,
        final_defect: f64::INFINITY,
    };
    let mut last: Option<f64> = None;
    for it in 1..=opts.max_iter {
        let inputs = PicardInputs {
            target,
            base,
            prev: &z,
            tree,
            basis,
            dt: tree.dt(),
            theta: opts.scheme.theta,
        };
        let (p, q) = backward(&inputs, tree, basis.total_modes(), terminal.clone(), &opts.scheme)?;
        let (p, q) = into_fields(basis, p, q, tree.dim_w());
        let next = SolutionPair {
            p,
            q,
            scheme: opts.scheme,
            dt: tree.dt(),
            n_steps: tree.n_steps(),
        };
        let dist = mixed_norm_distance(&next, &z, tree)?;
        if let Some(prev) = last {
            report
                .contraction_ratios
                .push(if prev > 0.0 { dist / prev } else { 0.0 });
        }
        report.iterations = it;
        report.final_defect = dist;
        z = next;
        last = Some(dist);
        if dist <= opts.tol {
            report.converged = true;
            break;
        }
        if !dist.is_finite() || dist > 1e12 * (1.0 + z.p.max_abs()) {
            break;
        }
    }
    Ok((z, report))
}

/// Picard iteration around the coefficients frozen at `x0`; the report is
/// returned whether or not the iteration converged.
pub fn freeze_and_iterate_report(
    scenario: &Scenario,
    x0: &[f64],
    tree: &WienerTree,
    basis: &SpectralBasis,
    opts: &PicardOptions,
) -> Result<(SolutionPair, IterationReport)> {
    check_compatible(scenario, tree, basis)?;
    opts.check()?;
    let frozen = FrozenScenario::freeze(scenario, x0)?;
    if scenario.leading_constant() && scenario.lower_order_zero() {
        // The perturbation vanishes: one frozen solve is the fixed point.
        let sol = solve_frozen(&frozen, tree, basis, &opts.scheme)?;
        let report = IterationReport {
            iterations: 1,
            contraction_ratios: Vec::new(),
            converged: true,
            final_defect: 0.0,
        };
        return Ok((sol, report));
    }
    let start = zero_pair(basis, tree, &opts.scheme);
    picard(scenario, &Base::Frozen(&frozen), start, tree, basis, opts)
}

/// As [`freeze_and_iterate_report`], failing when the tolerance is not met.
pub fn freeze_and_iterate(
    scenario: &Scenario,
    x0: &[f64],
    tree: &WienerTree,
    basis: &SpectralBasis,
    tol: f64,
    max_iter: usize,
) -> Result<(SolutionPair, IterationReport)> {
    let (sol, report) = freeze_and_iterate_report(scenario, x0, tree, basis, &PicardOptions::new(tol, max_iter))?;
    if !report.converged {
        return Err(Error::NonConvergent(format!(
            "frozen-coefficient iteration: {}",
            report.summary()
        )));
    }
    Ok((sol, report))
}

/// Continuation from the operators frozen at `x0` (`lambda = 0`) to the full
/// operators (`lambda = 1`) on a uniform grid. Each step iterates
/// `T(u, v) = S_prev(F + (L_lambda - L_prev) u + (M_lambda - M_prev) v)`,
/// where `S_prev` is the Galerkin solution operator of the previous grid
/// point, started from the previous solution.
pub fn continuation_solve_at(
    scenario: &Scenario,
    x0: &[f64],
    n_lambda_steps: usize,
    tree: &WienerTree,
    basis: &SpectralBasis,
    opts: &PicardOptions,
) -> Result<(SolutionPair, Vec<IterationReport>)> {
    if n_lambda_steps == 0 {
        return Err(Error::Structural("n_lambda_steps must be at least 1".into()));
    }
    check_compatible(scenario, tree, basis)?;
    opts.check()?;
    let fail = |lambda: f64, r: &IterationReport| {
        Error::NonConvergent(format!("continuation step lambda = {lambda}: {}", r.summary()))
    };
    let start = scenario.homotopy(0.0, x0);
    let (mut sol, report) = freeze_and_iterate_report(&start, x0, tree, basis, opts)?;
    if !report.converged {
        return Err(fail(0.0, &report));
    }
    let mut reports = vec![report];
    let mut prev = start;
    for i in 1..=n_lambda_steps {
        let lambda = i as f64 / n_lambda_steps as f64;
        let target = scenario.homotopy(lambda, x0);
        let (next, report) = picard(&target, &Base::Galerkin(&prev), sol, tree, basis, opts)?;
        if !report.converged {
            return Err(fail(lambda, &report));
        }
        reports.push(report);
        sol = next;
        prev = target;
    }
    Ok((sol, reports))
}

/// [`continuation_solve_at`] with the freeze point at the origin.
pub fn continuation_solve(
    scenario: &Scenario,
    n_lambda_steps: usize,
    tree: &WienerTree,
    basis: &SpectralBasis,
    tol: f64,
) -> Result<(SolutionPair, Vec<IterationReport>)> {
    let x0 = vec![0.0; scenario.dim_x];
    continuation_solve_at(
        scenario,
        &x0,
        n_lambda_steps,
        tree,
        basis,
        &PicardOptions::new(tol, 200),
    )
}
