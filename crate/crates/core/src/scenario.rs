//! Coefficient scenarios for linear backward stochastic parabolic equations
//! and the standing-assumption validators.
//!
//! A [`Scenario`] bundles the coefficient fields `a, b, c, sigma, nu`, the
//! free term `F` and the terminal datum `phi` on the torus `[-L, L)^d`.
//! Fields that depend on the Wiener path only see a [`WienerHistory`] that
//! ends at the evaluation time, which keeps predictability structural.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Discrete Wiener path prefix: increments of steps `0..step`, each of
/// length `dim_w`, on a uniform grid of width `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerHistory {
    dim_w: usize,
    dt: f64,
    increments: Vec<f64>,
}

impl WienerHistory {
    /// Empty history (time zero).
    pub fn empty(dim_w: usize, dt: f64) -> Self {
        Self {
            dim_w,
            dt,
            increments: Vec::new(),
        }
    }

    /// Builds a history from a flat `step * dim_w` increment list.
    pub fn from_increments(dim_w: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        if dim_w == 0 || increments.len() % dim_w != 0 {
            return Err(Error::Structural(format!(
                "increment list of length {} is not a multiple of dim_w = {dim_w}",
                increments.len()
            )));
        }
        Ok(Self { dim_w, dt, increments })
    }

    pub fn dim_w(&self) -> usize {
        self.dim_w
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.increments.len() / self.dim_w
    }

    /// Time at the end of the history.
    pub fn time(&self) -> f64 {
        self.step() as f64 * self.dt
    }

    /// Increment vector of step `i`.
    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[i * self.dim_w..(i + 1) * self.dim_w]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Current Wiener value `W^k` (zero-based `k`).
    pub fn w(&self, k: usize) -> f64 {
        self.increments.iter().skip(k).step_by(self.dim_w).sum()
    }

    /// Current Wiener vector.
    pub fn w_vector(&self) -> Vec<f64> {
        (0..self.dim_w).map(|k| self.w(k)).collect()
    }

    pub fn push(&mut self, increment: &[f64]) {
        debug_assert_eq!(increment.len(), self.dim_w);
        self.increments.extend_from_slice(increment);
    }

    /// Prefix ending at the last grid time not after `t`.
    pub fn truncated_to(&self, t: f64) -> Self {
        let steps = ((t / self.dt) + 1e-9).floor().max(0.0) as usize;
        let steps = steps.min(self.step());
        Self {
            dim_w: self.dim_w,
            dt: self.dt,
            increments: self.increments[..steps * self.dim_w].to_vec(),
        }
    }
}

/// How a coefficient field depends on its arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    DeterministicConst,
    DeterministicFnOfTx,
    AdaptedFnOfTxW,
}

pub type Evaluator = Arc<dyn Fn(f64, &[f64], &WienerHistory) -> f64 + Send + Sync>;
pub type GradientEvaluator = Arc<dyn Fn(f64, &[f64], &WienerHistory) -> Vec<f64> + Send + Sync>;

/// Scalar random field `(t, x, W|[0,t]) -> R`.
///
/// Matrix- and vector-valued coefficients are stored entrywise.
#[derive(Clone)]
pub struct CoefficientField {
    kind: FieldKind,
    eval: Evaluator,
    gradient: Option<GradientEvaluator>,
    constant: Option<f64>,
    source: Option<String>,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("kind", &self.kind)
            .field("constant", &self.constant)
            .field("source", &self.source)
            .finish()
    }
}

impl CoefficientField {
    pub fn constant(value: f64) -> Self {
        Self {
            kind: FieldKind::DeterministicConst,
            eval: Arc::new(move |_, _, _| value),
            gradient: None,
            constant: Some(value),
            source: None,
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn deterministic<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: FieldKind::DeterministicFnOfTx,
            eval: Arc::new(move |t, x, _| f(t, x)),
            gradient: None,
            constant: None,
            source: None,
        }
    }

    pub fn adapted<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64], &WienerHistory) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: FieldKind::AdaptedFnOfTxW,
            eval: Arc::new(f),
            gradient: None,
            constant: None,
            source: None,
        }
    }

    /// Builds a field from a raw evaluator and an explicit kind.
    pub fn from_evaluator(kind: FieldKind, eval: Evaluator) -> Self {
        Self {
            kind,
            eval,
            gradient: None,
            constant: None,
            source: None,
        }
    }

    /// Attaches an analytic spatial gradient, used by the higher-regularity
    /// harness instead of spectral differentiation.
    pub fn with_gradient<G>(mut self, g: G) -> Self
    where
        G: Fn(f64, &[f64], &WienerHistory) -> Vec<f64> + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(g));
        self
    }

    /// Records the expression text the field was compiled from.
    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn is_adapted(&self) -> bool {
        self.kind == FieldKind::AdaptedFnOfTxW
    }

    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }

    pub fn is_zero(&self) -> bool {
        self.constant == Some(0.0)
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn gradient(&self) -> Option<&GradientEvaluator> {
        self.gradient.as_ref()
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.eval
    }

    /// Point evaluation. The history must already end at `t`.
    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], history: &WienerHistory) -> f64 {
        (self.eval)(t, x, history)
    }

    /// Pointwise map of the field through `f`, keeping the kind.
    pub fn map<F>(&self, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if let Some(c) = self.constant {
            return Self::constant(f(c));
        }
        let inner = self.eval.clone();
        Self::from_evaluator(self.kind, Arc::new(move |t, x, h| f(inner(t, x, h))))
    }
}

/// Spatially frozen or combined fields.
pub(crate) fn widest_kind(kinds: impl IntoIterator<Item = FieldKind>) -> FieldKind {
    let mut out = FieldKind::DeterministicConst;
    for k in kinds {
        out = match (out, k) {
            (FieldKind::AdaptedFnOfTxW, _) | (_, FieldKind::AdaptedFnOfTxW) => FieldKind::AdaptedFnOfTxW,
            (FieldKind::DeterministicFnOfTx, _) | (_, FieldKind::DeterministicFnOfTx) => FieldKind::DeterministicFnOfTx,
            _ => FieldKind::DeterministicConst,
        };
    }
    out
}

/// Terminal datum `phi(x, W|[0,T])`; evaluated with `t = T`.
pub type TerminalField = CoefficientField;

/// Which of the two equation forms the second-order terms use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationForm {
    Divergence,
    NonDivergence,
}

impl EquationForm {
    pub fn as_str(self) -> &'static str {
        match self {
            EquationForm::Divergence => "divergence",
            EquationForm::NonDivergence => "non_divergence",
        }
    }
}

/// Full coefficient scenario on the torus `[-L, L)^d`.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dim_x: usize,
    pub dim_w: usize,
    pub horizon: f64,
    pub domain_halfwidth: f64,
    /// `d x d`, symmetric.
    pub a: Vec<Vec<CoefficientField>>,
    /// length `d`.
    pub b: Vec<CoefficientField>,
    pub c: CoefficientField,
    /// `d x d1`.
    pub sigma: Vec<Vec<CoefficientField>>,
    /// length `d1`.
    pub nu: Vec<CoefficientField>,
    pub free_term: CoefficientField,
    pub phi: TerminalField,
    pub bound_k: f64,
    pub ellipticity_kappa: f64,
    pub form: EquationForm,
}

impl Scenario {
    /// Heat scenario `a = I/2` with zero lower-order terms and zero data.
    pub fn heat(dim_x: usize, dim_w: usize, horizon: f64, domain_halfwidth: f64) -> Self {
        let a = (0..dim_x)
            .map(|i| {
                (0..dim_x)
                    .map(|j| CoefficientField::constant(if i == j { 0.5 } else { 0.0 }))
                    .collect()
            })
            .collect();
        Self {
            dim_x,
            dim_w,
            horizon,
            domain_halfwidth,
            a,
            b: vec![CoefficientField::zero(); dim_x],
            c: CoefficientField::zero(),
            sigma: vec![vec![CoefficientField::zero(); dim_w]; dim_x],
            nu: vec![CoefficientField::zero(); dim_w],
            free_term: CoefficientField::zero(),
            phi: CoefficientField::zero(),
            bound_k: 2.0,
            ellipticity_kappa: 0.5,
            form: EquationForm::NonDivergence,
        }
    }

    /// Scenario with every operator coefficient zero (no second-order term).
    /// It violates super-parabolicity and is meant for exactness checks.
    pub fn zero_operator(dim_x: usize, dim_w: usize, horizon: f64, domain_halfwidth: f64) -> Self {
        let mut s = Self::heat(dim_x, dim_w, horizon, domain_halfwidth);
        s.a = vec![vec![CoefficientField::zero(); dim_x]; dim_x];
        s
    }

    pub fn with_form(mut self, form: EquationForm) -> Self {
        self.form = form;
        self
    }

    pub fn with_phi(mut self, phi: TerminalField) -> Self {
        self.phi = phi;
        self
    }

    pub fn with_free_term(mut self, f: CoefficientField) -> Self {
        self.free_term = f;
        self
    }

    pub fn with_constants(mut self, bound_k: f64, kappa: f64) -> Self {
        self.bound_k = bound_k;
        self.ellipticity_kappa = kappa;
        self
    }

    /// Sets `a = s * I` with a scalar field `s`.
    pub fn with_isotropic_a(mut self, s: CoefficientField) -> Self {
        let d = self.dim_x;
        self.a = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if i == j { s.clone() } else { CoefficientField::zero() })
                    .collect()
            })
            .collect();
        self
    }

    /// Checks shapes and the constants `0 < kappa < 1 < K`.
    pub fn check_structure(&self) -> Result<()> {
        let d = self.dim_x;
        let d1 = self.dim_w;
        if d == 0 || d1 == 0 {
            return Err(Error::Structural("dimensions must be positive".into()));
        }
        if !(self.horizon > 0.0) || !(self.domain_halfwidth > 0.0) {
            return Err(Error::Structural(
                "horizon and domain half-width must be positive".into(),
            ));
        }
        if self.a.len() != d || self.a.iter().any(|row| row.len() != d) {
            return Err(Error::Structural(format!("a must be {d}x{d}")));
        }
        if self.sigma.len() != d || self.sigma.iter().any(|row| row.len() != d1) {
            return Err(Error::Structural(format!("sigma must be {d}x{d1}")));
        }
        if self.b.len() != d {
            return Err(Error::Structural(format!("b must have length {d}")));
        }
        if self.nu.len() != d1 {
            return Err(Error::Structural(format!("nu must have length {d1}")));
        }
        if !(self.ellipticity_kappa > 0.0 && self.ellipticity_kappa < 1.0 && self.bound_k > 1.0) {
            return Err(Error::Structural(format!(
                "constants must satisfy 0 < kappa < 1 < K (kappa = {}, K = {})",
                self.ellipticity_kappa, self.bound_k
            )));
        }
        Ok(())
    }

    fn operator_fields(&self) -> impl Iterator<Item = &CoefficientField> {
        self.a
            .iter()
            .flatten()
            .chain(self.b.iter())
            .chain(std::iter::once(&self.c))
            .chain(self.sigma.iter().flatten())
            .chain(self.nu.iter())
    }

    /// True when no operator coefficient depends on the Wiener path.
    pub fn operators_deterministic(&self) -> bool {
        self.operator_fields().all(|f| !f.is_adapted())
    }

    /// True when coefficients and data are all deterministic: the equation
    /// then reduces to a backward parabolic PDE.
    pub fn is_deterministic(&self) -> bool {
        self.operators_deterministic() && !self.free_term.is_adapted() && !self.phi.is_adapted()
    }

    /// True when `a` and `sigma` are constant fields.
    pub fn leading_constant(&self) -> bool {
        self.a
            .iter()
            .flatten()
            .chain(self.sigma.iter().flatten())
            .all(|f| f.kind() == FieldKind::DeterministicConst)
    }

    /// True when `b`, `c`, `nu` are identically zero.
    pub fn lower_order_zero(&self) -> bool {
        self.b.iter().all(|f| f.is_zero()) && self.c.is_zero() && self.nu.iter().all(|f| f.is_zero())
    }

    pub fn eval_a(&self, t: f64, x: &[f64], h: &WienerHistory) -> DMatrix<f64> {
        let d = self.dim_x;
        DMatrix::from_fn(d, d, |i, j| self.a[i][j].eval(t, x, h))
    }

    pub fn eval_sigma(&self, t: f64, x: &[f64], h: &WienerHistory) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim_x, self.dim_w, |i, k| self.sigma[i][k].eval(t, x, h))
    }

    /// Scenario with `a` and `sigma` frozen at the spatial point `x0`.
    pub fn frozen_at(&self, x0: &[f64]) -> Scenario {
        let mut s = self.clone();
        s.a = self
            .a
            .iter()
            .map(|row| row.iter().map(|f| freeze(f, x0)).collect())
            .collect();
        s.sigma = self
            .sigma
            .iter()
            .map(|row| row.iter().map(|f| freeze(f, x0)).collect())
            .collect();
        s
    }

    /// Method-of-continuity family member: leading coefficients
    /// `(1 - lambda) * frozen + lambda * full`, lower-order terms unchanged.
    pub fn homotopy(&self, lambda: f64, x0: &[f64]) -> Scenario {
        let frozen = self.frozen_at(x0);
        let mut s = self.clone();
        let blend = |f0: &CoefficientField, f1: &CoefficientField| blend_fields(f0, f1, lambda);
        s.a = frozen
            .a
            .iter()
            .zip(&self.a)
            .map(|(r0, r1)| r0.iter().zip(r1).map(|(f0, f1)| blend(f0, f1)).collect())
            .collect();
        s.sigma = frozen
            .sigma
            .iter()
            .zip(&self.sigma)
            .map(|(r0, r1)| r0.iter().zip(r1).map(|(f0, f1)| blend(f0, f1)).collect())
            .collect();
        s
    }

    /// Same scenario with `F` and `phi` scaled by `factor`.
    pub fn scaled_data(&self, factor: f64) -> Scenario {
        let mut s = self.clone();
        s.free_term = self.free_term.map(move |v| factor * v);
        s.phi = self.phi.map(move |v| factor * v);
        s
    }
}

/// `f(t, x0, W)`; keeps constants constant.
pub(crate) fn freeze(f: &CoefficientField, x0: &[f64]) -> CoefficientField {
    if f.as_constant().is_some() {
        return f.clone();
    }
    let inner = f.evaluator().clone();
    let x0 = x0.to_vec();
    let kind = if f.is_adapted() {
        FieldKind::AdaptedFnOfTxW
    } else {
        FieldKind::DeterministicFnOfTx
    };
    CoefficientField::from_evaluator(kind, Arc::new(move |t, _x, h| inner(t, &x0, h)))
}

pub(crate) fn blend_fields(f0: &CoefficientField, f1: &CoefficientField, lambda: f64) -> CoefficientField {
    if let (Some(c0), Some(c1)) = (f0.as_constant(), f1.as_constant()) {
        return CoefficientField::constant((1.0 - lambda) * c0 + lambda * c1);
    }
    let e0 = f0.evaluator().clone();
    let e1 = f1.evaluator().clone();
    CoefficientField::from_evaluator(
        widest_kind([f0.kind(), f1.kind()]),
        Arc::new(move |t, x, h| (1.0 - lambda) * e0(t, x, h) + lambda * e1(t, x, h)),
    )
}

/// Modulus of continuity `gamma` for the leading coefficients.
#[derive(Clone)]
pub struct ModulusOfContinuity {
    gamma: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for ModulusOfContinuity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ModulusOfContinuity")
    }
}

impl ModulusOfContinuity {
    pub fn new<G: Fn(f64) -> f64 + Send + Sync + 'static>(gamma: G) -> Self {
        Self { gamma: Arc::new(gamma) }
    }

    /// Lipschitz modulus `gamma(r) = constant * r`.
    pub fn lipschitz(constant: f64) -> Self {
        Self::new(move |r| constant * r)
    }

    pub fn eval(&self, r: f64) -> f64 {
        (self.gamma)(r)
    }

    /// `gamma(0) = 0`, nonnegative and nondecreasing on a probe ladder.
    pub fn is_admissible(&self) -> bool {
        if self.eval(0.0).abs() > 1e-14 {
            return false;
        }
        let mut prev = 0.0;
        for i in 1..=200 {
            let r = 1e-6 * 1.1f64.powi(i);
            let g = self.eval(r);
            if !g.is_finite() || g < prev - 1e-14 || g <= 0.0 {
                return false;
            }
            prev = g;
        }
        true
    }
}

/// Finite audit set of `(t, x, history)` evaluation points.
#[derive(Debug, Clone)]
pub struct SampleGrid {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// One increment path per entry; each time `t` uses the prefix up to `t`.
    pub paths: Vec<WienerHistory>,
}

impl SampleGrid {
    /// Uniform grid: `n_times` times on `[0, T]`, `n_x` points per
    /// dimension on the torus, `n_paths` seeded Gaussian paths.
    pub fn uniform(scenario: &Scenario, n_times: usize, n_x: usize, n_paths: usize, seed: u64) -> Self {
        let n_times = n_times.max(1);
        let t_steps = (n_times - 1).max(1);
        let dt = scenario.horizon / t_steps as f64;
        let times = (0..n_times)
            .map(|i| if n_times == 1 { 0.0 } else { i as f64 * dt })
            .collect();
        let l = scenario.domain_halfwidth;
        let h = 2.0 * l / n_x as f64;
        let d = scenario.dim_x;
        let total = n_x.pow(d as u32);
        let points = (0..total)
            .map(|mut idx| {
                let mut x = vec![0.0; d];
                for xi in x.iter_mut().rev() {
                    *xi = -l + (idx % n_x) as f64 * h;
                    idx /= n_x;
                }
                x
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = dt.sqrt();
        let d1 = scenario.dim_w;
        let paths = (0..n_paths.max(1))
            .map(|p| {
                let incs = (0..t_steps * d1)
                    .map(|_| {
                        if p == 0 {
                            0.0
                        } else {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            sd * z
                        }
                    })
                    .collect();
                WienerHistory::from_increments(d1, dt, incs).expect("well-formed increments")
            })
            .collect();
        Self { times, points, paths }
    }

    pub fn sample_count(&self) -> usize {
        self.times.len() * self.points.len() * self.paths.len()
    }
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub symmetry_ok: bool,
    pub superparabolic_ok: bool,
    /// Smallest eigenvalue of `2a - sigma sigma^* - kappa I` over the samples.
    pub min_margin: f64,
    /// Smallest eigenvalue of `K I - 2a` over the samples.
    pub upper_margin: f64,
    pub bounds_ok: bool,
    pub modulus_ok: bool,
    pub sample_count: usize,
}

impl ValidationReport {
    pub fn all_ok(&self) -> bool {
        self.symmetry_ok && self.superparabolic_ok && self.bounds_ok && self.modulus_ok
    }
}

/// Torus distance between two points of `[-L, L)^d`.
pub fn torus_distance(x: &[f64], y: &[f64], halfwidth: f64) -> f64 {
    let period = 2.0 * halfwidth;
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let mut d = (a - b).rem_euclid(period);
            if d > halfwidth {
                d = period - d;
            }
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Audits symmetry, super-parabolicity, bounds and the modulus of continuity
/// of `scenario` on `grid`. Structural shape problems are errors; failed
/// checks are reported in the returned report.
pub fn validate(
    scenario: &Scenario,
    modulus: Option<&ModulusOfContinuity>,
    grid: &SampleGrid,
) -> Result<ValidationReport> {
    scenario.check_structure()?;
    let d = scenario.dim_x;
    let kappa = scenario.ellipticity_kappa;
    let k_bound = scenario.bound_k;
    let tol = 1e-12;

    let mut symmetry_ok = true;
    let mut bounds_ok = true;
    let mut min_margin = f64::INFINITY;
    let mut upper_margin = f64::INFINITY;
    let mut modulus_ok = modulus.map_or(true, |m| m.is_admissible());

    for path in &grid.paths {
        for &t in &grid.times {
            let h = path.truncated_to(t);
            let mut a_samples = Vec::with_capacity(grid.points.len());
            let mut s_samples = Vec::with_capacity(grid.points.len());
            for x in &grid.points {
                let a = scenario.eval_a(t, x, &h);
                let s = scenario.eval_sigma(t, x, &h);
                let b: Vec<f64> = scenario.b.iter().map(|f| f.eval(t, x, &h)).collect();
                let c = scenario.c.eval(t, x, &h);
                let nu: Vec<f64> = scenario.nu.iter().map(|f| f.eval(t, x, &h)).collect();

                let finite = a.iter().chain(s.iter()).chain(&b).chain(&nu).all(|v| v.is_finite()) && c.is_finite();
                if !finite {
                    bounds_ok = false;
                    symmetry_ok = symmetry_ok && a.iter().all(|v| v.is_finite());
                    min_margin = f64::NEG_INFINITY;
                    continue;
                }
                let asym = (&a - a.transpose()).amax();
                if asym > tol * (1.0 + a.amax()) {
                    symmetry_ok = false;
                }
                let a_sym = (&a + a.transpose()) * 0.5;
                let lower = &a_sym * 2.0 - &s * s.transpose() - DMatrix::identity(d, d) * kappa;
                let eig = SymmetricEigen::new(lower).eigenvalues;
                min_margin = min_margin.min(eig.min());
                let upper = DMatrix::identity(d, d) * k_bound - &a_sym * 2.0;
                upper_margin = upper_margin.min(SymmetricEigen::new(upper).eigenvalues.min());

                let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nunorm = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
                if frobenius(&a) > k_bound + tol
                    || bnorm > k_bound + tol
                    || c.abs() > k_bound + tol
                    || frobenius(&s) > k_bound + tol
                    || nunorm > k_bound + tol
                {
                    bounds_ok = false;
                }
                a_samples.push(a);
                s_samples.push(s);
            }
            if let Some(m) = modulus {
                if a_samples.len() == grid.points.len() {
                    for i in 0..grid.points.len() {
                        for j in (i + 1)..grid.points.len() {
                            let r = torus_distance(&grid.points[i], &grid.points[j], scenario.domain_halfwidth);
                            let g = m.eval(r);
                            let slack = 1e-12 * (1.0 + g);
                            if frobenius(&(&a_samples[i] - &a_samples[j])) > g + slack
                                || frobenius(&(&s_samples[i] - &s_samples[j])) > g + slack
                            {
                                modulus_ok = false;
                            }
                        }
                    }
                }
            }
        }
    }
    if upper_margin < -tol {
        bounds_ok = false;
    }
    Ok(ValidationReport {
        symmetry_ok,
        superparabolic_ok: min_margin >= 0.0,
        min_margin,
        upper_margin,
        bounds_ok,
        modulus_ok,
        sample_count: grid.sample_count(),
    })
}

/// Vectorized evaluation of `field` at `x_points`. Adapted fields require a
/// history reaching `t`; longer histories are cut back to `t`.
pub fn evaluate_field(
    field: &CoefficientField,
    t: f64,
    x_points: &[Vec<f64>],
    history: &WienerHistory,
) -> Result<Vec<f64>> {
    let h = if field.is_adapted() {
        if history.time() + 1e-9 * history.dt().max(1.0) < t {
            return Err(Error::HistoryTooShort {
                available: history.step(),
                requested: t,
            });
        }
        history.truncated_to(t)
    } else {
        WienerHistory::empty(history.dim_w().max(1), history.dt())
    };
    Ok(x_points.iter().map(|x| field.eval(t, x, &h)).collect())
}
