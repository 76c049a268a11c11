//! Fourier spectral discretization on the torus `[-L, L)^d`.
//!
//! Modes are `xi in {-M..M}^d` with wavenumbers `k = xi * pi / L`; the basis
//! `e^{i k.x}` is orthonormal for the normalized inner product
//! `(2L)^{-d} \int u conj(v)`. Mode and grid indices are row-major with the
//! first coordinate most significant.

mod operators;

pub(crate) use operators::coefficient_points;
pub use operators::{
    assemble_l, assemble_m, coercivity_probe, multiplication_matrix, CoercivityEstimate, OperatorMatrices,
};

use nalgebra::DVector;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Truncated Fourier basis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralBasis {
    dim_x: usize,
    modes_per_dim: usize,
    domain_halfwidth: f64,
    dealias: bool,
}

impl SpectralBasis {
    pub fn new(dim_x: usize, modes_per_dim: usize, domain_halfwidth: f64) -> Result<Self> {
        if dim_x == 0 || !(domain_halfwidth > 0.0) {
            return Err(Error::Structural(
                "basis needs dim_x >= 1 and a positive half-width".into(),
            ));
        }
        Ok(Self {
            dim_x,
            modes_per_dim,
            domain_halfwidth,
            dealias: false,
        })
    }

    /// Evaluate coefficient products on a 3/2-refined grid.
    pub fn with_dealias(mut self, on: bool) -> Self {
        self.dealias = on;
        self
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn modes_per_dim(&self) -> usize {
        self.modes_per_dim
    }

    pub fn domain_halfwidth(&self) -> f64 {
        self.domain_halfwidth
    }

    pub fn dealias(&self) -> bool {
        self.dealias
    }

    pub fn total_modes(&self) -> usize {
        self.grid_len().pow(self.dim_x as u32)
    }

    /// Collocation points per dimension, `2M + 1`.
    pub fn grid_len(&self) -> usize {
        2 * self.modes_per_dim + 1
    }

    /// Points per dimension of the grid used for coefficient products.
    pub fn coefficient_grid_len(&self) -> usize {
        if self.dealias {
            let g = 3 * self.modes_per_dim + 1;
            g | 1
        } else {
            self.grid_len()
        }
    }

    /// Signed multi-index of mode `m`.
    pub fn mode(&self, m: usize) -> Vec<i64> {
        let g = self.grid_len();
        let mut out = vec![0i64; self.dim_x];
        let mut rest = m;
        for a in (0..self.dim_x).rev() {
            out[a] = (rest % g) as i64 - self.modes_per_dim as i64;
            rest /= g;
        }
        out
    }

    /// Index of a signed multi-index, `None` outside the truncation.
    pub fn mode_index(&self, xi: &[i64]) -> Option<usize> {
        let m = self.modes_per_dim as i64;
        let g = self.grid_len();
        let mut idx = 0usize;
        for &x in xi {
            if x.abs() > m {
                return None;
            }
            idx = idx * g + (x + m) as usize;
        }
        Some(idx)
    }

    /// Wavenumber vector `xi * pi / L` of mode `m`.
    pub fn wavenumber(&self, m: usize) -> Vec<f64> {
        let s = std::f64::consts::PI / self.domain_halfwidth;
        self.mode(m).into_iter().map(|x| x as f64 * s).collect()
    }

    /// `|k|^2` for every mode.
    pub fn wavenumber_sq(&self) -> Vec<f64> {
        (0..self.total_modes())
            .map(|m| self.wavenumber(m).iter().map(|k| k * k).sum())
            .collect()
    }

    /// Collocation points `x_j = -L + j 2L / G`.
    pub fn grid_points(&self) -> Vec<Vec<f64>> {
        grid_points(self.dim_x, self.grid_len(), self.domain_halfwidth)
    }

    /// Volume of one collocation cell.
    pub fn cell_volume(&self) -> f64 {
        (2.0 * self.domain_halfwidth / self.grid_len() as f64).powi(self.dim_x as i32)
    }

    /// Same truncation with a different mode count.
    pub fn resized(&self, modes_per_dim: usize) -> Self {
        Self {
            modes_per_dim,
            ..self.clone()
        }
    }
}

pub(crate) fn grid_points(dim_x: usize, g: usize, halfwidth: f64) -> Vec<Vec<f64>> {
    let h = 2.0 * halfwidth / g as f64;
    let n = g.pow(dim_x as u32);
    (0..n)
        .map(|mut j| {
            let mut x = vec![0.0; dim_x];
            for a in (0..dim_x).rev() {
                x[a] = -halfwidth + (j % g) as f64 * h;
                j /= g;
            }
            x
        })
        .collect()
}

/// In-place `d`-dimensional DFT over a row-major cube of side `g`.
pub(crate) fn fft_nd(data: &mut [Complex64], dim_x: usize, g: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(g)
    } else {
        planner.plan_fft_forward(g)
    };
    let mut line = vec![Complex64::new(0.0, 0.0); g];
    for axis in 0..dim_x {
        let stride = g.pow((dim_x - 1 - axis) as u32);
        let block = stride * g;
        for start in (0..data.len()).step_by(block) {
            for off in 0..stride {
                for (j, l) in line.iter_mut().enumerate() {
                    *l = data[start + off + j * stride];
                }
                fft.process(&mut line);
                for (j, l) in line.iter().enumerate() {
                    data[start + off + j * stride] = *l;
                }
            }
        }
    }
}

/// Normalized Fourier coefficients of grid samples on a cube of side `g`,
/// returned in FFT order (index `xi mod g` per axis). The factor
/// `(-1)^{sum xi}` from the grid offset `-L` is not applied here.
pub(crate) fn raw_transform(values: &[f64], dim_x: usize, g: usize) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut data, dim_x, g, false);
    let scale = 1.0 / data.len() as f64;
    data.iter_mut().for_each(|v| *v *= scale);
    data
}

/// Looks up the coefficient of signed frequency `delta` in a raw transform.
pub(crate) fn raw_lookup(raw: &[Complex64], g: usize, delta: &[i64]) -> Complex64 {
    let gi = g as i64;
    let mut idx = 0usize;
    let mut parity = 0i64;
    for &d in delta {
        idx = idx * g + d.rem_euclid(gi) as usize;
        parity += d;
    }
    if parity.rem_euclid(2) == 0 {
        raw[idx]
    } else {
        -raw[idx]
    }
}

/// A real (or complex) field represented by its truncated Fourier coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    pub basis: SpectralBasis,
    pub coefficients: DVector<Complex64>,
}

impl SpatialField {
    pub fn zeros(basis: &SpectralBasis) -> Self {
        Self {
            basis: basis.clone(),
            coefficients: DVector::zeros(basis.total_modes()),
        }
    }

    pub fn from_coefficients(basis: &SpectralBasis, coefficients: DVector<Complex64>) -> Result<Self> {
        if coefficients.len() != basis.total_modes() {
            return Err(Error::LengthMismatch {
                expected: basis.total_modes(),
                got: coefficients.len(),
            });
        }
        Ok(Self {
            basis: basis.clone(),
            coefficients,
        })
    }

    /// Single basis function `e^{i k.x}` of the given signed mode.
    pub fn unit_mode(basis: &SpectralBasis, xi: &[i64]) -> Result<Self> {
        let idx = basis
            .mode_index(xi)
            .ok_or_else(|| Error::Structural(format!("mode {xi:?} outside the truncation")))?;
        let mut f = Self::zeros(basis);
        f.coefficients[idx] = Complex64::new(1.0, 0.0);
        Ok(f)
    }

    /// Same function on another truncation of the same torus: shared modes
    /// are copied, new modes are zero, dropped modes are discarded.
    pub fn transfer(&self, target: &SpectralBasis) -> Result<Self> {
        if target.dim_x() != self.basis.dim_x() || target.domain_halfwidth() != self.basis.domain_halfwidth() {
            return Err(Error::Structural("bases describe different tori".into()));
        }
        let mut out = Self::zeros(target);
        for m in 0..self.basis.total_modes() {
            if let Some(j) = target.mode_index(&self.basis.mode(m)) {
                out.coefficients[j] = self.coefficients[m];
            }
        }
        Ok(out)
    }

    /// Largest deviation from conjugate symmetry `u_{-xi} = conj(u_xi)`.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let n = self.coefficients.len();
        (0..n)
            .map(|m| (self.coefficients[m] - self.coefficients[n - 1 - m].conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Normalized inner product `sum u_xi conj(v_xi)`.
    pub fn inner(&self, other: &SpatialField) -> Complex64 {
        self.coefficients
            .iter()
            .zip(other.coefficients.iter())
            .map(|(a, b)| a * b.conj())
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            basis: self.basis.clone(),
            coefficients: &self.coefficients * Complex64::new(s, 0.0),
        }
    }
}

/// Forward transform of real samples on the collocation grid.
pub fn project(basis: &SpectralBasis, values: &[f64]) -> Result<SpatialField> {
    let n = basis.total_modes();
    if values.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: values.len(),
        });
    }
    let g = basis.grid_len();
    let raw = raw_transform(values, basis.dim_x(), g);
    let coefficients = DVector::from_iterator(n, (0..n).map(|m| raw_lookup(&raw, g, &basis.mode(m))));
    Ok(SpatialField {
        basis: basis.clone(),
        coefficients,
    })
}

/// Samples `f` on the collocation grid and projects.
pub fn project_fn<F: Fn(&[f64]) -> f64>(basis: &SpectralBasis, f: F) -> SpatialField {
    let values: Vec<f64> = basis.grid_points().iter().map(|x| f(x)).collect();
    project(basis, &values).expect("grid-sized samples")
}

/// Complex values of the field on the collocation grid.
pub fn reconstruct_complex(field: &SpatialField) -> Vec<Complex64> {
    let basis = &field.basis;
    let g = basis.grid_len();
    let mut data = vec![Complex64::new(0.0, 0.0); basis.total_modes()];
    let gi = g as i64;
    for m in 0..basis.total_modes() {
        let xi = basis.mode(m);
        let mut idx = 0usize;
        let parity: i64 = xi.iter().sum();
        for &x in &xi {
            idx = idx * g + x.rem_euclid(gi) as usize;
        }
        let c = field.coefficients[m];
        data[idx] = if parity.rem_euclid(2) == 0 { c } else { -c };
    }
    fft_nd(&mut data, basis.dim_x(), g, true);
    data
}

/// Real part of the field on the collocation grid.
pub fn reconstruct(field: &SpatialField) -> Vec<f64> {
    reconstruct_complex(field).into_iter().map(|z| z.re).collect()
}

/// Evaluates the trigonometric polynomial at arbitrary points.
pub fn evaluate_at(field: &SpatialField, x: &[f64]) -> f64 {
    let basis = &field.basis;
    (0..basis.total_modes())
        .map(|m| {
            let phase: f64 = basis.wavenumber(m).iter().zip(x).map(|(k, x)| k * x).sum();
            (field.coefficients[m] * Complex64::from_polar(1.0, phase)).re
        })
        .sum()
}

/// `sqrt(sum (1 + |k|^2)^n |u_xi|^2)`; `n` may be negative.
pub fn sobolev_norm(field: &SpatialField, order: i32) -> f64 {
    sobolev_norm_sq(&field.basis, field.coefficients.as_slice(), order).sqrt()
}

/// Squared Sobolev norm of a raw coefficient slice.
pub fn sobolev_norm_sq(basis: &SpectralBasis, coefficients: &[Complex64], order: i32) -> f64 {
    basis
        .wavenumber_sq()
        .iter()
        .zip(coefficients)
        .map(|(k2, c)| (1.0 + k2).powi(order) * c.norm_sqr())
        .sum()
}

/// Per-mode Sobolev weights `(1 + |k|^2)^n`.
pub fn sobolev_weights(basis: &SpectralBasis, order: i32) -> Vec<f64> {
    basis.wavenumber_sq().iter().map(|k2| (1.0 + k2).powi(order)).collect()
}

/// Spectral derivative `D^alpha`.
pub fn derivative(field: &SpatialField, alpha: &[usize]) -> SpatialField {
    let basis = &field.basis;
    let symbol = derivative_symbol(basis, alpha);
    SpatialField {
        basis: basis.clone(),
        coefficients: field.coefficients.component_mul(&symbol),
    }
}

/// Diagonal symbol `prod (i k_j)^{alpha_j}`.
pub fn derivative_symbol(basis: &SpectralBasis, alpha: &[usize]) -> DVector<Complex64> {
    DVector::from_iterator(
        basis.total_modes(),
        (0..basis.total_modes()).map(|m| {
            basis
                .wavenumber(m)
                .iter()
                .zip(alpha)
                .fold(Complex64::new(1.0, 0.0), |acc, (k, &a)| acc * (I * k).powu(a as u32))
        }),
    )
}

/// Spectral partial derivatives of samples on a cube of side `g`, returned
/// as samples on the same grid (one vector per coordinate).
pub fn spectral_gradient_samples(values: &[f64], dim_x: usize, g: usize, halfwidth: f64) -> Vec<Vec<f64>> {
    let raw = raw_transform(values, dim_x, g);
    let s = std::f64::consts::PI / halfwidth;
    let gi = g as i64;
    (0..dim_x)
        .map(|axis| {
            let stride = g.pow((dim_x - 1 - axis) as u32);
            let mut data: Vec<Complex64> = raw
                .iter()
                .enumerate()
                .map(|(idx, c)| {
                    let r = ((idx / stride) % g) as i64;
                    let xi = if r > gi / 2 { r - gi } else { r };
                    // The grid offset -L contributes a factor (-1)^xi on both
                    // the forward and inverse transforms, which cancels.
                    c * I * (xi as f64 * s)
                })
                .collect();
            fft_nd(&mut data, dim_x, g, true);
            data.into_iter().map(|z| z.re).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_real_field(basis: &SpectralBasis, seed: u64) -> SpatialField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = basis.total_modes();
        let mut c = DVector::zeros(n);
        for m in 0..n {
            let j = n - 1 - m;
            if m < j {
                let z = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                c[m] = z;
                c[j] = z.conj();
            } else if m == j {
                c[m] = Complex64::new(rng.random::<f64>() - 0.5, 0.0);
            }
        }
        SpatialField::from_coefficients(basis, c).unwrap()
    }

    #[test]
    fn transfer_pads_and_truncates() {
        let small = SpectralBasis::new(2, 2, 1.0).unwrap();
        let large = small.resized(4);
        let f = project_fn(&small, |x| (PI * x[0]).cos() + (2.0 * PI * x[1]).sin());
        let up = f.transfer(&large).unwrap();
        assert!((sobolev_norm(&up, 1) - sobolev_norm(&f, 1)).abs() < 1e-14);
        assert_eq!(up.transfer(&small).unwrap(), f);
        let g = project_fn(&large, |x| (3.0 * PI * x[0]).cos() + (PI * x[1]).cos());
        let down = g.transfer(&small).unwrap();
        assert!((sobolev_norm(&down, 0) - sobolev_norm(&project_fn(&small, |x| (PI * x[1]).cos()), 0)).abs() < 1e-14);
        assert!(f.transfer(&SpectralBasis::new(2, 2, 2.0).unwrap()).is_err());
    }

    #[test]
    fn constant_projects_to_zero_mode() {
        let b = SpectralBasis::new(2, 3, 1.5).unwrap();
        let f = project_fn(&b, |_| 1.0);
        let zero = b.mode_index(&[0, 0]).unwrap();
        for m in 0..b.total_modes() {
            let expect = if m == zero { 1.0 } else { 0.0 };
            assert!((f.coefficients[m] - Complex64::new(expect, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn cosine_splits_evenly() {
        let l = 2.0;
        let b = SpectralBasis::new(1, 4, l).unwrap();
        let f = project_fn(&b, |x| (PI * x[0] / l).cos());
        let p = b.mode_index(&[1]).unwrap();
        let q = b.mode_index(&[-1]).unwrap();
        assert!((f.coefficients[p] - Complex64::new(0.5, 0.0)).norm() < 1e-14);
        assert!((f.coefficients[q] - Complex64::new(0.5, 0.0)).norm() < 1e-14);
        let rest: f64 = (0..b.total_modes())
            .filter(|&m| m != p && m != q)
            .map(|m| f.coefficients[m].norm())
            .sum();
        assert!(rest < 1e-13);
    }

    #[test]
    fn round_trip_band_limited() {
        for d in 1..=3 {
            let b = SpectralBasis::new(d, 3, 1.7).unwrap();
            let f = random_real_field(&b, d as u64);
            let vals = reconstruct(&f);
            let g = project(&b, &vals).unwrap();
            let err = (&f.coefficients - &g.coefficients).camax();
            assert!(err < 1e-12, "d = {d}: {err}");
            let imag = reconstruct_complex(&f).iter().map(|z| z.im.abs()).fold(0.0, f64::max);
            assert!(imag < 1e-12);
        }
    }

    #[test]
    fn grid_values_match_direct_evaluation() {
        let b = SpectralBasis::new(2, 2, 1.0).unwrap();
        let f = random_real_field(&b, 11);
        let vals = reconstruct(&f);
        for (x, v) in b.grid_points().iter().zip(&vals) {
            assert!((evaluate_at(&f, x) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn project_rejects_wrong_size() {
        let b = SpectralBasis::new(1, 2, 1.0).unwrap();
        assert!(matches!(
            project(&b, &[0.0; 4]),
            Err(Error::LengthMismatch { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn sobolev_unit_mode() {
        let b = SpectralBasis::new(2, 3, 1.0).unwrap();
        let f = SpatialField::unit_mode(&b, &[2, -1]).unwrap();
        let k2 = 5.0 * PI * PI;
        assert!((sobolev_norm(&f, 1) - (1.0 + k2).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn parseval() {
        let b = SpectralBasis::new(2, 3, 0.8).unwrap();
        let f = random_real_field(&b, 3);
        let vals = reconstruct(&f);
        let grid_l2 = (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((sobolev_norm(&f, 0) - grid_l2).abs() < 1e-12);
    }

    #[test]
    fn negative_order_cosine() {
        // Independent: two modes of weight 1/2 with (1 + 1)^{-1} on L = pi.
        let b = SpectralBasis::new(1, 4, PI).unwrap();
        let f = project_fn(&b, |x| x[0].cos());
        let expect = (2.0 * 0.25 / 2.0f64).sqrt();
        assert!((sobolev_norm(&f, -1) - expect).abs() < 1e-13);
        assert!((expect - 0.5).abs() < 1e-15);
    }

    #[test]
    fn norm_monotone_in_order() {
        let b = SpectralBasis::new(1, 5, 1.0).unwrap();
        let mut f = random_real_field(&b, 8);
        let zero = b.mode_index(&[0]).unwrap();
        f.coefficients[zero] = Complex64::new(0.0, 0.0);
        let norms: Vec<f64> = (-2..=3).map(|n| sobolev_norm(&f, n)).collect();
        assert!(norms.windows(2).all(|w| w[0] <= w[1]));
        let g = random_real_field(&b, 9);
        assert!(sobolev_norm(&g, 0) <= sobolev_norm(&g, 1));
    }

    #[test]
    fn gradient_samples_of_smooth_field() {
        let l = 1.0;
        let g = 9;
        let pts = grid_points(2, g, l);
        let vals: Vec<f64> = pts.iter().map(|x| (PI * x[0]).sin() * (PI * x[1]).cos()).collect();
        let grad = spectral_gradient_samples(&vals, 2, g, l);
        for (j, x) in pts.iter().enumerate() {
            assert!((grad[0][j] - PI * (PI * x[0]).cos() * (PI * x[1]).cos()).abs() < 1e-12);
            assert!((grad[1][j] + PI * (PI * x[0]).sin() * (PI * x[1]).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_of_sine() {
        let l = 1.3;
        let b = SpectralBasis::new(1, 6, l).unwrap();
        let f = project_fn(&b, |x| (2.0 * PI * x[0] / l).sin());
        let df = derivative(&f, &[1]);
        let expect = project_fn(&b, |x| 2.0 * PI / l * (2.0 * PI * x[0] / l).cos());
        assert!((&df.coefficients - &expect.coefficients).camax() < 1e-12);
    }
}
