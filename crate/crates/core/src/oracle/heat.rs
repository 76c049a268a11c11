use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::space::{SpatialField, SpectralBasis};

/// Gaussian bump `A exp(-|x - x0|^2 / (2 s^2))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianBump {
    pub amplitude: f64,
    pub width: f64,
    pub center: Vec<f64>,
}

impl GaussianBump {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum();
        self.amplitude * (-r2 / (2.0 * self.width * self.width)).exp()
    }

    /// Value of the periodized bump on the torus `[-L, L)^d`.
    pub fn eval_periodic(&self, x: &[f64], halfwidth: f64) -> f64 {
        let d = x.len();
        let reps = 3i64;
        let combos = (2 * reps + 1).pow(d as u32);
        (0..combos)
            .map(|mut c| {
                let shifted: Vec<f64> = x
                    .iter()
                    .map(|&xi| {
                        let s = (c % (2 * reps + 1)) - reps;
                        c /= 2 * reps + 1;
                        xi + 2.0 * halfwidth * s as f64
                    })
                    .collect();
                self.eval(&shifted)
            })
            .sum()
    }
}

/// Closed-form solution of the backward heat equation with Gaussian data.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatReference {
    pub field: SpatialField,
    /// `s^2 I + 2 a (T - t)`.
    pub covariance: DMatrix<f64>,
    /// Peak value `A sqrt(det(s^2 I) / det(covariance))`.
    pub peak: f64,
}

/// `p(t)` for `dp = -a^{ij} D_ij p dt`, `p(T) = phi`, with constant `a` and
/// a Gaussian `phi`, as truncated torus coefficients of the periodized
/// solution. `time_to_go` is `T - t`.
pub fn heat_reference(
    phi: &GaussianBump,
    a_const: &DMatrix<f64>,
    time_to_go: f64,
    basis: &SpectralBasis,
) -> Result<HeatReference> {
    let d = basis.dim_x();
    if a_const.nrows() != d || a_const.ncols() != d || phi.center.len() != d {
        return Err(Error::Structural("heat reference dimensions disagree".into()));
    }
    if time_to_go < 0.0 {
        return Err(Error::Precondition("time must not exceed the horizon".into()));
    }
    let s2 = phi.width * phi.width;
    let cov = DMatrix::<f64>::identity(d, d) * s2 + a_const * (2.0 * time_to_go);
    let det = cov.determinant();
    let base = s2.powi(d as i32);
    if !(phi.width > 0.0) || !(det > 1e-12 * base.max(1e-300)) {
        return Err(Error::Precondition(format!("near-singular covariance (det = {det:e})")));
    }
    let peak = phi.amplitude * (base / det).sqrt();
    let l = basis.domain_halfwidth();
    let norm = phi.amplitude * (2.0 * std::f64::consts::PI * s2).powf(d as f64 / 2.0) / (2.0 * l).powi(d as i32);
    let coefficients = nalgebra::DVector::from_iterator(
        basis.total_modes(),
        (0..basis.total_modes()).map(|m| {
            let k = basis.wavenumber(m);
            let k2: f64 = k.iter().map(|v| v * v).sum();
            let mut kak = 0.0;
            for i in 0..d {
                for j in 0..d {
                    kak += k[i] * a_const[(i, j)] * k[j];
                }
            }
            let phase: f64 = -k.iter().zip(&phi.center).map(|(a, b)| a * b).sum::<f64>();
            Complex64::from_polar(norm * (-0.5 * s2 * k2 - kak * time_to_go).exp(), phase)
        }),
    );
    Ok(HeatReference {
        field: SpatialField {
            basis: basis.clone(),
            coefficients,
        },
        covariance: cov,
        peak,
    })
}
