use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scenario::{CoefficientField, Scenario};

/// Convolution with `zeta_n(y) = n^d zeta(n y)`, `zeta` the standard bump
/// `exp(-1 / (1 - |y|^2))` on the unit ball, discretized on a lattice of
/// spacing `spacing` and normalized to unit discrete mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifierConfig {
    pub smoothing_index: usize,
    pub spacing: f64,
}

impl MollifierConfig {
    /// Lattice spacing of one eighth of the support radius.
    pub fn new(smoothing_index: usize) -> Self {
        Self {
            smoothing_index,
            spacing: 1.0 / (8.0 * smoothing_index.max(1) as f64),
        }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn radius(&self) -> f64 {
        1.0 / self.smoothing_index as f64
    }

    /// Lattice offsets and normalized weights, plus the unnormalized
    /// Riemann-sum mass of the kernel.
    pub fn kernel_nodes(&self, dim_x: usize) -> Result<(Vec<(Vec<f64>, f64)>, f64)> {
        if self.smoothing_index == 0 || !(self.spacing > 0.0) {
            return Err(Error::Structural("smoothing index and spacing must be positive".into()));
        }
        let r = self.radius();
        if r < 2.0 * self.spacing {
            return Err(Error::DegenerateKernel(format!(
                "radius {r} is below twice the lattice spacing {}",
                self.spacing
            )));
        }
        let n = self.smoothing_index as f64;
        let h = self.spacing;
        let steps = (r / h).floor() as i64;
        let side = (2 * steps + 1) as usize;
        let mut nodes = Vec::new();
        let mut mass = 0.0;
        for flat in 0..side.pow(dim_x as u32) {
            let mut rest = flat;
            let y: Vec<f64> = (0..dim_x)
                .map(|_| {
                    let i = (rest % side) as i64 - steps;
                    rest /= side;
                    i as f64 * h
                })
                .collect();
            let s2: f64 = y.iter().map(|v| (v * n).powi(2)).sum();
            if s2 >= 1.0 {
                continue;
            }
            let w = n.powi(dim_x as i32) * (-1.0 / (1.0 - s2)).exp() * h.powi(dim_x as i32);
            mass += w;
            nodes.push((y, w));
        }
        if nodes.is_empty() || mass <= 0.0 {
            return Err(Error::DegenerateKernel("kernel has no interior lattice nodes".into()));
        }
        let raw = mass / bump_mass(dim_x);
        for node in &mut nodes {
            node.1 /= mass;
        }
        Ok((nodes, raw))
    }
}

/// `int zeta` over the unit ball, by radial quadrature.
fn bump_mass(dim_x: usize) -> f64 {
    let surface = match dim_x {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        d => {
            // 2 pi^{d/2} / Gamma(d/2) via the recursion S_{d} = 2 pi S_{d-2} / (d - 2).
            let mut s = if d % 2 == 0 {
                2.0 * std::f64::consts::PI
            } else {
                4.0 * std::f64::consts::PI
            };
            let mut k = if d % 2 == 0 { 2 } else { 3 };
            while k < d {
                s *= 2.0 * std::f64::consts::PI / k as f64;
                k += 2;
            }
            s
        }
    };
    let m = 20_000;
    let h = 1.0 / m as f64;
    let f = |r: f64| {
        if r < 1.0 {
            (-1.0 / (1.0 - r * r)).exp() * r.powi(dim_x as i32 - 1)
        } else {
            0.0
        }
    };
    let mut sum = 0.0;
    for i in 0..m {
        let r = (i as f64 + 0.5) * h;
        sum += f(r);
    }
    surface * sum * h
}

fn mollify_field(field: &CoefficientField, nodes: &Arc<Vec<(Vec<f64>, f64)>>) -> CoefficientField {
    if field.as_constant().is_some() {
        return field.clone();
    }
    let eval = field.evaluator().clone();
    let nd = nodes.clone();
    let mut out = CoefficientField::from_evaluator(
        field.kind(),
        Arc::new(move |t, x, h| {
            let mut shifted = x.to_vec();
            nd.iter()
                .map(|(y, w)| {
                    for ((s, xi), yi) in shifted.iter_mut().zip(x).zip(y) {
                        *s = xi - yi;
                    }
                    w * eval(t, &shifted, h)
                })
                .sum()
        }),
    );
    if let Some(grad) = field.gradient() {
        let grad = grad.clone();
        let nd = nodes.clone();
        out = out.with_gradient(move |t, x, h| {
            let mut acc = vec![0.0; x.len()];
            let mut shifted = x.to_vec();
            for (y, w) in nd.iter() {
                for ((s, xi), yi) in shifted.iter_mut().zip(x).zip(y) {
                    *s = xi - yi;
                }
                for (a, g) in acc.iter_mut().zip(grad(t, &shifted, h)) {
                    *a += w * g;
                }
            }
            acc
        });
    }
    out
}

/// Replaces `a` and `sigma` by their mollifications; every other field is
/// kept.
pub fn mollify(scenario: &Scenario, config: &MollifierConfig) -> Result<Scenario> {
    scenario.check_structure()?;
    let (nodes, _) = config.kernel_nodes(scenario.dim_x)?;
    let nodes = Arc::new(nodes);
    let mut s = scenario.clone();
    s.a = scenario
        .a
        .iter()
        .map(|row| row.iter().map(|f| mollify_field(f, &nodes)).collect())
        .collect();
    s.sigma = scenario
        .sigma
        .iter()
        .map(|row| row.iter().map(|f| mollify_field(f, &nodes)).collect())
        .collect();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{validate, ModulusOfContinuity, SampleGrid, WienerHistory};
    use std::f64::consts::PI;

    #[test]
    fn kernel_is_nonnegative_with_unit_mass() {
        for d in [1, 2] {
            let cfg = MollifierConfig::new(4);
            let (nodes, raw) = cfg.kernel_nodes(d).unwrap();
            assert!(nodes.iter().all(|(_, w)| *w >= 0.0));
            let total: f64 = nodes.iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12);
            // The Riemann sum of the analytic kernel is already close to 1.
            assert!((raw - 1.0).abs() < 1e-3, "{raw}");
        }
    }

    #[test]
    fn degenerate_radius_rejected() {
        let cfg = MollifierConfig::new(10).with_spacing(0.06);
        assert!(matches!(cfg.kernel_nodes(1), Err(Error::DegenerateKernel(_))));
    }

    #[test]
    fn constants_unchanged() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.a[0][0] = CoefficientField::deterministic(|_, _| 0.7);
        let m = mollify(&s, &MollifierConfig::new(4)).unwrap();
        let h = WienerHistory::empty(1, 1.0);
        for x in [-0.9, 0.0, 0.3] {
            assert!((m.a[0][0].eval(0.0, &[x], &h) - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn sup_error_bounded_by_modulus() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.a[0][0] = CoefficientField::deterministic(|_, x| 0.5 + 0.2 * (PI * x[0]).sin().abs());
        let h = WienerHistory::empty(1, 1.0);
        // Lipschitz constant 0.2 pi.
        for n in [4, 8, 16] {
            let m = mollify(&s, &MollifierConfig::new(n)).unwrap();
            let err = (0..400)
                .map(|i| {
                    let x = -1.0 + i as f64 / 200.0;
                    (m.a[0][0].eval(0.0, &[x], &h) - s.a[0][0].eval(0.0, &[x], &h)).abs()
                })
                .fold(0.0, f64::max);
            assert!(err <= 0.2 * PI / n as f64 + 1e-12, "{n} {err}");
        }
    }

    #[test]
    fn mollified_coefficients_validate_with_relaxed_constants() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0).with_constants(2.0, 0.5);
        s.a[0][0] = CoefficientField::deterministic(|_, x| 0.5 + 0.2 * (PI * x[0]).sin().abs());
        s.sigma[0][0] = CoefficientField::deterministic(|_, x| 0.3 * (PI * x[0]).cos().abs());
        let m = mollify(&s, &MollifierConfig::new(16))
            .unwrap()
            .with_constants(4.0, 0.25);
        let grid = SampleGrid::uniform(&m, 3, 33, 2, 1);
        let r = validate(&m, Some(&ModulusOfContinuity::lipschitz(0.2 * PI)), &grid).unwrap();
        assert!(r.superparabolic_ok && r.bounds_ok && r.symmetry_ok);
    }
}
