//! Independent reference solutions: the stacked linear system of the scheme
//! solved directly, the closed-form heat solution and a Feynman–Kac
//! Monte Carlo estimate for deterministic problems.

mod dense;
mod feynman_kac;
mod heat;

pub use dense::{assemble_dense, solve_dense, DenseSystem, DENSE_BUDGET};
pub use feynman_kac::{feynman_kac_mc, feynman_kac_mc_with, FeynmanKacConfig};
pub use heat::{heat_reference, GaussianBump, HeatReference};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::scenario::{CoefficientField, EquationForm, Scenario};
    use crate::solver::{solve_tree, MCoupling, SchemeConfig};
    use crate::space::{evaluate_at, project_fn, SpectralBasis};
    use crate::wiener::build_tree;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn variable_scenario(form: EquationForm) -> Scenario {
        let mut s = Scenario::heat(1, 1, 0.5, 1.0).with_form(form);
        s.a[0][0] = CoefficientField::adapted(|_, x, h| 0.5 + 0.1 * (PI * x[0]).sin() * h.w(0).tanh());
        s.b[0] = CoefficientField::deterministic(|_, x| 0.2 * (PI * x[0]).cos());
        s.c = CoefficientField::constant(0.1);
        s.sigma[0][0] = CoefficientField::adapted(|_, x, h| 0.3 * (PI * x[0]).cos() * (1.0 + 0.2 * h.w(0).sin()));
        s.nu[0] = CoefficientField::constant(0.1);
        s.free_term = CoefficientField::adapted(|t, x, h| t * (PI * x[0]).sin() + 0.1 * h.w(0));
        s.phi = CoefficientField::adapted(|_, x, h| (PI * x[0]).cos() * (1.0 + h.w(0)));
        s
    }

    #[test]
    fn dense_matches_backward_march() {
        let tree = build_tree(1, 3, 2, 0.5).unwrap();
        let basis = SpectralBasis::new(1, 3, 1.0).unwrap();
        for form in [EquationForm::Divergence, EquationForm::NonDivergence] {
            let s = variable_scenario(form);
            for theta in [1.0, 0.5, 0.0] {
                for coupling in [MCoupling::Explicit, MCoupling::FixedPoint] {
                    let sc = SchemeConfig::default().with_theta(theta).with_coupling(coupling);
                    let a = solve_tree(&s, &tree, &basis, &sc).unwrap();
                    let b = solve_dense(&s, &tree, &basis, &sc).unwrap();
                    let scale = b.p.max_abs().max(b.q.max_abs());
                    assert!(a.p.max_abs_diff(&b.p) <= 1e-10 * scale, "{form:?} {theta} {coupling:?}");
                    assert!(a.q.max_abs_diff(&b.q) <= 1e-10 * scale);
                }
            }
        }
    }

    #[test]
    fn dense_budget_enforced() {
        let s = Scenario::heat(2, 1, 1.0, 1.0);
        let tree = build_tree(1, 4, 2, 1.0).unwrap();
        let basis = SpectralBasis::new(2, 4, 1.0).unwrap();
        assert!(matches!(
            solve_dense(&s, &tree, &basis, &SchemeConfig::default()),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn heat_reference_closed_form_values() {
        let basis = SpectralBasis::new(1, 24, 6.0).unwrap();
        let bump = GaussianBump {
            amplitude: 1.0,
            width: 1.0,
            center: vec![0.0],
        };
        let r = heat_reference(&bump, &DMatrix::from_element(1, 1, 0.5), 1.0, &basis).unwrap();
        assert!((r.covariance[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((r.peak - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((evaluate_at(&r.field, &[0.0]) - r.peak).abs() < 1e-8);
        // At t = T the coefficients are the projection of the periodized bump.
        let r0 = heat_reference(&bump, &DMatrix::from_element(1, 1, 0.5), 0.0, &basis).unwrap();
        let direct = project_fn(&basis, |x| bump.eval_periodic(x, 6.0));
        assert!((&r0.field.coefficients - &direct.coefficients).camax() < 1e-10);
        let bad = GaussianBump { width: 0.0, ..bump };
        assert!(matches!(
            heat_reference(&bad, &DMatrix::from_element(1, 1, 0.5), 0.0, &basis),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn feynman_kac_exact_cases() {
        let mut s = Scenario::heat(1, 1, 1.0, 1.0).with_phi(CoefficientField::constant(1.0));
        s.c = CoefficientField::constant(0.7);
        let (est, se) = feynman_kac_mc(&s, &[0.3], 0.25, 1000, 1).unwrap();
        assert!((est - (-0.7f64 * 0.75).exp()).abs() < 1e-12 && se < 1e-12);
        let s = Scenario::heat(1, 1, 1.0, 1.0).with_free_term(CoefficientField::constant(1.0));
        let (est, _) = feynman_kac_mc(&s, &[0.0], 0.4, 100, 2).unwrap();
        assert!((est - 0.6).abs() < 1e-12);
    }

    #[test]
    fn feynman_kac_matches_heat_reference() {
        let l = 6.0;
        let bump = GaussianBump {
            amplitude: 1.0,
            width: 1.0,
            center: vec![0.0],
        };
        let b2 = bump.clone();
        let s =
            Scenario::heat(1, 1, 1.0, l).with_phi(CoefficientField::deterministic(move |_, x| b2.eval_periodic(x, l)));
        let basis = SpectralBasis::new(1, 32, l).unwrap();
        let r = heat_reference(&bump, &DMatrix::from_element(1, 1, 0.5), 1.0, &basis).unwrap();
        let (est, se) = feynman_kac_mc(&s, &[0.5], 0.0, 40_000, 7).unwrap();
        let exact = evaluate_at(&r.field, &[0.5]);
        assert!((est - exact).abs() < 4.0 * se, "{est} {exact} {se}");
        let again = feynman_kac_mc(&s, &[0.5], 0.0, 40_000, 7).unwrap();
        assert_eq!(again.0, est);
    }

    #[test]
    fn feynman_kac_rejects_stochastic_problems() {
        let s = Scenario::heat(1, 1, 1.0, 1.0).with_phi(CoefficientField::adapted(|_, _, h| h.w(0)));
        assert!(matches!(
            feynman_kac_mc(&s, &[0.0], 0.0, 10, 0),
            Err(Error::Precondition(_))
        ));
        let mut s = Scenario::heat(1, 1, 1.0, 1.0);
        s.sigma[0][0] = CoefficientField::constant(0.1);
        assert!(matches!(
            feynman_kac_mc(&s, &[0.0], 0.0, 10, 0),
            Err(Error::Precondition(_))
        ));
    }
}
