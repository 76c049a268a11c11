use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scenario::{Scenario, WienerHistory};

const CHUNK: usize = 4096;

/// Monte Carlo settings for [`feynman_kac_mc_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeynmanKacConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Euler steps over `[t, T]`.
    pub n_substeps: usize,
}

/// Classical Feynman–Kac estimate of `p(t, x)` for a deterministic
/// scenario with `sigma = 0`, `nu = 0`:
/// `E[phi(X_T) e^{-int c} + int_t^T F(s, X_s) e^{-int_t^s c} ds]` with
/// `dX = b ds + sqrt(2a) dB` wrapped onto the torus. Returns the estimate
/// and its standard error.
pub fn feynman_kac_mc(scenario: &Scenario, x: &[f64], t: f64, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    feynman_kac_mc_with(
        scenario,
        x,
        t,
        FeynmanKacConfig {
            n_samples,
            seed,
            n_substeps: 64,
        },
    )
}

pub fn feynman_kac_mc_with(scenario: &Scenario, x: &[f64], t: f64, cfg: FeynmanKacConfig) -> Result<(f64, f64)> {
    scenario.check_structure()?;
    if !scenario.is_deterministic() {
        return Err(Error::Precondition(
            "Feynman-Kac oracle needs deterministic coefficients and data".into(),
        ));
    }
    if !scenario.sigma.iter().flatten().all(|f| f.is_zero()) || !scenario.nu.iter().all(|f| f.is_zero()) {
        return Err(Error::Precondition(
            "Feynman-Kac oracle needs sigma = 0 and nu = 0".into(),
        ));
    }
    if x.len() != scenario.dim_x || !(0.0..=scenario.horizon).contains(&t) {
        return Err(Error::Structural("evaluation point outside the problem domain".into()));
    }
    if cfg.n_samples < 2 || cfg.n_substeps == 0 {
        return Err(Error::Structural("need at least two samples and one substep".into()));
    }
    let d = scenario.dim_x;
    let l = scenario.domain_halfwidth;
    let n_sub = cfg.n_substeps;
    let h = (scenario.horizon - t) / n_sub as f64;
    let empty = WienerHistory::empty(scenario.dim_w, 1.0);
    let wrap = |v: f64| (v + l).rem_euclid(2.0 * l) - l;
    let chunks = cfg.n_samples.div_ceil(CHUNK);
    // Per chunk (count, mean, sum of squared deviations), merged pairwise.
    let stats: Vec<(f64, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| -> Result<(f64, f64, f64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(chunk as u64);
            let count = CHUNK.min(cfg.n_samples - chunk * CHUNK);
            let (mut mean, mut m2) = (0.0, 0.0);
            let mut pos = vec![0.0; d];
            for i in 0..count {
                pos.copy_from_slice(x);
                let mut discount = 0.0f64;
                let mut running = 0.0;
                for step in 0..n_sub {
                    let s = t + step as f64 * h;
                    let c = scenario.c.eval(s, &pos, &empty);
                    let f = scenario.free_term.eval(s, &pos, &empty);
                    running += f * (-discount).exp() * h;
                    discount += c * h;
                    let a = scenario.eval_a(s, &pos, &empty) * 2.0;
                    let root = sqrt_psd(&a)?;
                    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let b: Vec<f64> = scenario.b.iter().map(|f| f.eval(s, &pos, &empty)).collect();
                    for i in 0..d {
                        let noise: f64 = (0..d).map(|j| root[(i, j)] * z[j]).sum();
                        pos[i] = wrap(pos[i] + b[i] * h + noise * h.sqrt());
                    }
                }
                let value = scenario.phi.eval(scenario.horizon, &pos, &empty) * (-discount).exp() + running;
                let delta = value - mean;
                mean += delta / (i + 1) as f64;
                m2 += delta * (value - mean);
            }
            Ok((count as f64, mean, m2))
        })
        .collect::<Result<Vec<_>>>()?;
    let (n, mean, m2) = stats.into_iter().fold((0.0, 0.0, 0.0), |(na, ma, sa), (nb, mb, sb)| {
        let n = na + nb;
        let delta = mb - ma;
        (n, ma + delta * nb / n, sa + sb + delta * delta * na * nb / n)
    });
    let var = (m2 / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Symmetric square root of a positive semidefinite matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&v| v < -1e-12) {
        return Err(Error::Precondition(
            "diffusion matrix is not positive semidefinite".into(),
        ));
    }
    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose())
}
