use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::solver::{
    check_compatible, project_field, terminal_values, AdaptedField, MCoupling, PerLevel, SchemeConfig, SolutionPair,
};
use crate::space::{assemble_l, assemble_m, SpectralBasis};
use crate::wiener::{NodeId, WienerTree};

/// Largest number of unknowns the dense oracle accepts.
pub const DENSE_BUDGET: usize = 3000;

/// Unknown layout of the stacked system: every node's `p` (all levels,
/// terminal included) followed by every non-terminal node's `q`.
#[derive(Debug, Clone)]
pub struct DenseSystem {
    pub matrix: DMatrix<Complex64>,
    pub rhs: DVector<Complex64>,
    n_modes: usize,
    d1: usize,
    p_offsets: Vec<usize>,
    q_offsets: Vec<usize>,
}

impl DenseSystem {
    fn p_index(&self, level: usize, node: usize, mode: usize) -> usize {
        self.p_offsets[level] + node * self.n_modes + mode
    }

    fn q_index(&self, level: usize, node: usize, comp: usize, mode: usize) -> usize {
        self.q_offsets[level] + (node * self.d1 + comp) * self.n_modes + mode
    }

    pub fn unknowns(&self) -> usize {
        self.rhs.len()
    }
}

/// Assembles the stacked one-step equations of the scheme on the whole tree.
pub fn assemble_dense(
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    scheme: &SchemeConfig,
) -> Result<DenseSystem> {
    check_compatible(scenario, tree, basis)?;
    scheme.check()?;
    if !tree.is_enumerable() {
        return Err(Error::Budget {
            what: "dense oracle nodes",
            required: tree.total_nodes().unwrap_or(u128::MAX),
            budget: DENSE_BUDGET as u128,
        });
    }
    let n = tree.n_steps();
    let d1 = tree.dim_w();
    let nm = basis.total_modes();
    let dt = tree.dt();
    let theta = scheme.theta;
    let mut p_offsets = Vec::with_capacity(n + 1);
    let mut off = 0usize;
    for k in 0..=n {
        p_offsets.push(off);
        off += tree.level_len(k) * nm;
    }
    let mut q_offsets = Vec::with_capacity(n);
    for k in 0..n {
        q_offsets.push(off);
        off += tree.level_len(k) * d1 * nm;
    }
    if off > DENSE_BUDGET {
        return Err(Error::Budget {
            what: "dense oracle unknowns",
            required: off as u128,
            budget: DENSE_BUDGET as u128,
        });
    }
    let mut sys = DenseSystem {
        matrix: DMatrix::zeros(off, off),
        rhs: DVector::zeros(off),
        n_modes: nm,
        d1,
        p_offsets,
        q_offsets,
    };
    let one = Complex64::new(1.0, 0.0);

    // Terminal rows: p_N = projected phi.
    let terminal = terminal_values(scenario, tree, basis)?;
    for j in 0..tree.level_len(n) {
        let phi = terminal.get(j);
        for m in 0..nm {
            let r = sys.p_index(n, j, m);
            sys.matrix[(r, r)] = one;
            sys.rhs[r] = phi[m];
        }
    }

    // Operators per node, levels 0..=N (level N only for the fixed point).
    let ops_at = |k: usize, j: usize| {
        let h = tree.history(NodeId { level: k, index: j });
        let t = k as f64 * dt;
        (
            assemble_l(scenario, t, &h, basis),
            assemble_m(scenario, t, &h, basis),
            h,
        )
    };
    let fixed_point = scheme.m_coupling == MCoupling::FixedPoint;
    let weights = tree.child_weights();
    let incs = tree.child_increments();

    for k in 0..n {
        for j in 0..tree.level_len(k) {
            let (l, ms, h) = ops_at(k, j);
            let f = project_field(&scenario.free_term, k as f64 * dt, &h, basis);
            let children: Vec<usize> = tree.children_of(j).collect();
            let child_ms: Vec<Vec<DMatrix<Complex64>>> = if fixed_point {
                children.iter().map(|&c| ops_at(k + 1, c).1).collect()
            } else {
                Vec::new()
            };
            // q rows: q^l - sum_c w_c dW^l_c / dt (p+_c + dt sum_m M^m_c q^m) = 0.
            for comp in 0..d1 {
                for m in 0..nm {
                    let r = sys.q_index(k, j, comp, m);
                    sys.matrix[(r, r)] += one;
                    for (ci, &c) in children.iter().enumerate() {
                        let coef = weights[ci] * incs[ci][comp] / dt;
                        let col = sys.p_index(k + 1, c, m);
                        sys.matrix[(r, col)] -= Complex64::new(coef, 0.0);
                        if fixed_point {
                            for (mm, mat) in child_ms[ci].iter().enumerate() {
                                for s in 0..nm {
                                    let col = sys.q_index(k, j, mm, s);
                                    sys.matrix[(r, col)] -= mat[(m, s)] * (coef * dt);
                                }
                            }
                        }
                    }
                }
            }
            // p rows: (I - theta dt L) p - (I + (1 - theta) dt L) E[p+] - dt M q = dt F.
            for m in 0..nm {
                let r = sys.p_index(k, j, m);
                for s in 0..nm {
                    let id = if m == s { one } else { Complex64::new(0.0, 0.0) };
                    let col = sys.p_index(k, j, s);
                    sys.matrix[(r, col)] += id - l[(m, s)] * (theta * dt);
                    let e_coef = id + l[(m, s)] * ((1.0 - theta) * dt);
                    for (ci, &c) in children.iter().enumerate() {
                        let col = sys.p_index(k + 1, c, s);
                        sys.matrix[(r, col)] -= e_coef * weights[ci];
                    }
                    for (comp, mat) in ms.iter().enumerate() {
                        let col = sys.q_index(k, j, comp, s);
                        sys.matrix[(r, col)] -= mat[(m, s)] * dt;
                    }
                }
                sys.rhs[r] = f[m] * dt;
            }
        }
    }
    Ok(sys)
}

/// Solves the stacked system directly and unpacks it as a solution pair.
pub fn solve_dense(
    scenario: &Scenario,
    tree: &WienerTree,
    basis: &SpectralBasis,
    scheme: &SchemeConfig,
) -> Result<SolutionPair> {
    let sys = assemble_dense(scenario, tree, basis, scheme)?;
    let x = sys
        .matrix
        .clone()
        .lu()
        .solve(&sys.rhs)
        .ok_or(Error::Singular { level: 0, node: 0 })?;
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Singular { level: 0, node: 0 });
    }
    let n = tree.n_steps();
    let nm = sys.n_modes;
    let d1 = sys.d1;
    let slice = |start: usize| DVector::from_iterator(nm, (0..nm).map(|m| x[start + m]));
    let p_levels = (0..=n)
        .map(|k| {
            PerLevel::Nodes(
                (0..tree.level_len(k))
                    .map(|j| vec![slice(sys.p_index(k, j, 0))])
                    .collect(),
            )
        })
        .collect();
    let q_levels = (0..n)
        .map(|k| {
            PerLevel::Nodes(
                (0..tree.level_len(k))
                    .map(|j| (0..d1).map(|c| slice(sys.q_index(k, j, c, 0))).collect())
                    .collect(),
            )
        })
        .collect();
    Ok(SolutionPair {
        p: AdaptedField::new(basis.clone(), 1, p_levels),
        q: AdaptedField::new(basis.clone(), d1, q_levels),
        scheme: *scheme,
        dt: tree.dt(),
        n_steps: n,
    })
}
