//! Backward recursion over the tree, generic in how the operators and the
//! source are supplied. The drift and martingale operators may be dense
//! (Galerkin assembly) or diagonal (frozen constant-coefficient symbols).

use nalgebra::{DMatrix, DVector, LU};
use num_complex::Complex64;
use rayon::prelude::*;

use super::{AdaptedField, MCoupling, PerLevel, SchemeConfig};
use crate::error::{Error, Result};
use crate::scenario::WienerHistory;
use crate::wiener::{NodeId, WienerTree};

pub(crate) type CVec = DVector<Complex64>;

/// Cap on stored coefficients across all nodes and components.
pub const STORAGE_BUDGET: u128 = 1 << 25;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Dense(DMatrix<Complex64>),
    Diagonal(CVec),
}

impl Op {
    pub(crate) fn apply(&self, x: &CVec) -> CVec {
        match self {
            Op::Dense(m) => m * x,
            Op::Diagonal(d) => d.component_mul(x),
        }
    }
}

#[derive(Debug, Clone)]
enum Implicit {
    Identity,
    Lu(LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>),
    Diagonal(CVec),
}

/// Operators at one `(t, node)` with the factorized implicit matrix.
#[derive(Debug, Clone)]
pub(crate) struct NodeOps {
    pub l: Op,
    pub m: Vec<Op>,
    implicit: Implicit,
}

impl NodeOps {
    /// Factorizes `I - theta dt L`; `None` when singular.
    pub(crate) fn new(l: Op, m: Vec<Op>, theta: f64, dt: f64) -> Option<Self> {
        let implicit = if theta == 0.0 {
            Implicit::Identity
        } else {
            match &l {
                Op::Diagonal(d) => {
                    let mut inv = CVec::zeros(d.len());
                    for (o, v) in inv.iter_mut().zip(d.iter()) {
                        let den = Complex64::new(1.0, 0.0) - v * (theta * dt);
                        if den.norm() < 1e-14 {
                            return None;
                        }
                        *o = den.inv();
                    }
                    Implicit::Diagonal(inv)
                }
                Op::Dense(mat) => {
                    let n = mat.nrows();
                    let a = DMatrix::<Complex64>::identity(n, n) - mat * Complex64::new(theta * dt, 0.0);
                    let lu = a.lu();
                    let u = lu.u();
                    let diag: Vec<f64> = (0..n).map(|i| u[(i, i)].norm()).collect();
                    let max = diag.iter().cloned().fold(0.0, f64::max);
                    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
                    if n > 0 && !(min > 1e-14 * max.max(1.0)) {
                        return None;
                    }
                    Implicit::Lu(lu)
                }
            }
        };
        Some(Self { l, m, implicit })
    }

    pub(crate) fn solve_implicit(&self, rhs: &CVec) -> Option<CVec> {
        match &self.implicit {
            Implicit::Identity => Some(rhs.clone()),
            Implicit::Diagonal(inv) => Some(inv.component_mul(rhs)),
            Implicit::Lu(lu) => lu.solve(rhs),
        }
    }

    pub(crate) fn apply_m(&self, q: &[CVec]) -> CVec {
        let mut out = CVec::zeros(q.first().map_or(0, |v| v.len()));
        for (m, qk) in self.m.iter().zip(q) {
            out += m.apply(qk);
        }
        out
    }
}

/// Supplies operators and sources to the recursion.
pub(crate) trait StepInputs: Sync {
    /// Operators at `(level, history)`.
    fn ops(&self, level: usize, history: &WienerHistory) -> (Op, Vec<Op>);
    /// Whether `ops` depends on the history.
    fn ops_adapted(&self) -> bool;
    /// Source at `(level, node)`, including the free term.
    fn source(&self, level: usize, node: usize, history: &WienerHistory) -> CVec;
    fn source_adapted(&self) -> bool;
}

/// Runs the backward recursion from the terminal values.
pub(crate) fn backward<S: StepInputs>(
    inputs: &S,
    tree: &WienerTree,
    n_modes: usize,
    terminal: PerLevel<CVec>,
    scheme: &SchemeConfig,
) -> Result<(Vec<PerLevel<CVec>>, Vec<PerLevel<Vec<CVec>>>)> {
    let n = tree.n_steps();
    let d1 = tree.dim_w();
    let dt = tree.dt();
    let theta = scheme.theta;
    let collapsed = scheme.collapse && !inputs.ops_adapted() && !inputs.source_adapted() && terminal.is_shared();
    if !collapsed {
        if !tree.is_enumerable() {
            return Err(Error::Budget {
                what: "tree nodes (tree is symbolic; the scenario needs every node)",
                required: tree.total_nodes().unwrap_or(u128::MAX),
                budget: crate::wiener::DEFAULT_NODE_BUDGET,
            });
        }
        let stored = tree.total_nodes().unwrap_or(u128::MAX) * (n_modes as u128) * (1 + d1 as u128);
        if stored > STORAGE_BUDGET {
            return Err(Error::Budget {
                what: "stored solution coefficients",
                required: stored,
                budget: STORAGE_BUDGET,
            });
        }
    }
    let fixed_point = scheme.m_coupling == MCoupling::FixedPoint;
    let level_history = |k: usize| -> WienerHistory {
        if tree.is_enumerable() {
            tree.history(NodeId { level: k, index: 0 })
        } else {
            let zeros = vec![0.0; k * d1];
            WienerHistory::from_increments(d1, dt, zeros).expect("zero history")
        }
    };
    let make_ops = |k: usize, node: usize, h: &WienerHistory| -> Result<NodeOps> {
        let (l, m) = inputs.ops(k, h);
        NodeOps::new(l, m, theta, dt).ok_or(Error::Singular { level: k, node })
    };

    let mut p_levels: Vec<Option<PerLevel<CVec>>> = (0..=n).map(|_| None).collect();
    let mut q_levels: Vec<Option<PerLevel<Vec<CVec>>>> = (0..n).map(|_| None).collect();

    // Child-level operators, kept only for the fixed-point coupling.
    let mut child_ops: Option<PerLevel<NodeOps>> = None;
    if fixed_point {
        child_ops = Some(if collapsed || !inputs.ops_adapted() {
            PerLevel::Shared(make_ops(n, 0, &level_history(n))?)
        } else {
            PerLevel::Nodes(
                (0..tree.level_len(n))
                    .into_par_iter()
                    .map(|j| make_ops(n, j, &tree.history(NodeId { level: n, index: j })))
                    .collect::<Result<Vec<_>>>()?,
            )
        });
    }

    let terminal = match terminal {
        PerLevel::Shared(v) if !collapsed => PerLevel::Nodes(vec![v; tree.level_len(n)]),
        other => other,
    };
    p_levels[n] = Some(terminal);

    for k in (0..n).rev() {
        let p_next = p_levels[k + 1].as_ref().expect("filled");
        let shared_ops = if !inputs.ops_adapted() {
            Some(make_ops(k, 0, &level_history(k))?)
        } else {
            None
        };
        let shared_src = if !inputs.source_adapted() {
            Some(inputs.source(k, 0, &level_history(k)))
        } else {
            None
        };
        if collapsed {
            let ops = shared_ops.expect("deterministic operators");
            let src = shared_src.expect("deterministic source");
            let e = p_next.get(0).clone();
            // Identical children: every martingale coefficient vanishes.
            let q = vec![CVec::zeros(n_modes); d1];
            let p = step(&ops, &e, &q, &src, theta, dt).ok_or(Error::Singular { level: k, node: 0 })?;
            p_levels[k] = Some(PerLevel::Shared(p));
            q_levels[k] = Some(PerLevel::Shared(q));
            if fixed_point {
                child_ops = Some(PerLevel::Shared(ops));
            }
            continue;
        }
        let count = tree.level_len(k);
        let c = tree.children_per_node();
        let results: Vec<(CVec, Vec<CVec>, Option<NodeOps>)> = (0..count)
            .into_par_iter()
            .map(|j| -> Result<_> {
                let id = NodeId { level: k, index: j };
                let adapted = inputs.ops_adapted() || inputs.source_adapted();
                let history = if adapted { Some(tree.history(id)) } else { None };
                let own_ops;
                let ops = match &shared_ops {
                    Some(o) => o,
                    None => {
                        own_ops = make_ops(k, j, history.as_ref().expect("history"))?;
                        &own_ops
                    }
                };
                let src = match &shared_src {
                    Some(s) => s.clone(),
                    None => inputs.source(k, j, history.as_ref().expect("history")),
                };
                let children = tree.children_of(j);
                let child_vals: Vec<&CVec> = children.clone().map(|ch| p_next.get(ch)).collect();
                let e = CVec::from_vec(tree.expect_vectors(child_vals.iter().map(|v| v.as_slice()), n_modes));
                let mut q: Vec<CVec> = tree
                    .martingale_vectors(child_vals.iter().map(|v| v.as_slice()), n_modes)
                    .into_iter()
                    .map(CVec::from_vec)
                    .collect();
                if fixed_point {
                    let cops = child_ops.as_ref().expect("child operators");
                    let base_q = q.clone();
                    let mut converged = false;
                    for _ in 0..scheme.fp_max_iter {
                        let mq: Vec<CVec> = children
                            .clone()
                            .map(|ch| cops.get(ch).apply_m(&q) * Complex64::new(dt, 0.0))
                            .collect();
                        let corr = tree.martingale_vectors(mq.iter().map(|v| v.as_slice()), n_modes);
                        let next: Vec<CVec> = base_q.iter().zip(corr).map(|(b, cr)| b + CVec::from_vec(cr)).collect();
                        let diff: f64 = next
                            .iter()
                            .zip(&q)
                            .map(|(a, b)| (a - b).norm_squared())
                            .sum::<f64>()
                            .sqrt();
                        let size: f64 = next.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt();
                        q = next;
                        if diff <= scheme.fp_tol * size.max(1.0) {
                            converged = true;
                            break;
                        }
                    }
                    if !converged {
                        return Err(Error::FixedPoint {
                            level: k,
                            node: j,
                            iterations: scheme.fp_max_iter,
                        });
                    }
                }
                debug_assert_eq!(child_vals.len(), c);
                let p = step(ops, &e, &q, &src, theta, dt).ok_or(Error::Singular { level: k, node: j })?;
                let keep_ops = if fixed_point && shared_ops.is_none() {
                    Some(ops.clone())
                } else {
                    None
                };
                Ok((p, q, keep_ops))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ps = Vec::with_capacity(count);
        let mut qs = Vec::with_capacity(count);
        let mut ops_keep = Vec::new();
        for (p, q, o) in results {
            ps.push(p);
            qs.push(q);
            if let Some(o) = o {
                ops_keep.push(o);
            }
        }
        p_levels[k] = Some(PerLevel::Nodes(ps));
        q_levels[k] = Some(PerLevel::Nodes(qs));
        if fixed_point {
            child_ops = Some(match shared_ops {
                Some(o) => PerLevel::Shared(o),
                None => PerLevel::Nodes(ops_keep),
            });
        }
    }
    Ok((
        p_levels.into_iter().map(|v| v.expect("filled")).collect(),
        q_levels.into_iter().map(|v| v.expect("filled")).collect(),
    ))
}

/// One theta step: `(I - theta dt L) p = E + dt [(1 - theta) L E + M q + S]`.
pub(crate) fn step(ops: &NodeOps, e: &CVec, q: &[CVec], src: &CVec, theta: f64, dt: f64) -> Option<CVec> {
    let mut rhs = ops.apply_m(q) + src;
    if theta != 1.0 {
        rhs += ops.l.apply(e) * Complex64::new(1.0 - theta, 0.0);
    }
    let rhs = e + rhs * Complex64::new(dt, 0.0);
    ops.solve_implicit(&rhs)
}

/// Wraps per-node values of an enumerable level.
pub(crate) fn wrap_components(levels: Vec<PerLevel<CVec>>) -> Vec<PerLevel<Vec<CVec>>> {
    levels
        .into_iter()
        .map(|l| match l {
            PerLevel::Shared(v) => PerLevel::Shared(vec![v]),
            PerLevel::Nodes(vs) => PerLevel::Nodes(vs.into_iter().map(|v| vec![v]).collect()),
        })
        .collect()
}

pub(crate) fn into_fields(
    basis: &crate::space::SpectralBasis,
    p: Vec<PerLevel<CVec>>,
    q: Vec<PerLevel<Vec<CVec>>>,
    d1: usize,
) -> (AdaptedField, AdaptedField) {
    (
        AdaptedField::new(basis.clone(), 1, wrap_components(p)),
        AdaptedField::new(basis.clone(), d1, q),
    )
}
