use serde_json::{json, Map, Value};

use crate::analysis::{energy_audit, ito_identity_check, mollify, positivity_check, triple_norm, MollifierConfig};
use crate::error::{Error, ErrorClass, Result};
use crate::oracle::{feynman_kac_mc, solve_dense};
use crate::scenario::validate as validate_scenario;
use crate::solver::{solve_regression, solve_tree, stored_weights, AdaptedField, SolutionPair};
use crate::space::{evaluate_at, reconstruct, sobolev_norm_sq, SpatialField, SpectralBasis};
use crate::wiener::{build_tree, sample_paths, WienerTree};

use super::file::{default_grid, LoadedScenario};
use super::Outcome;

const DEFAULT_PATHS: usize = 1000;

fn basis_for(l: &LoadedScenario) -> Result<SpectralBasis> {
    SpectralBasis::new(l.scenario.dim_x, l.discretization.modes, l.scenario.domain_halfwidth)
}

/// Symbolic tree for deterministic scenarios, enumerated tree otherwise.
fn tree_for(l: &LoadedScenario) -> Result<WienerTree> {
    let (s, d) = (&l.scenario, &l.discretization);
    if s.is_deterministic() {
        WienerTree::symbolic(s.dim_w, d.steps, d.branching, s.horizon)
    } else {
        build_tree(s.dim_w, d.steps, d.branching, s.horizon)
    }
}

fn manifest(l: &LoadedScenario, label: &str, with_tree: bool) -> Map<String, Value> {
    let (s, d, r) = (&l.scenario, &l.discretization, &l.run);
    let mut m = Map::new();
    m.insert("scenario".into(), json!(label));
    m.insert("seed".into(), json!(d.seed));
    m.insert("dim_x".into(), json!(s.dim_x));
    m.insert("dim_w".into(), json!(s.dim_w));
    m.insert("horizon".into(), json!(s.horizon));
    m.insert("domain_halfwidth".into(), json!(s.domain_halfwidth));
    m.insert("form".into(), json!(s.form.as_str()));
    m.insert("modes".into(), json!(d.modes));
    m.insert("steps".into(), json!(d.steps));
    m.insert("dt".into(), json!(s.horizon / d.steps as f64));
    if with_tree {
        m.insert("branching".into(), json!(d.branching));
    } else {
        m.insert("paths".into(), json!(d.paths.unwrap_or(DEFAULT_PATHS)));
        m.insert("degree".into(), json!(d.degree));
    }
    m.insert("theta".into(), json!(r.theta));
    m.insert("coupling".into(), json!(r.coupling));
    m.insert("validation".into(), json!(l.validation));
    m.insert("warnings".into(), json!(l.warnings));
    m
}

/// `E sum_c |field_c|_0^2` at level `k`.
fn level_energy(field: &AdaptedField, tree: &WienerTree, k: usize) -> f64 {
    let level = field.level(k);
    let norms: Vec<f64> = level
        .values()
        .map(|comps| {
            comps
                .iter()
                .map(|c| sobolev_norm_sq(field.basis(), c.as_slice(), 0))
                .sum()
        })
        .collect();
    if norms.len() == 1 {
        return norms[0];
    }
    let w = stored_weights(level, tree, k);
    norms.iter().zip(&w).map(|(a, b)| a * b).sum()
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6e}")
}

fn outcome(summary: Map<String, Value>, records: Vec<Value>, table: String, pass: bool) -> Outcome {
    Outcome {
        summary,
        records,
        csv: None,
        table,
        pass,
        failure: ErrorClass::Tolerance,
    }
}

fn csv_header(dim_x: usize, dim_w: usize) -> String {
    let mut cols = vec!["level".to_string(), "node".to_string()];
    cols.extend((1..=dim_x).map(|i| format!("x{i}")));
    cols.push("p".into());
    cols.extend((1..=dim_w).map(|k| format!("q{k}")));
    cols.join(",") + "\n"
}

/// One row per grid point; `q` is blank at the terminal level.
fn csv_rows(
    out: &mut String,
    level: usize,
    node: usize,
    points: &[Vec<f64>],
    p: &[f64],
    q: Option<&[Vec<f64>]>,
    dim_w: usize,
) {
    for (i, x) in points.iter().enumerate() {
        out.push_str(&format!("{level},{node}"));
        for xi in x {
            out.push_str(&format!(",{xi}"));
        }
        out.push_str(&format!(",{}", p[i]));
        match q {
            Some(q) => q.iter().for_each(|qc| out.push_str(&format!(",{}", qc[i]))),
            None => out.push_str(&",".repeat(dim_w)),
        }
        out.push('\n');
    }
}

fn solve_tree_loaded(l: &LoadedScenario) -> Result<(WienerTree, SpectralBasis, SolutionPair)> {
    let tree = tree_for(l)?;
    let basis = basis_for(l)?;
    let sol = solve_tree(&l.scenario, &tree, &basis, &l.run.scheme())?;
    Ok((tree, basis, sol))
}

pub(super) fn solve(l: &LoadedScenario, label: &str, dump_all: bool) -> Result<Outcome> {
    if l.discretization.paths.is_some() {
        return regress(l, label).map(|mut o| {
            o.summary.insert("solver".into(), json!("regression"));
            o
        });
    }
    let (tree, basis, sol) = solve_tree_loaded(l)?;
    let n = sol.n_steps;
    let dw = l.scenario.dim_w;
    let mut records = Vec::with_capacity(n + 1);
    let mut table = format!("{:>6} {:>10} {:>14} {:>14}\n", "level", "t", "E|p|^2", "E|q|^2");
    for k in 0..=n {
        let p = level_energy(&sol.p, &tree, k);
        let q = (k < n).then(|| level_energy(&sol.q, &tree, k));
        let t = k as f64 * sol.dt;
        records.push(json!({"level": k, "t": t, "p_energy": p, "q_energy": q}));
        table += &format!(
            "{k:>6} {t:>10.4} {:>14} {:>14}\n",
            fmt_num(p),
            q.map_or("-".to_string(), fmt_num)
        );
    }
    let points = basis.grid_points();
    let mut csv = csv_header(l.scenario.dim_x, dw);
    let last = if dump_all { n } else { 0 };
    for k in 0..=last {
        for j in 0..sol.p.level(k).stored() {
            let p = reconstruct(&sol.p.field(k, j, 0));
            let q: Option<Vec<Vec<f64>>> =
                (k < n).then(|| (0..dw).map(|c| reconstruct(&sol.q.field(k, j, c))).collect());
            csv_rows(&mut csv, k, j, &points, &p, q.as_deref(), dw);
        }
    }
    let p0 = reconstruct(&sol.p0());
    let mut summary = manifest(l, label, true);
    summary.insert("solver".into(), json!("tree"));
    summary.insert(
        "collapsed".into(),
        json!(sol.p.is_collapsed(0) && sol.p.is_collapsed(n)),
    );
    summary.insert("p0_energy".into(), json!(level_energy(&sol.p, &tree, 0)));
    summary.insert("p0_min".into(), json!(p0.iter().cloned().fold(f64::INFINITY, f64::min)));
    summary.insert(
        "p0_max".into(),
        json!(p0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
    );
    let mut o = outcome(summary, records, table, true);
    o.csv = Some(csv);
    Ok(o)
}

pub(super) fn validate(l: &LoadedScenario, label: &str) -> Result<Outcome> {
    let v = &l.validation;
    let table = format!(
        "symmetry {}\nsuperparabolic {} (min margin {})\nbounds {} (upper margin {})\nsamples {}\n",
        v.symmetry_ok,
        v.superparabolic_ok,
        fmt_num(v.min_margin),
        v.bounds_ok,
        fmt_num(v.upper_margin),
        v.sample_count
    );
    let mut o = outcome(manifest(l, label, true), Vec::new(), table, v.all_ok());
    o.failure = ErrorClass::Validation;
    Ok(o)
}

pub(super) fn audit(l: &LoadedScenario, label: &str) -> Result<Outcome> {
    let (tree, basis, sol) = solve_tree_loaded(l)?;
    let mut records = Vec::new();
    let mut pass = true;
    let mut table = format!(
        "{:<14} {:>14} {:>14} {:>14} {:>10} {:>5}\n",
        "estimate", "lhs", "rhs", "fitted_C", "ceiling", "pass"
    );
    for kind in &l.run.estimates {
        let r = energy_audit(&sol, &l.scenario, &tree, &basis, *kind, l.run.ceiling)?;
        pass &= r.pass;
        table += &format!(
            "{:<14} {:>14} {:>14} {:>14} {:>10} {:>5}\n",
            kind.name(),
            fmt_num(r.lhs),
            fmt_num(r.rhs_data),
            fmt_num(r.fitted_c),
            r.ceiling,
            r.pass
        );
        let mut rec = Map::new();
        rec.insert("estimate".into(), json!(kind.name()));
        if let Value::Object(m) = json!(r) {
            rec.extend(m.into_iter().filter(|(k, _)| k != "kind"));
        }
        records.push(Value::Object(rec));
    }
    let defect = ito_identity_check(&sol, &l.scenario, &tree, &basis)?;
    let max_defect = defect.iter().map(|v| v.abs()).fold(0.0, f64::max);
    table += &format!("energy identity max defect {}\n", fmt_num(max_defect));
    let mut summary = manifest(l, label, true);
    summary.insert("ceiling".into(), json!(l.run.ceiling));
    summary.insert("energy_identity_max_defect".into(), json!(max_defect));
    Ok(outcome(summary, records, table, pass))
}

fn relative_diff(a: &AdaptedField, b: &AdaptedField) -> f64 {
    let scale = a.max_abs().max(b.max_abs());
    let diff = a.max_abs_diff(b);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub(super) fn compare(l: &LoadedScenario, label: &str) -> Result<Outcome> {
    let s = &l.scenario;
    let d = &l.discretization;
    let tree = build_tree(s.dim_w, d.steps, d.branching, s.horizon)?;
    let basis = basis_for(l)?;
    let scheme = l.run.scheme();
    let sol = solve_tree(s, &tree, &basis, &scheme)?;
    let dense = solve_dense(s, &tree, &basis, &scheme)?;
    let tol = l.run.tol.unwrap_or(1e-10);
    let dp = relative_diff(&sol.p, &dense.p);
    let dq = relative_diff(&sol.q, &dense.q);
    let diff = dp.max(dq);
    let pass = diff <= tol;
    let mut records = vec![json!({"oracle": "dense", "p_rel_diff": dp, "q_rel_diff": dq, "tol": tol, "pass": pass})];
    let mut table = format!(
        "dense oracle: p {} q {} (tol {tol:e}) {}\n",
        fmt_num(dp),
        fmt_num(dq),
        pass
    );
    if s.is_deterministic() && s.sigma.iter().flatten().all(|f| f.is_zero()) && s.nu.iter().all(|f| f.is_zero()) {
        let x = vec![0.0; s.dim_x];
        let (mean, se) = feynman_kac_mc(s, &x, 0.0, l.run.samples, d.seed)?;
        let p0 = evaluate_at(&sol.p0(), &x);
        let z = if se > 0.0 { (p0 - mean).abs() / se } else { 0.0 };
        records.push(json!({
            "oracle": "feynman_kac", "x": x, "solver": p0, "mc_mean": mean, "mc_stderr": se,
            "samples": l.run.samples, "z": z
        }));
        table += &format!(
            "feynman-kac at origin: solver {} mc {} +- {} (z {:.2})\n",
            fmt_num(p0),
            fmt_num(mean),
            fmt_num(se),
            z
        );
    }
    let mut summary = manifest(l, label, true);
    summary.insert("tol".into(), json!(tol));
    summary.insert("max_rel_diff".into(), json!(diff));
    Ok(outcome(summary, records, table, pass))
}

pub(super) fn positivity(l: &LoadedScenario, label: &str) -> Result<Outcome> {
    let (tree, basis, sol) = solve_tree_loaded(l)?;
    let r = positivity_check(&sol, &l.scenario, &tree, &basis)?;
    let tol = l.run.tol.unwrap_or(1e-6);
    let scale = sol.p.max_abs().max(1.0);
    let pass = r.min_value >= -tol * scale && r.envelope_holds;
    let records = (0..=sol.n_steps)
        .map(|k| json!({"level": k, "t": k as f64 * sol.dt, "negative_part": r.negpart_per_level[k], "data": r.data_per_level[k]}))
        .collect();
    let table = format!(
        "min p {}\nenvelope constant {} (regression {})\nterminal excess {}\n",
        fmt_num(r.min_value),
        fmt_num(r.fitted_c),
        fmt_num(r.regression_c),
        fmt_num(r.terminal_excess)
    );
    let mut summary = manifest(l, label, true);
    summary.insert("tol".into(), json!(tol));
    summary.insert("scale".into(), json!(scale));
    summary.insert("min_value".into(), json!(r.min_value));
    summary.insert("fitted_c".into(), json!(r.fitted_c));
    summary.insert("regression_c".into(), json!(r.regression_c));
    summary.insert("terminal_excess".into(), json!(r.terminal_excess));
    summary.insert("envelope_holds".into(), json!(r.envelope_holds));
    Ok(outcome(summary, records, table, pass))
}

pub(super) fn mollify_study(l: &LoadedScenario, label: &str) -> Result<Outcome> {
    let (tree, basis, sol) = solve_tree_loaded(l)?;
    let reference = triple_norm(&sol.p, &tree, 0);
    let mut records = Vec::new();
    let mut distances = Vec::new();
    let mut table = format!("{:>6} {:>10} {:>14} {:>10}\n", "n", "radius", "distance", "validates");
    let s = &l.scenario;
    for &n in &l.run.smoothing {
        let cfg = MollifierConfig::new(n);
        let m = mollify(s, &cfg)?;
        let relaxed = m.clone().with_constants(2.0 * s.bound_k, 0.5 * s.ellipticity_kappa);
        let v = validate_scenario(&relaxed, None, &default_grid(&relaxed, l.discretization.seed))?;
        let sm = solve_tree(&m, &tree, &basis, &l.run.scheme())?;
        let dist = triple_norm(&sm.p.combine(1.0, &sol.p, -1.0)?, &tree, 0);
        distances.push(dist);
        table += &format!(
            "{n:>6} {:>10.4} {:>14} {:>10}\n",
            cfg.radius(),
            fmt_num(dist),
            v.all_ok()
        );
        records.push(json!({
            "smoothing_index": n, "radius": cfg.radius(), "distance": dist,
            "relative_distance": if reference > 0.0 { dist / reference } else { dist },
            "validates_relaxed": v.all_ok()
        }));
    }
    let monotone = distances.windows(2).all(|w| w[1] <= w[0]);
    let mut summary = manifest(l, label, true);
    summary.insert("reference_norm".into(), json!(reference));
    summary.insert("monotone".into(), json!(monotone));
    Ok(outcome(summary, records, table, monotone))
}

pub(super) fn regress(l: &LoadedScenario, label: &str) -> Result<Outcome> {
    let s = &l.scenario;
    let d = &l.discretization;
    let paths = d.paths.unwrap_or(DEFAULT_PATHS);
    let ensemble = sample_paths(s.dim_w, d.steps, paths, s.horizon, d.seed)?;
    let basis = basis_for(l)?;
    let sol = solve_regression(s, &ensemble, &basis, d.degree, &l.run.scheme())?;
    let mut records = Vec::new();
    let mut table = format!("{:>6} {:>10} {:>14} {:>14}\n", "level", "t", "|E p|", "stderr");
    for k in 0..=d.steps {
        let mean = sol.mean_p(k);
        let norm = sobolev_norm_sq(&basis, mean.coefficients.as_slice(), 0).sqrt();
        let se = sol.stderr_p(k);
        let t = k as f64 * sol.dt;
        records.push(json!({"level": k, "t": t, "mean_p_norm": norm, "stderr": se}));
        table += &format!("{k:>6} {t:>10.4} {:>14} {:>14}\n", fmt_num(norm), fmt_num(se));
    }
    let mut summary = manifest(l, label, false);
    summary.insert("solver".into(), json!("regression"));
    summary.insert("p0_stderr".into(), json!(sol.stderr_p(0)));
    let mut pass = true;
    match tree_for(l).and_then(|tree| solve_tree(s, &tree, &basis, &l.run.scheme())) {
        Ok(reference) => {
            let diff: SpatialField = SpatialField {
                basis: basis.clone(),
                coefficients: &sol.mean_p(0).coefficients - &reference.p0().coefficients,
            };
            let dist = sobolev_norm_sq(&basis, diff.coefficients.as_slice(), 0).sqrt();
            summary.insert("tree_p0_distance".into(), json!(dist));
            table += &format!("distance to tree solution at t=0: {}\n", fmt_num(dist));
            if let Some(tol) = l.run.tol {
                summary.insert("tol".into(), json!(tol));
                pass = dist <= tol;
            }
        }
        Err(Error::Budget { .. }) => {
            summary.insert("tree_p0_distance".into(), Value::Null);
        }
        Err(e) => return Err(e),
    }
    Ok(outcome(summary, records, table, pass))
}
