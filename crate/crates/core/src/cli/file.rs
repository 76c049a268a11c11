//! Scenario files: UTF-8 text with `[section]` headers and `key = value`
//! lines. `#` starts a comment.
//!
//! ```text
//! [problem]
//! d = 1
//! d1 = 1
//! T = 1
//! L = 1
//!
//! [coefficients]
//! a = 0.5            # scalar: multiple of the identity
//! sigma = [[0.2]]
//!
//! [data]
//! phi = exp(-x1^2)
//!
//! [discretization]
//! modes = 8
//! steps = 16
//! ```

use std::path::Path;

use crate::analysis::EstimateKind;
use crate::error::{Error, Result};
use crate::scenario::{validate, CoefficientField, EquationForm, SampleGrid, Scenario, ValidationReport};
use crate::solver::{MCoupling, SchemeConfig};

use super::expr::{line_column, parse_expression_for, EvalSink};

/// Space and filtration resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub modes: usize,
    pub steps: usize,
    pub branching: usize,
    /// Path count for the regression solver; `None` selects the tree.
    pub paths: Option<usize>,
    pub seed: u64,
    /// Regression polynomial degree.
    pub degree: usize,
}

impl Default for Discretization {
    fn default() -> Self {
        Self {
            modes: 8,
            steps: 16,
            branching: 2,
            paths: None,
            seed: 0,
            degree: 2,
        }
    }
}

/// Command options stored in the `[run]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub theta: f64,
    pub coupling: MCoupling,
    pub tol: Option<f64>,
    pub strict: bool,
    pub estimates: Vec<EstimateKind>,
    /// Largest acceptable fitted constant in `audit`.
    pub ceiling: f64,
    /// Monte Carlo sample count in `compare`.
    pub samples: usize,
    /// Smoothing indices in `mollify-study`.
    pub smoothing: Vec<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            theta: 1.0,
            coupling: MCoupling::Explicit,
            tol: None,
            strict: false,
            estimates: vec![EstimateKind::Weak, EstimateKind::Strong],
            ceiling: 1e4,
            samples: 10_000,
            smoothing: vec![4, 8, 16],
        }
    }
}

impl RunOptions {
    pub fn scheme(&self) -> SchemeConfig {
        SchemeConfig::default()
            .with_theta(self.theta)
            .with_coupling(self.coupling)
    }
}

/// A parsed and validated scenario file.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub discretization: Discretization,
    pub run: RunOptions,
    pub validation: ValidationReport,
    pub warnings: Vec<String>,
    /// Collects evaluation failures of the compiled expressions.
    pub sink: EvalSink,
}

pub fn parse_estimate(text: &str) -> Option<EstimateKind> {
    let t = text.trim();
    match t {
        "weak" => Some(EstimateKind::Weak),
        "strong" => Some(EstimateKind::Strong),
        "negative_part" => Some(EstimateKind::NegativePart),
        _ => t
            .strip_prefix("higher_")
            .and_then(|n| n.parse().ok())
            .map(|n| EstimateKind::Higher { n }),
    }
}

/// A value literal: an expression or a bracketed list, with the byte offset
/// of its first character in the file.
#[derive(Debug, Clone)]
enum Literal {
    Expr(String, usize),
    List(Vec<Literal>, usize),
}

impl Literal {
    fn offset(&self) -> usize {
        match self {
            Literal::Expr(_, o) | Literal::List(_, o) => *o,
        }
    }
}

struct Source<'a> {
    text: &'a str,
}

impl Source<'_> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        let (line, column) = line_column(self.text, offset);
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    fn literal(&self, start: usize, end: usize) -> Result<Literal> {
        let raw = &self.text[start..end];
        let lead = raw.len() - raw.trim_start().len();
        let s = start + lead;
        let e = start + raw.trim_end().len();
        if s >= e {
            return Err(self.error(start.min(self.text.len()), "empty value"));
        }
        let body = &self.text[s..e];
        if !body.starts_with('[') {
            return Ok(Literal::Expr(body.to_string(), s));
        }
        if !body.ends_with(']') {
            return Err(self.error(s, "unbalanced brackets"));
        }
        let mut items = Vec::new();
        let mut depth = 0i32;
        let mut item_start = s + 1;
        for (i, ch) in self.text[s + 1..e - 1].char_indices() {
            let at = s + 1 + i;
            match ch {
                '(' | '[' => depth += 1,
                ')' | ']' => {
                    depth -= 1;
                    if depth < 0 {
                        return Err(self.error(at, "unbalanced brackets"));
                    }
                }
                ',' if depth == 0 => {
                    items.push(self.literal(item_start, at)?);
                    item_start = at + 1;
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err(self.error(s, "unbalanced brackets"));
        }
        if !self.text[item_start..e - 1].trim().is_empty() || !items.is_empty() {
            items.push(self.literal(item_start, e - 1)?);
        }
        Ok(Literal::List(items, s))
    }
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    key_offset: usize,
    value: Literal,
}

fn sections(text: &str) -> Result<Vec<(String, usize, Vec<Entry>)>> {
    let src = Source { text };
    let mut out: Vec<(String, usize, Vec<Entry>)> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let content = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        };
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lead = content.len() - content.trim_start().len();
        let at = line_start + lead;
        if trimmed.starts_with('[') && trimmed.ends_with(']') && !trimmed.contains('=') {
            let name = trimmed[1..trimmed.len() - 1].trim().to_string();
            if out.iter().any(|(n, _, _)| *n == name) {
                return Err(src.error(at, format!("duplicate section [{name}]")));
            }
            out.push((name, at, Vec::new()));
            continue;
        }
        let Some(eq) = content.find('=') else {
            return Err(src.error(at, "expected 'key = value'"));
        };
        let key = content[..eq].trim().to_string();
        if key.is_empty() {
            return Err(src.error(at, "missing key"));
        }
        let Some((_, _, entries)) = out.last_mut() else {
            return Err(src.error(at, "key outside of any section"));
        };
        if entries.iter().any(|e| e.key == key) {
            return Err(src.error(at, format!("duplicate key '{key}'")));
        }
        let value = src.literal(line_start + eq + 1, line_start + content.trim_end().len().max(eq + 1))?;
        entries.push(Entry {
            key,
            key_offset: at,
            value,
        });
    }
    Ok(out)
}

const KEYS: &[(&str, &[&str])] = &[
    ("problem", &["d", "d1", "T", "L", "K", "kappa", "form"]),
    ("coefficients", &["a", "b", "c", "sigma", "nu"]),
    ("data", &["F", "phi"]),
    (
        "discretization",
        &["modes", "steps", "branching", "paths", "seed", "degree"],
    ),
    (
        "run",
        &[
            "theta",
            "coupling",
            "tol",
            "strict",
            "estimate",
            "ceiling",
            "samples",
            "smoothing",
        ],
    ),
];

struct Reader<'a> {
    src: Source<'a>,
    sections: Vec<(String, usize, Vec<Entry>)>,
    dim_x: usize,
    dim_w: usize,
    sink: EvalSink,
}

impl Reader<'_> {
    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections
            .iter()
            .find(|(n, _, _)| n == section)
            .and_then(|(_, _, es)| es.iter().find(|e| e.key == key))
    }

    fn scalar_text(&self, e: &Entry) -> Result<(String, usize)> {
        match &e.value {
            Literal::Expr(s, o) => Ok((s.clone(), *o)),
            Literal::List(_, o) => Err(self.src.error(*o, format!("'{}' expects a scalar", e.key))),
        }
    }

    fn number<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        let (s, o) = self.scalar_text(e)?;
        s.parse()
            .map(Some)
            .map_err(|_| self.src.error(o, format!("'{key}' expects a number, got '{s}'")))
    }

    fn word(&self, section: &str, key: &str) -> Result<Option<(String, usize)>> {
        self.entry(section, key).map(|e| self.scalar_text(e)).transpose()
    }

    fn field(&self, lit: &Literal, label: &str) -> Result<CoefficientField> {
        let Literal::Expr(text, offset) = lit else {
            return Err(self.src.error(lit.offset(), format!("{label} expects an expression")));
        };
        let ast = parse_expression_for(text, self.dim_x, self.dim_w).map_err(|e| match e {
            Error::Parse { column, message, .. } => self.src.error(offset + column_to_bytes(text, column), message),
            other => other,
        })?;
        ast.compile(label, &self.sink)
    }

    fn scalar_field(&self, section: &str, key: &str) -> Result<CoefficientField> {
        match self.entry(section, key) {
            Some(e) => self.field(&e.value, key),
            None => Ok(CoefficientField::zero()),
        }
    }

    fn vector_field(&self, key: &str, len: usize) -> Result<Vec<CoefficientField>> {
        let Some(e) = self.entry("coefficients", key) else {
            return Ok(vec![CoefficientField::zero(); len]);
        };
        match &e.value {
            Literal::Expr(..) => {
                let f = self.field(&e.value, key)?;
                Ok(vec![f; len])
            }
            Literal::List(items, o) => {
                if items.len() != len {
                    return Err(self
                        .src
                        .error(*o, format!("'{key}' needs {len} entries, got {}", items.len())));
                }
                items
                    .iter()
                    .enumerate()
                    .map(|(i, it)| self.field(it, &format!("{key}[{}]", i + 1)))
                    .collect()
            }
        }
    }

    fn matrix_field(&self, key: &str, rows: usize, cols: usize) -> Result<Vec<Vec<CoefficientField>>> {
        let Some(e) = self.entry("coefficients", key) else {
            return Ok(vec![vec![CoefficientField::zero(); cols]; rows]);
        };
        match &e.value {
            Literal::Expr(..) => {
                let f = self.field(&e.value, key)?;
                Ok((0..rows)
                    .map(|i| {
                        (0..cols)
                            .map(|j| if i == j { f.clone() } else { CoefficientField::zero() })
                            .collect()
                    })
                    .collect())
            }
            Literal::List(items, o) => {
                if items.len() != rows {
                    return Err(self
                        .src
                        .error(*o, format!("'{key}' needs {rows} rows, got {}", items.len())));
                }
                items
                    .iter()
                    .enumerate()
                    .map(|(i, row)| match row {
                        Literal::List(cells, ro) if cells.len() == cols => cells
                            .iter()
                            .enumerate()
                            .map(|(j, c)| self.field(c, &format!("{key}[{}][{}]", i + 1, j + 1)))
                            .collect(),
                        other => Err(self
                            .src
                            .error(other.offset(), format!("row {} of '{key}' needs {cols} entries", i + 1))),
                    })
                    .collect()
            }
        }
    }
}

fn column_to_bytes(text: &str, column: usize) -> usize {
    text.char_indices().nth(column - 1).map_or(text.len(), |(i, _)| i)
}

/// Parses scenario text without running the validator.
pub fn parse_scenario(text: &str) -> Result<(Scenario, Discretization, RunOptions, EvalSink)> {
    let secs = sections(text)?;
    let src = Source { text };
    for (name, at, entries) in &secs {
        let Some((_, keys)) = KEYS.iter().find(|(n, _)| n == name) else {
            return Err(src.error(*at, format!("unknown section [{name}]")));
        };
        for e in entries {
            if !keys.contains(&e.key.as_str()) {
                return Err(src.error(e.key_offset, format!("unknown key '{}' in [{name}]", e.key)));
            }
        }
    }
    let mut r = Reader {
        src,
        sections: secs,
        dim_x: 0,
        dim_w: 0,
        sink: EvalSink::default(),
    };
    let need = |v: Option<f64>, key: &str| v.ok_or_else(|| r.src.error(0, format!("[problem] needs '{key}'")));
    let dim_x: usize = r
        .number("problem", "d")?
        .ok_or_else(|| r.src.error(0, "[problem] needs 'd'"))?;
    let dim_w: usize = r.number("problem", "d1")?.unwrap_or(1);
    let horizon = need(r.number("problem", "T")?, "T")?;
    let halfwidth = need(r.number("problem", "L")?, "L")?;
    if dim_x == 0 || dim_w == 0 {
        return Err(Error::Structural("d and d1 must be positive".into()));
    }
    r.dim_x = dim_x;
    r.dim_w = dim_w;

    let mut s = Scenario::heat(dim_x, dim_w, horizon, halfwidth);
    if let Some(k) = r.number("problem", "K")? {
        s.bound_k = k;
    }
    if let Some(k) = r.number("problem", "kappa")? {
        s.ellipticity_kappa = k;
    }
    if let Some((form, o)) = r.word("problem", "form")? {
        s.form = match form.as_str() {
            "divergence" => EquationForm::Divergence,
            "non_divergence" => EquationForm::NonDivergence,
            _ => return Err(r.src.error(o, format!("unknown form '{form}'"))),
        };
    }
    if r.entry("coefficients", "a").is_some() {
        s.a = r.matrix_field("a", dim_x, dim_x)?;
    }
    s.b = r.vector_field("b", dim_x)?;
    s.c = r.scalar_field("coefficients", "c")?;
    s.sigma = r.matrix_field("sigma", dim_x, dim_w)?;
    s.nu = r.vector_field("nu", dim_w)?;
    s.free_term = r.scalar_field("data", "F")?;
    s.phi = r.scalar_field("data", "phi")?;

    let mut disc = Discretization::default();
    macro_rules! set {
        ($target:expr, $sec:literal, $key:literal) => {
            if let Some(v) = r.number($sec, $key)? {
                $target = v;
            }
        };
    }
    set!(disc.modes, "discretization", "modes");
    set!(disc.steps, "discretization", "steps");
    set!(disc.branching, "discretization", "branching");
    set!(disc.seed, "discretization", "seed");
    set!(disc.degree, "discretization", "degree");
    disc.paths = r.number("discretization", "paths")?;

    let mut run = RunOptions::default();
    set!(run.theta, "run", "theta");
    set!(run.ceiling, "run", "ceiling");
    set!(run.samples, "run", "samples");
    set!(run.strict, "run", "strict");
    run.tol = r.number("run", "tol")?;
    if let Some((c, o)) = r.word("run", "coupling")? {
        run.coupling = match c.as_str() {
            "explicit" => MCoupling::Explicit,
            "fixed_point" => MCoupling::FixedPoint,
            _ => return Err(r.src.error(o, format!("unknown coupling '{c}'"))),
        };
    }
    if let Some(e) = r.entry("run", "estimate") {
        run.estimates = list_words(&r, e)?
            .into_iter()
            .map(|(w, o)| parse_estimate(&w).ok_or_else(|| r.src.error(o, format!("unknown estimate '{w}'"))))
            .collect::<Result<_>>()?;
    }
    if let Some(e) = r.entry("run", "smoothing") {
        run.smoothing = list_words(&r, e)?
            .into_iter()
            .map(|(w, o)| {
                w.parse()
                    .map_err(|_| r.src.error(o, format!("bad smoothing index '{w}'")))
            })
            .collect::<Result<_>>()?;
    }
    s.check_structure()?;
    Ok((s, disc, run, r.sink))
}

fn list_words(r: &Reader, e: &Entry) -> Result<Vec<(String, usize)>> {
    match &e.value {
        Literal::Expr(s, o) => Ok(vec![(s.clone(), *o)]),
        Literal::List(items, _) => items
            .iter()
            .map(|it| match it {
                Literal::Expr(s, o) => Ok((s.clone(), *o)),
                Literal::List(_, o) => Err(r.src.error(*o, "nested list not allowed here")),
            })
            .collect(),
    }
}

/// Validator sample grid used when loading files.
pub fn default_grid(scenario: &Scenario, seed: u64) -> SampleGrid {
    let n_x = if scenario.dim_x == 1 { 17 } else { 9 };
    SampleGrid::uniform(scenario, 3, n_x, 4, seed)
}

/// Parses, validates and reports. A failed validation is a warning unless
/// `strict` (or `strict = true` in the file) is set.
pub fn load_scenario_text(text: &str, strict: bool) -> Result<LoadedScenario> {
    let (scenario, discretization, mut run, sink) = parse_scenario(text)?;
    run.strict |= strict;
    let validation = validate(&scenario, None, &default_grid(&scenario, discretization.seed))?;
    sink.check()?;
    let mut warnings = Vec::new();
    let failed: Vec<&str> = [
        ("symmetry", validation.symmetry_ok),
        ("super-parabolicity", validation.superparabolic_ok),
        ("bounds", validation.bounds_ok),
        ("modulus", validation.modulus_ok),
    ]
    .iter()
    .filter(|(_, ok)| !ok)
    .map(|(n, _)| *n)
    .collect();
    if !failed.is_empty() {
        let msg = format!(
            "{} check failed (min margin {:.3e}, upper margin {:.3e})",
            failed.join(", "),
            validation.min_margin,
            validation.upper_margin
        );
        if run.strict {
            return Err(Error::Validation(msg));
        }
        warnings.push(msg);
    }
    Ok(LoadedScenario {
        scenario,
        discretization,
        run,
        validation,
        warnings,
        sink,
    })
}

pub fn load_scenario(path: &Path, strict: bool) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(path)?;
    load_scenario_text(&text, strict)
}

fn field_text(f: &CoefficientField, label: &str) -> Result<String> {
    if let Some(src) = f.source() {
        return Ok(src.to_string());
    }
    if let Some(v) = f.as_constant() {
        return Ok(format!("{v:?}"));
    }
    Err(Error::Structural(format!(
        "{label} has no expression text to serialize"
    )))
}

/// Renders a scenario back to file text. Every non-constant field must carry
/// its source expression.
pub fn scenario_to_text(s: &Scenario, disc: &Discretization, run: &RunOptions) -> Result<String> {
    let row = |fields: &[CoefficientField], label: &str| -> Result<String> {
        let cells = fields
            .iter()
            .map(|f| field_text(f, label))
            .collect::<Result<Vec<_>>>()?;
        Ok(format!("[{}]", cells.join(", ")))
    };
    let matrix = |m: &[Vec<CoefficientField>], label: &str| -> Result<String> {
        let rows = m.iter().map(|r| row(r, label)).collect::<Result<Vec<_>>>()?;
        Ok(format!("[{}]", rows.join(", ")))
    };
    let mut out = String::new();
    out += "[problem]\n";
    out += &format!("d = {}\nd1 = {}\n", s.dim_x, s.dim_w);
    out += &format!("T = {:?}\nL = {:?}\n", s.horizon, s.domain_halfwidth);
    out += &format!("K = {:?}\nkappa = {:?}\n", s.bound_k, s.ellipticity_kappa);
    out += &format!("form = {}\n\n", s.form.as_str());
    out += "[coefficients]\n";
    out += &format!("a = {}\n", matrix(&s.a, "a")?);
    out += &format!("b = {}\n", row(&s.b, "b")?);
    out += &format!("c = {}\n", field_text(&s.c, "c")?);
    out += &format!("sigma = {}\n", matrix(&s.sigma, "sigma")?);
    out += &format!("nu = {}\n\n", row(&s.nu, "nu")?);
    out += "[data]\n";
    out += &format!("F = {}\n", field_text(&s.free_term, "F")?);
    out += &format!("phi = {}\n\n", field_text(&s.phi, "phi")?);
    out += "[discretization]\n";
    out += &format!(
        "modes = {}\nsteps = {}\nbranching = {}\n",
        disc.modes, disc.steps, disc.branching
    );
    if let Some(p) = disc.paths {
        out += &format!("paths = {p}\n");
    }
    out += &format!("seed = {}\ndegree = {}\n\n", disc.seed, disc.degree);
    out += "[run]\n";
    out += &format!("theta = {:?}\n", run.theta);
    out += &format!(
        "coupling = {}\n",
        match run.coupling {
            MCoupling::Explicit => "explicit",
            MCoupling::FixedPoint => "fixed_point",
        }
    );
    if let Some(t) = run.tol {
        out += &format!("tol = {t:?}\n");
    }
    out += &format!("strict = {}\n", run.strict);
    let est: Vec<String> = run.estimates.iter().map(|e| e.name()).collect();
    out += &format!("estimate = [{}]\n", est.join(", "));
    out += &format!("ceiling = {:?}\nsamples = {}\n", run.ceiling, run.samples);
    let sm: Vec<String> = run.smoothing.iter().map(|n| n.to_string()).collect();
    out += &format!("smoothing = [{}]\n", sm.join(", "));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::WienerHistory;

    const HEAT: &str = "[problem]\nd = 1\nT = 1\nL = 2\n\n[data]\nphi = exp(-x1^2)\n";

    #[test]
    fn minimal_heat_file() {
        let l = load_scenario_text(HEAT, false).unwrap();
        let s = &l.scenario;
        assert_eq!((s.dim_x, s.dim_w), (1, 1));
        assert_eq!(s.a[0][0].as_constant(), Some(0.5));
        assert!(s.lower_order_zero());
        assert!(l.warnings.is_empty());
        assert_eq!(l.discretization, Discretization::default());
    }

    #[test]
    fn superparabolic_boundary_warns_or_fails() {
        let text = format!("{HEAT}\n[coefficients]\na = 0.5\nsigma = [[1]]\n");
        let l = load_scenario_text(&text, false).unwrap();
        assert_eq!(l.warnings.len(), 1);
        assert!(!l.validation.superparabolic_ok);
        assert!(matches!(load_scenario_text(&text, true), Err(Error::Validation(_))));
    }

    #[test]
    fn terminal_datum_may_use_wiener() {
        let text = "[problem]\nd = 1\nT = 1\nL = 1\n[data]\nphi = cos(x1) * w1\n";
        let l = load_scenario_text(text, false).unwrap();
        assert!(l.scenario.phi.is_adapted());
        let h = WienerHistory::from_increments(1, 0.5, vec![0.5, 0.25]).unwrap();
        assert!((l.scenario.phi.eval(1.0, &[0.0], &h) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_file_positions() {
        let text = "[problem]\nd = 1\nT = 1\nL = 1\n[data]\nphi = sin(x2)\n";
        match parse_scenario(text) {
            Err(Error::Parse {
                line: 6,
                column: 11,
                message,
            }) => assert!(message.contains("x2")),
            other => panic!("{other:?}"),
        }
        let text = "[problem]\nd = 1\nT = 1\nL = 1\n[data]\nF = (1 + x1\n";
        assert!(matches!(
            parse_scenario(text),
            Err(Error::Parse { line: 6, column: 5, .. })
        ));
        let text = "[problem]\nd = 1\nT = 1\nL = 1\nfoo = 2\n";
        assert!(matches!(
            parse_scenario(text),
            Err(Error::Parse { line: 5, column: 1, .. })
        ));
        let text = "[problem]\nd = 2\nT = 1\nL = 1\n[coefficients]\na = [[0.5, 0], [0.5]]\n";
        assert!(matches!(parse_scenario(text), Err(Error::Parse { line: 6, .. })));
        assert!(matches!(parse_scenario("d = 1\n"), Err(Error::Parse { line: 1, .. })));
        let text = "[problem]\nd = 1\nT = 1\nL = 1\n[coefficients]\nc = 1/(1-1)\n";
        assert!(matches!(parse_scenario(text), Err(Error::Eval { .. })));
    }

    #[test]
    fn round_trip_is_evaluator_equivalent() {
        let text = "[problem]\nd = 2\nd1 = 2\nT = 0.5\nL = 1.5\nK = 3\nkappa = 0.25\nform = divergence\n\
            [coefficients]\na = [[0.6 + 0.1*sin(x1), 0.05*cos(x2)], [0.05*cos(x2), 0.7]]\n\
            b = [0.1, -x1*0.2]\nc = 0.3*t\nsigma = [[0.1, 0], [0, 0.2*w1]]\nnu = 0.1\n\
            [data]\nF = max(x1, 0) + w2\nphi = exp(-(x1^2 + x2^2))\n\
            [discretization]\nmodes = 4\nsteps = 3\npaths = 50\nseed = 9\n\
            [run]\ntheta = 0.5\ntol = 1e-8\nestimate = [weak, higher_2]\nsmoothing = [2, 4]\n";
        let (s, d, r, _) = parse_scenario(text).unwrap();
        let again = scenario_to_text(&s, &d, &r).unwrap();
        let (s2, d2, r2, _) = parse_scenario(&again).unwrap();
        assert_eq!((&d, &r), (&d2, &r2));
        assert_eq!(s2.form, EquationForm::Divergence);
        let h = WienerHistory::from_increments(2, 0.25, vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let fields = |s: &Scenario| -> Vec<CoefficientField> {
            let mut v: Vec<CoefficientField> = s.a.iter().flatten().cloned().collect();
            v.extend(s.b.iter().cloned());
            v.extend(s.sigma.iter().flatten().cloned());
            v.extend(s.nu.iter().cloned());
            v.extend([s.c.clone(), s.free_term.clone(), s.phi.clone()]);
            v
        };
        for (f, g) in fields(&s).iter().zip(fields(&s2).iter()) {
            for i in 0..7 {
                let x = [-1.5 + 0.4 * i as f64, 0.3 * i as f64 - 1.0];
                assert!((f.eval(0.5, &x, &h) - g.eval(0.5, &x, &h)).abs() <= 1e-12);
            }
        }
        assert_eq!(again, scenario_to_text(&s2, &d2, &r2).unwrap());
    }

    #[test]
    fn programmatic_fields_need_source() {
        let s = Scenario::heat(1, 1, 1.0, 1.0).with_phi(CoefficientField::deterministic(|_, x| x[0]));
        assert!(scenario_to_text(&s, &Discretization::default(), &RunOptions::default()).is_err());
        let s = Scenario::heat(1, 1, 1.0, 1.0);
        assert!(scenario_to_text(&s, &Discretization::default(), &RunOptions::default()).is_ok());
    }
}
