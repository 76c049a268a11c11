//! Command-line front end: scenario files, command dispatch and result
//! files.
//!
//! Every command loads a scenario file, applies flag overrides, runs, and
//! prints a short table. With `--out DIR` it also writes `summary.json`,
//! `records.jsonl` and, for `solve`, `fields.csv`. The exit code is 0 when
//! every declared tolerance passes and [`ErrorClass::exit_code`] otherwise.

mod commands;
pub mod expr;
pub mod file;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use crate::error::{Error, ErrorClass, Result};

pub use expr::{parse_expression, parse_expression_for, EvalSink, ExpressionAst};
pub use file::{
    load_scenario, load_scenario_text, parse_estimate, parse_scenario, scenario_to_text, Discretization,
    LoadedScenario, RunOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "bspde",
    version,
    about = "Solve and audit linear backward stochastic parabolic equations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve on the tree (or on paths with --paths) and dump fields.
    Solve(RunArgs),
    /// Check the standing assumptions on a sample grid.
    Validate(RunArgs),
    /// Fit the constants of the energy estimates.
    Audit(RunArgs),
    /// Compare the tree solver with the dense and Monte Carlo oracles.
    Compare(RunArgs),
    /// Minimum of p and the negative-part envelope.
    Positivity(RunArgs),
    /// Distance between mollified-coefficient and original solutions.
    MollifyStudy(RunArgs),
    /// Regression solver on sampled paths.
    Regress(RunArgs),
}

impl Command {
    pub fn parts(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Solve(a) => ("solve", a),
            Command::Validate(a) => ("validate", a),
            Command::Audit(a) => ("audit", a),
            Command::Compare(a) => ("compare", a),
            Command::Positivity(a) => ("positivity", a),
            Command::MollifyStudy(a) => ("mollify-study", a),
            Command::Regress(a) => ("regress", a),
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    /// Scenario file.
    pub scenario: PathBuf,
    /// Directory for summary.json, records.jsonl and fields.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Treat validation failures as errors.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub branching: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// weak, strong, higher_N or negative_part; repeatable or comma separated.
    #[arg(long, value_delimiter = ',')]
    pub estimate: Vec<String>,
    /// Dump every level in fields.csv, not only level 0.
    #[arg(long)]
    pub dump_all: bool,
}

/// Everything a command produces.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Map<String, Value>,
    pub records: Vec<Value>,
    pub csv: Option<String>,
    pub table: String,
    pub pass: bool,
    /// Exit class when `pass` is false.
    pub failure: ErrorClass,
}

/// Loads the scenario named in `args` and applies flag overrides.
pub fn load_with_overrides(args: &RunArgs) -> Result<LoadedScenario> {
    let text = fs::read_to_string(&args.scenario)?;
    let mut loaded = load_scenario_text(&text, args.strict)?;
    let d = &mut loaded.discretization;
    if let Some(v) = args.modes {
        d.modes = v;
    }
    if let Some(v) = args.steps {
        d.steps = v;
    }
    if let Some(v) = args.branching {
        d.branching = v;
    }
    if let Some(v) = args.paths {
        d.paths = Some(v);
    }
    if let Some(v) = args.seed {
        d.seed = v;
    }
    let r = &mut loaded.run;
    if let Some(v) = args.theta {
        r.theta = v;
    }
    if let Some(v) = args.tol {
        r.tol = Some(v);
    }
    if !args.estimate.is_empty() {
        r.estimates = args
            .estimate
            .iter()
            .map(|e| {
                parse_estimate(e).ok_or_else(|| Error::Parse {
                    line: 0,
                    column: 0,
                    message: format!("unknown estimate '{e}'"),
                })
            })
            .collect::<Result<_>>()?;
    }
    Ok(loaded)
}

/// Runs one command without writing files.
pub fn execute(command: &Command) -> Result<Outcome> {
    let (name, args) = command.parts();
    let loaded = load_with_overrides(args)?;
    let label = args
        .scenario
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let outcome = match command {
        Command::Solve(_) => commands::solve(&loaded, &label, args.dump_all),
        Command::Validate(_) => commands::validate(&loaded, &label),
        Command::Audit(_) => commands::audit(&loaded, &label),
        Command::Compare(_) => commands::compare(&loaded, &label),
        Command::Positivity(_) => commands::positivity(&loaded, &label),
        Command::MollifyStudy(_) => commands::mollify_study(&loaded, &label),
        Command::Regress(_) => commands::regress(&loaded, &label),
    };
    loaded.sink.check()?;
    let mut outcome = outcome?;
    outcome.summary.insert("pass".into(), Value::Bool(outcome.pass));
    let mut ordered = Map::new();
    ordered.insert("command".into(), Value::String(name.into()));
    ordered.extend(outcome.summary);
    outcome.summary = ordered;
    Ok(outcome)
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_outputs(outcome: &Outcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let summary = serde_json::to_string_pretty(&Value::Object(outcome.summary.clone()))
        .map_err(|e| Error::Structural(e.to_string()))?;
    write_atomic(&dir.join("summary.json"), &(summary + "\n"))?;
    let mut lines = String::new();
    for r in &outcome.records {
        lines += &serde_json::to_string(r).map_err(|e| Error::Structural(e.to_string()))?;
        lines.push('\n');
    }
    write_atomic(&dir.join("records.jsonl"), &lines)?;
    if let Some(csv) = &outcome.csv {
        write_atomic(&dir.join("fields.csv"), csv)?;
    }
    Ok(())
}

/// Parses `argv`, runs, writes outputs and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ErrorClass::Parse.exit_code()
            } else {
                0
            };
        }
    };
    let (_, args) = cli.command.parts();
    let result = execute(&cli.command).and_then(|outcome| {
        if let Some(dir) = &args.out {
            write_outputs(&outcome, dir)?;
        }
        Ok(outcome)
    });
    match result {
        Ok(outcome) => {
            if let Some(Value::Array(w)) = outcome.summary.get("warnings") {
                for msg in w {
                    eprintln!("warning: {}", msg.as_str().unwrap_or_default());
                }
            }
            print!("{}", outcome.table);
            if outcome.pass {
                0
            } else {
                eprintln!("tolerance check failed");
                outcome.failure.exit_code()
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.class().exit_code()
        }
    }
}
