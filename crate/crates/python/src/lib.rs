//! Python bindings. The module exposes the command-line runner and a structured
//! `execute` that returns the summary, records and field dump as Python objects.

use bspde::cli::{execute as execute_command, Cli, Command, Outcome};
use clap::Parser;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::{Map, Value};

create_exception!(
    bspde_py,
    BspdeError,
    PyException,
    "Raised with `(message, exit_code)` when a command fails."
);

/// Builds a command from the same words the binary accepts.
pub fn parse_command(command: &str, scenario: &str, args: &[String]) -> Result<Command, (String, i32)> {
    let argv = ["bspde", command, scenario]
        .into_iter()
        .map(String::from)
        .chain(args.iter().cloned());
    Cli::try_parse_from(argv)
        .map(|c| c.command)
        .map_err(|e| (e.to_string(), 2))
}

/// Runs a command and returns its outcome as a JSON object with the keys
/// `summary`, `records`, `csv` and `passed`.
pub fn execute_to_json(command: &str, scenario: &str, args: &[String]) -> Result<Value, (String, i32)> {
    let cmd = parse_command(command, scenario, args)?;
    let outcome = execute_command(&cmd).map_err(|e| (e.to_string(), e.class().exit_code()))?;
    Ok(outcome_json(&outcome))
}

pub fn outcome_json(outcome: &Outcome) -> Value {
    let mut m = Map::new();
    m.insert("summary".into(), Value::Object(outcome.summary.clone()));
    m.insert("records".into(), Value::Array(outcome.records.clone()));
    m.insert(
        "csv".into(),
        outcome.csv.clone().map(Value::String).unwrap_or(Value::Null),
    );
    m.insert("passed".into(), Value::Bool(outcome.pass));
    Value::Object(m)
}

/// Runs the command line with `args` (without the program name) and returns the exit code.
#[pyfunction]
fn run(args: Vec<String>) -> i32 {
    bspde::cli::run(std::iter::once("bspde".to_string()).chain(args))
}

/// `execute("solve", "heat.scn", ["--modes", "8"])` returns a dict with the
/// summary, per-level records, the CSV field dump (or None) and the pass flag.
#[pyfunction]
#[pyo3(signature = (command, scenario, args = None))]
fn execute(py: Python<'_>, command: &str, scenario: &str, args: Option<Vec<String>>) -> PyResult<Py<PyDict>> {
    let args = args.unwrap_or_default();
    let value = py
        .allow_threads(|| execute_to_json(command, scenario, &args))
        .map_err(|(msg, code)| BspdeError::new_err((msg, code)))?;
    let json = py.import("json")?;
    let obj = json.call_method1("loads", (value.to_string(),))?;
    Ok(obj.downcast_into::<PyDict>()?.unbind())
}

#[pymodule]
fn bspde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(execute, m)?)?;
    m.add("BspdeError", m.py().get_type::<BspdeError>())?;
    Ok(())
}
