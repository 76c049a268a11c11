//! End-to-end tests of the `bspde` binary.
//!
//! Golden files live in `tests/golden/<command>/`. Set `BSPDE_BLESS=1` to
//! regenerate them after an intentional change.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use bspde::cli::parse_expression_for;
use proptest::prelude::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bspde"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(args: &[&str], scenario: &Path, out: Option<&Path>) -> i32 {
    let mut cmd = bin();
    cmd.args(&args[..1]).arg(scenario).args(&args[1..]);
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    let output = cmd.output().expect("binary runs");
    output.status.code().expect("exit code")
}

fn outputs(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with('.'))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read_to_string(&p).unwrap(),
            )
        })
        .collect()
}

fn write_scenario(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn golden_outputs_on_tiny_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let bless = std::env::var("BSPDE_BLESS").is_ok();
    for command in ["solve", "audit", "compare"] {
        let out = tmp.path().join(command);
        assert_eq!(run(&[command], &data("tiny.scn"), Some(&out)), 0, "{command}");
        let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(command);
        let got = outputs(&out);
        if bless {
            fs::create_dir_all(&golden).unwrap();
            for (name, text) in &got {
                fs::write(golden.join(name), text).unwrap();
            }
            continue;
        }
        let want = outputs(&golden);
        assert_eq!(
            got.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            want.iter().map(|(n, _)| n).collect::<Vec<_>>()
        );
        for ((name, g), (_, w)) in got.iter().zip(&want) {
            assert_eq!(g, w, "{command}/{name} differs from the golden file");
        }
    }
}

#[test]
fn csv_header_and_summary_shape() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["solve", "--dump-all"], &data("tiny.scn"), Some(tmp.path())), 0);
    let csv = fs::read_to_string(tmp.path().join("fields.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,node,x1,p,q1"));
    // Levels 0..=3 with 1, 2, 4, 8 nodes and 5 grid points each.
    assert_eq!(lines.count(), 15 * 5);
    assert!(csv.lines().last().unwrap().ends_with(','));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    let keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
    assert_eq!(keys[0], "command");
    assert_eq!(keys.last().unwrap().as_str(), "pass");
    for key in ["seed", "dt", "modes", "steps", "branching"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    let records = fs::read_to_string(tmp.path().join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 4);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = data("tiny.scn");
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| tmp.path().join(n)).collect();
    for (dir, seed) in dirs.iter().zip(["11", "11", "12"]) {
        assert_eq!(
            run(&["regress", "--paths", "400", "--seed", seed], &scenario, Some(dir)),
            0
        );
    }
    assert_eq!(outputs(&dirs[0]), outputs(&dirs[1]));
    assert_ne!(outputs(&dirs[0]), outputs(&dirs[2]));
    for (i, dir) in ["d", "e"].iter().map(|n| tmp.path().join(n)).enumerate() {
        assert_eq!(run(&["compare", "--seed", "5"], &scenario, Some(&dir)), 0, "{i}");
    }
    assert_eq!(outputs(&tmp.path().join("d")), outputs(&tmp.path().join("e")));
}

#[test]
fn exit_code_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let base = "[problem]\nd = 1\nT = 1\nL = 1\n";
    let parse = write_scenario(dir, "parse.scn", &format!("{base}[data]\nphi = cos(x1\n"));
    let unknown = write_scenario(dir, "unknown.scn", &format!("{base}[data]\nphi = cos(y1)\n"));
    let boundary = write_scenario(dir, "boundary.scn", &format!("{base}[coefficients]\nsigma = [[1]]\n"));
    let numeric = write_scenario(
        dir,
        "numeric.scn",
        &format!("{base}[data]\nphi = 2 + 1/(x1 + 1)\n[discretization]\nmodes = 2\n"),
    );
    let big = write_scenario(
        dir,
        "big.scn",
        &format!("{base}[data]\nphi = cos(x1)\n[discretization]\nmodes = 2\nsteps = 40\n"),
    );

    assert_eq!(run(&["solve"], &data("tiny.scn"), None), 0);
    assert_eq!(run(&["solve"], &parse, None), 2);
    assert_eq!(run(&["solve"], &unknown, None), 2);
    assert_eq!(run(&["solve"], &dir.join("missing.scn"), None), 2);
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
    assert_eq!(
        run(&["solve"], &boundary, None),
        0,
        "validation failure is only a warning"
    );
    assert_eq!(run(&["solve", "--strict"], &boundary, None), 3);
    assert_eq!(run(&["validate"], &boundary, None), 3);
    assert_eq!(run(&["solve", "--branching", "4"], &data("tiny.scn"), None), 3);
    assert_eq!(run(&["compare"], &big, None), 4);
    assert_eq!(run(&["solve"], &numeric, None), 5);
    assert_eq!(run(&["positivity"], &data("tiny.scn"), None), 6);
    assert_eq!(run(&["compare", "--tol", "0"], &data("tiny.scn"), None), 6);
}

#[test]
fn outputs_are_replaced_atomically() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["solve"], &data("tiny.scn"), Some(tmp.path())), 0);
    let first = outputs(tmp.path());
    assert_eq!(run(&["solve", "--theta", "1"], &data("tiny.scn"), Some(tmp.path())), 0);
    let second = outputs(tmp.path());
    assert_eq!(first.len(), second.len());
    assert_ne!(first, second);
    assert!(fs::read_dir(tmp.path())
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

fn allowed(name: &str, d: usize, d1: usize) -> bool {
    name == "t" || (1..=d).any(|i| name == format!("x{i}")) || (1..=d1).any(|k| name == format!("w{k}"))
}

proptest! {
    #[test]
    fn identifiers_outside_the_dimension_are_rejected(
        name in "[a-z][a-z0-9]{0,4}",
        d in 1usize..4,
        d1 in 1usize..4,
    ) {
        let text = format!("1 + {name} * 2");
        let parsed = parse_expression_for(&text, d, d1);
        prop_assert_eq!(parsed.is_ok(), allowed(&name, d, d1), "{}", text);
    }
}
