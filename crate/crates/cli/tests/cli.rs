use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccsynth::synthesis::min_violation_level;
use ccsynth_cli::commands::{self, format_level, SimOptions, SynthOptions};
use ccsynth_cli::gains::GainsFile;
use ccsynth_cli::problem::{Problem, SATELLITE};
use nalgebra::DMatrix;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ccsynth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ccsynth")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The satellite file with the simulation shortened for tests.
fn satellite(dir: &TempDir) -> PathBuf {
    write(dir, "satellite.toml", &SATELLITE.replace("steps = 1000000", "steps = 50000"))
}

/// Riccati value iteration for the LQR gain.
fn riccati_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = q.clone();
    for _ in 0..200_000 {
        let g = (r + b.transpose() * &p * b).try_inverse().unwrap();
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * g * b.transpose() * &p * a;
        let done = (&next - &p).amax() <= 1e-14 * next.amax();
        p = next;
        if done {
            break;
        }
    }
    -(r + b.transpose() * &p * b).try_inverse().unwrap() * b.transpose() * &p * a
}

#[test]
fn minlevel_prints_each_constraint() {
    let dir = TempDir::new().unwrap();
    let file = satellite(&dir);
    let o = run(&["minlevel", s(&file), "--independent"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let problem = Problem::parse(SATELLITE).unwrap();
    for (i, con) in problem.constraints.iter().enumerate() {
        let level = min_violation_level(&problem.model, con, &[], &problem.options.synthesis).unwrap().level;
        let line = text.lines().find(|l| l.starts_with(&i.to_string())).unwrap();
        assert!(line.contains(&con.label) && line.contains(&format_level(level)), "{line}");
    }
}

#[test]
fn minlevel_single_index() {
    let dir = TempDir::new().unwrap();
    let file = satellite(&dir);
    let o = run(&["minlevel", s(&file), "--constraint", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2, "{text}");
    assert!(text.contains("instrument-angle"));
    let o = run(&["minlevel", s(&file), "--constraint", "7"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_matrix_row_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    let bad = SATELLITE.replace("[-0.150, 0.992,  0.150, 0.008]", "[-0.150, 0.992,  0.150]");
    let file = write(&dir, "bad.toml", &bad);
    let o = run(&["minlevel", s(&file)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.A[1]"), "{}", stderr(&o));
}

#[test]
fn field_paths_in_diagnostics() {
    let cases = [
        (SATELLITE.replace("normal = [1.0, 0.0, 0.0, 0.0]", "normal = [1.0, 0.0]"), "constraints[1].normal"),
        (SATELLITE.replace("class = \"nrm\"", "class = \"lognormal\""), "class"),
        (SATELLITE.replace("[options]", "[options]\nsped = 3"), "sped"),
        (SATELLITE.replace("R = [[1.0]]", "R = [[1.0, 0.0]]"), "cost.R"),
        (SATELLITE.replace("version = 1", "version = 9"), "version"),
        (SATELLITE.replace("bound = 1.0\n", "bound = -1.0\n"), "constraints[0]"),
    ];
    let dir = TempDir::new().unwrap();
    for (i, (text, path)) in cases.iter().enumerate() {
        let file = write(&dir, &format!("bad{i}.toml"), text);
        let o = run(&["synth", s(&file), "-o", s(&dir.path().join("g.toml"))]);
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", stderr(&o));
        assert!(stderr(&o).contains(path), "case {i}: {}", stderr(&o));
    }
}

#[test]
fn unconstrained_synth_matches_riccati() {
    let dir = TempDir::new().unwrap();
    let file = satellite(&dir);
    let out = dir.path().join("lqr.toml");
    let o = run(&["synth", s(&file), "-o", s(&out), "--unconstrained"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let k = GainsFile::load(&out).unwrap().gains().unwrap().k;
    let p = Problem::parse(SATELLITE).unwrap();
    let oracle = riccati_gain(&p.model.a, &p.model.b, &p.cost.q, &p.cost.r);
    assert!((&k - &oracle).amax() <= 1e-6 * oracle.amax(), "{k} vs {oracle}");
}

#[test]
fn constrained_synth_writes_active_constraint() {
    let dir = TempDir::new().unwrap();
    let file = satellite(&dir);
    let out = dir.path().join("cc.toml");
    let o = run(&["synth", s(&file), "-o", s(&out), "--only", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let g = GainsFile::load(&out).unwrap();
    assert_eq!(g.constraints.len(), 1);
    assert!(g.constraints[0].active);
    assert_eq!(g.constraints[0].label, "thrust");
}

#[test]
fn level_below_minimum_is_infeasible() {
    let dir = TempDir::new().unwrap();
    // The thrust constraint cannot be met below its minimum level (≈3%).
    let text = SATELLITE.replacen("eps = 0.1", "eps = 0.02", 1);
    let file = write(&dir, "tight.toml", &text);
    let out = dir.path().join("g.toml");
    let o = run(&["synth", s(&file), "-o", s(&out), "--only", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("thrust"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = run(&["synth", s(&file), "-o", s(&out), "--only", "0", "--auto-level"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("raised"));
    let eps = GainsFile::load(&out).unwrap().constraints[0].eps;
    assert!(eps > 0.02 && eps < 0.05, "{eps}");
}

#[test]
fn unstable_gain_exits_4() {
    let dir = TempDir::new().unwrap();
    let file = satellite(&dir);
    let out = dir.path().join("lqr.toml");
    assert_eq!(run(&["synth", s(&file), "-o", s(&out), "--unconstrained"]).status.code(), Some(0));
    // The printed plant is not open-loop stable, so K = 0 fails.
    let mut g = GainsFile::load(&out).unwrap();
    g.k = vec![vec![0.0; 4]];
    g.save(&out).unwrap();
    let o = run(&["simulate", s(&file), s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn file_round_trip_matches_in_process_pipeline() {
    let dir = TempDir::new().unwrap();
    let file = satellite(&dir);
    let gains = dir.path().join("cc.toml");
    let report = dir.path().join("report.csv");
    assert_eq!(run(&["synth", s(&file), "-o", s(&gains), "--only", "0"]).status.code(), Some(0));
    let o = run(&["simulate", s(&file), s(&gains), "--seed", "99", "-o", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let from_cli = std::fs::read(&report).unwrap();

    let problem = Problem::load(&file).unwrap();
    let opts = SynthOptions { only: Some(vec![0]), ..Default::default() };
    let g = commands::synth(&problem, &opts, &mut Vec::new()).unwrap();
    let rep =
        commands::run_simulation(&problem, &g, &SimOptions { seed: Some(99), ..Default::default() }).unwrap();
    let mut in_process = Vec::new();
    rep.write_csv(&mut in_process).unwrap();
    assert_eq!(from_cli, in_process);
    assert_eq!(GainsFile::load(&gains).unwrap(), g);
}

#[test]
fn simulate_is_deterministic_across_jobs() {
    let dir = TempDir::new().unwrap();
    let file = satellite(&dir);
    let gains = dir.path().join("lqr.toml");
    assert_eq!(run(&["synth", s(&file), "-o", s(&gains), "--unconstrained"]).status.code(), Some(0));
    let args = |jobs: &'static str, out: &Path| {
        run(&["simulate", s(&file), s(&gains), "--steps", "20000", "--replicas", "3", "--jobs", jobs, "-o", s(out)])
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(args("1", &a).status.code(), Some(0));
    assert_eq!(args("3", &b).status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn trace_file_has_header_and_stride() {
    let dir = TempDir::new().unwrap();
    let file = satellite(&dir);
    let gains = dir.path().join("lqr.toml");
    let trace = dir.path().join("trace.csv");
    assert_eq!(run(&["synth", s(&file), "-o", s(&gains), "--unconstrained"]).status.code(), Some(0));
    let o = run(&["simulate", s(&file), s(&gains), "--steps", "1000", "--trace", s(&trace), "--stride", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x0,x1,x2,x3,u0,thrust,instrument-angle,instrument-joint");
    assert_eq!(lines.count(), 100);
}

#[test]
fn output_feedback_pipeline() {
    let dir = TempDir::new().unwrap();
    let text = SATELLITE.replace("feedback = \"state\"", "feedback = \"output\"").replace("steps = 1000000", "steps = 50000");
    let file = write(&dir, "of.toml", &text);
    let gains = dir.path().join("of-gains.toml");
    let o = run(&["synth", s(&file), "-o", s(&gains), "--only", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let g = GainsFile::load(&gains).unwrap();
    assert_eq!(g.feedback, "output");
    assert!(g.l.is_some() && g.e.is_some() && g.sbar.is_some());
    let o = run(&["simulate", s(&file), s(&gains)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("violation 'thrust'"));
}

fn curve_value(args: &[&str], eps: f64) -> f64 {
    let o = run(args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("eps,factor"));
    text.lines()
        .skip(1)
        .map(|l| l.split_once(',').unwrap())
        .map(|(e, f)| (e.parse::<f64>().unwrap(), f.parse::<f64>().unwrap()))
        .find(|(e, _)| (e - eps).abs() < 1e-9)
        .unwrap()
        .1
}

#[test]
fn curves_rows() {
    let f = curve_value(&["curves", "--kind", "scc", "--class", "wss", "--side", "one-sided", "--grid", "0.05:0.45:0.05"], 0.1);
    assert!((f - 0.2).abs() < 1e-12);
    let f = curve_value(&["curves", "--kind", "jcc", "--class", "wss", "--n", "2", "--grid", "0.1:0.9:0.1"], 0.2);
    assert!((f - 0.1).abs() < 1e-12);
    // χ²₂ survival is exp(−x/2), so the 0.9 quantile is −2 ln 0.1.
    let f = curve_value(&["curves", "--kind", "jcc", "--class", "nrm", "--n", "2", "--grid", "0.1:0.9:0.1"], 0.1);
    assert!((f - 1.0 / (-2.0 * 0.1f64.ln())).abs() < 1e-9, "{f}");
}

#[test]
fn bad_grid_exits_2() {
    for grid in ["0:0.5:0.1", "0.1:1.2:0.1", "0.5:0.1:0.1", "a:b:c", "0.1:0.2"] {
        let o = run(&["curves", "--kind", "scc", "--class", "wss", "--grid", grid]);
        assert_eq!(o.status.code(), Some(2), "{grid}: {}", stderr(&o));
    }
}

#[test]
fn missing_file_exits_2() {
    let o = run(&["minlevel", "/nonexistent/problem.toml"]);
    assert_eq!(o.status.code(), Some(2));
}
