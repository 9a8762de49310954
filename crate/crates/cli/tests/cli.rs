use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use meanstop_cli::expr::{Expr, Vars};
use meanstop_core::obstacle::ObstacleGrid;
use meanstop_core::sim::flow::read_stats_csv;
use meanstop_core::StoppedEnsemble;
use proptest::prelude::*;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn meanstop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meanstop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, kind: &str, file: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        kind,
        "--scenario",
        file.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    meanstop(&args)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn expression_examples() {
    assert_eq!(
        Expr::parse("0").unwrap().eval(&Vars::default()).unwrap(),
        0.0
    );
    let e = Expr::parse("x*(1 - s1)").unwrap();
    assert_eq!(
        e.eval(&Vars {
            x: 3.0,
            s1: 1.0,
            ..Vars::default()
        })
        .unwrap(),
        0.0
    );
    let e = Expr::parse("min(1, exp(-t)*m1)").unwrap();
    assert_eq!(
        e.eval(&Vars {
            t: 0.0,
            m1: 2.0,
            ..Vars::default()
        })
        .unwrap(),
        1.0
    );
}

#[test]
fn version_names_the_schema() {
    let out = meanstop(&["--version"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains(&format!(
            "scenario schema {}",
            meanstop_cli::scenario::SCHEMA_VERSION
        )),
        "{text}"
    );
}

#[test]
fn invalid_scenarios_exit_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cases = [
        (
            "unknown_field.json",
            r#"{"kind": "simulate", "seed": 1, "particels": 10}"#,
            "simulate",
        ),
        (
            "bad_expr.json",
            r#"{"seed": 1, "model": {"drift": "x +* 2"}}"#,
            "simulate",
        ),
        ("no_seed.json", r#"{"kind": "simulate"}"#, "simulate"),
        (
            "wrong_kind.json",
            r#"{"kind": "dual", "seed": 1}"#,
            "simulate",
        ),
        ("no_block.json", r#"{"kind": "obstacle"}"#, "obstacle"),
        (
            "v0_without_stat.json",
            r#"{"seed": 1, "model": {"drift": "v0"}}"#,
            "simulate",
        ),
        ("not_json.json", "kind: simulate", "simulate"),
    ];
    for (name, text, kind) in cases {
        let file = write(tmp.path(), name, text);
        let out = run_in(&out_dir, kind, &file, &[]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out_dir.exists(), "{name} wrote outputs");
    }
    let out = run_in(&out_dir, "simulate", &tmp.path().join("missing.json"), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let file = write(
        tmp.path(),
        "diverge.json",
        r#"{"seed": 1, "model": {"drift": "sqrt(x)"}, "initial": {"dirac": -1}, "numerics": {"particles": 10, "steps": 10}}"#,
    );
    let out = run_in(&out_dir, "simulate", &file, &[]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(!out_dir.exists());
    let file = write(
        tmp.path(),
        "edge.json",
        r#"{"initial": {"dirac": 2}, "dual": {"preset": "mean_variance"}, "numerics": {"nx": 64, "nt": 64}}"#,
    );
    let out = run_in(&out_dir, "dual", &file, &["--alpha-range", "-1:1:11"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn obstacle_scenario_reproduces_the_heat_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), "obstacle", &scenario("obstacle_x2.json"), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let grid =
        ObstacleGrid::read_csv(std::fs::File::open(tmp.path().join("grid.csv")).unwrap()).unwrap();
    let j = grid.xs.iter().position(|x| x.abs() < 1e-12).unwrap();
    assert!((grid.at(0, j) - 1.0).abs() <= 1e-3);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("obstacle.json")).unwrap()).unwrap();
    assert!((summary["lift_initial"].as_f64().unwrap() - 1.0).abs() <= 1e-3);
}

#[test]
fn dual_scenario_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        "dual",
        &scenario("dual_mean_variance.json"),
        &["--alpha-range", "-4:4:33"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("dual.json")).unwrap()).unwrap();
    assert!((r["value"].as_f64().unwrap() - 0.7).abs() <= 1e-2);
    assert_eq!(r["per_alpha"].as_array().unwrap().len(), 33);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(
        m["overrides"]["alpha_range"],
        serde_json::json!([-4.0, 4.0, 33])
    );
}

#[test]
fn simulate_outputs_round_trip_and_manifest_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        "simulate",
        &scenario("simulate.json"),
        &["--particles", "2000", "--steps", "100"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stats = read_stats_csv(std::fs::File::open(tmp.path().join("stats.csv")).unwrap()).unwrap();
    assert_eq!(stats.len(), 101);
    let fin = StoppedEnsemble::read_csv(
        std::fs::File::open(tmp.path().join("final_ensemble.csv")).unwrap(),
    )
    .unwrap();
    assert!((fin.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    let scenario_bytes = std::fs::read(scenario("simulate.json")).unwrap();
    assert_eq!(
        manifest["scenario_sha256"],
        meanstop_cli::output::sha256_hex(&scenario_bytes)
    );
    assert_eq!(manifest["seed"], 1);
    for entry in manifest["outputs"].as_array().unwrap() {
        let bytes = std::fs::read(tmp.path().join(entry["name"].as_str().unwrap())).unwrap();
        assert_eq!(entry["sha256"], meanstop_cli::output::sha256_hex(&bytes));
    }
}

#[test]
fn outputs_are_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = (0..3).map(|k| tmp.path().join(format!("run{k}"))).collect();
    let args = ["--particles", "3000", "--steps", "200"];
    for (dir, threads) in dirs.iter().zip(["1", "4", "4"]) {
        let mut extra = args.to_vec();
        extra.extend(["--threads", threads]);
        assert!(run_in(dir, "simulate", &scenario("simulate.json"), &extra)
            .status
            .success());
    }
    for name in [
        "stats.csv",
        "final_ensemble.csv",
        "objective.json",
        "manifest.json",
    ] {
        let a = std::fs::read(dirs[0].join(name)).unwrap();
        for d in &dirs[1..] {
            assert_eq!(a, std::fs::read(d.join(name)).unwrap(), "{name}");
        }
    }
}

#[test]
fn example53_outputs_have_declared_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        "example53",
        &scenario("example53.json"),
        &["--particles", "2000", "--steps", "400"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let header = |name: &str| {
        std::fs::read_to_string(tmp.path().join(name))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("a_curve.csv"), "t,a,half_kappa0");
    assert_eq!(header("flow.csv"), "t,survival_mass,v0,a");
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("verdict.json")).unwrap()).unwrap();
    assert_eq!(v["flow"]["massive_stop_mass"], 0.5);
    assert!((v["value"].as_f64().unwrap() - 2.0).abs() <= 0.04);
    assert!(v["audit"]["pass"].is_boolean());
}

#[test]
fn every_shipped_scenario_parses() {
    for entry in std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")).unwrap()
    {
        let path = entry.unwrap().path();
        let (s, _) = meanstop_cli::scenario::Scenario::load(&path).unwrap();
        assert!(s.kind.is_some(), "{}", path.display());
    }
}

/// Fully parenthesised source and its value at `x`.
fn arb_expr() -> impl Strategy<Value = (String, f64)> {
    let leaf = prop_oneof![
        (-5.0..5.0f64).prop_map(|c| (format!("({c})"), c)),
        Just(("x".to_string(), 0.75)),
    ];
    leaf.prop_recursive(4, 32, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone())
                .prop_map(|((a, va), (b, vb))| (format!("({a} + {b})"), va + vb)),
            (inner.clone(), inner.clone())
                .prop_map(|((a, va), (b, vb))| (format!("({a} - {b})"), va - vb)),
            (inner.clone(), inner.clone())
                .prop_map(|((a, va), (b, vb))| (format!("({a} * {b})"), va * vb)),
            (inner.clone(), inner.clone())
                .prop_map(|((a, va), (b, vb))| (format!("max({a}, {b})"), va.max(vb))),
            inner.clone().prop_map(|(a, va)| (format!("-{a}"), -va)),
            inner
                .clone()
                .prop_map(|(a, va)| (format!("abs({a})"), va.abs())),
        ]
    })
}

proptest! {
    #[test]
    fn parse_is_total(text in "[-+*/^(),. 0-9a-z]{0,24}") {
        match Expr::parse(&text) {
            Ok(e) => prop_assert_eq!(e.source(), text.as_str()),
            Err(e) => prop_assert!(e.offset <= text.len() && !e.expected.is_empty()),
        }
    }

    #[test]
    fn evaluation_matches_the_tree((src, value) in arb_expr()) {
        let e = Expr::parse(&src).unwrap();
        let got = e.eval(&Vars { x: 0.75, ..Vars::default() }).unwrap();
        prop_assert!((got - value).abs() <= 1e-12 * (1.0 + value.abs()), "{} = {} vs {}", src, got, value);
    }

    #[test]
    fn whitespace_does_not_matter((src, _) in arb_expr()) {
        let spaced = src.replace('(', " ( ").replace(')', " ) ");
        let (a, b) = (Expr::parse(&src).unwrap(), Expr::parse(&spaced).unwrap());
        prop_assert_eq!(a.root(), b.root());
    }
}
