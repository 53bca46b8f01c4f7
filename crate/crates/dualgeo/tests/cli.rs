//! End-to-end tests of the `geo` binary: exit-status contract, report and
//! dump emission, validation errors, and the shipped regression reports.

use std::path::PathBuf;
use std::process::Command;

fn geo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geo"))
}

fn temp_path(label: &str) -> PathBuf {
    std::env::temp_dir().join(format!(
        "dualgeo-{label}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ))
}

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn examples_list_names_all_builtins() {
    let out = geo().args(["examples", "list"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let names: Vec<&str> = stdout.lines().collect();
    assert_eq!(
        names,
        vec![
            "classical-flat",
            "so3-bundle",
            "exp-metric",
            "hamilton-exp",
            "cartan-finsler",
            "chart-change-diag",
            "obata-family",
            "deform-family",
        ]
    );
}

#[test]
fn unknown_example_is_an_error() {
    let out = geo().args(["examples", "run", "nonesuch"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown example"));
}

#[test]
fn check_scenario_writes_report_and_dump() {
    let report = temp_path("report.json");
    let dump = temp_path("dump.json");
    let out = geo()
        .arg("check")
        .arg(repo_path("scenarios/exp-metric.json"))
        .args(["--samples", "20"])
        .arg("--report")
        .arg(&report)
        .arg("--dump-connection")
        .arg(&dump)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["all_pass"], serde_json::Value::Bool(true));
    assert_eq!(parsed["seed"], serde_json::json!(3));
    let reports = parsed["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 8);
    for rep in reports {
        assert!(rep["name"].is_string());
        assert!(rep["pass"].is_boolean());
        assert!(rep["max_residual"].is_number());
        assert!(rep["worst_point"]["x"].is_array());
        assert!(rep["samples_used"].is_number());
        assert!(rep["notes"].is_string());
    }
    let dumped: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    let built = dumped.as_object().unwrap();
    assert!(built.contains_key("build:metrizable-berwald"));
    let entry = &built["build:metrizable-berwald"];
    assert_eq!(entry["points"].as_array().unwrap().len(), 5);
    assert!(entry["values"]["hh"].is_array());
    let _ = std::fs::remove_file(report);
    let _ = std::fs::remove_file(dump);
}

#[test]
fn validate_accepts_builtin_scenarios() {
    for name in [
        "classical-flat",
        "so3-bundle",
        "exp-metric",
        "hamilton-exp",
        "cartan-finsler",
        "chart-change-diag",
        "obata-family",
        "deform-family",
    ] {
        let out = geo()
            .arg("validate")
            .arg(repo_path(&format!("scenarios/{name}.json")))
            .output()
            .unwrap();
        assert!(out.status.success(), "{name}");
    }
}

#[test]
fn schema_violations_report_pointers_and_exit_2() {
    let cases = [
        (
            r#"{"dims": {"m": 2, "p_rank": 2, "r_rank": 2},
                "algebroid": {"rho": [["1","0"],["0","1"]],
                              "l": [[["0","0"],["0","0"]],[["0","0"],["0","0"]]]},
                "hamiltonian": "(sin p3)",
                "checks": ["regularity"]}"#,
            "p3",
        ),
        (
            r#"{"dims": {"m": 2, "p_rank": 2, "r_rank": 2},
                "algebroid": {"rho": [["1","0"],["0","1"]],
                              "l": [[["0","0"],["0","0"]],[["0","0"],["0","0"]]]},
                "checks": ["frobnicate"]}"#,
            "/checks/0",
        ),
        (
            r#"{"dims": {"m": 2, "p_rank": 2, "r_rank": 2},
                "algebroid": {"rho": [["1","0"]],
                              "l": [[["0","0"],["0","0"]],[["0","0"],["0","0"]]]},
                "checks": []}"#,
            "/algebroid/rho",
        ),
    ];
    for (text, needle) in cases {
        let path = temp_path("bad.json");
        std::fs::write(&path, text).unwrap();
        let out = geo().arg("check").arg(&path).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "case {needle}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains(needle), "missing `{needle}` in: {stderr}");
        let _ = std::fs::remove_file(path);
    }
}

#[test]
fn failing_check_exits_nonzero() {
    // Structure functions missing the mirrored entry: antisymmetry fails.
    let text = r#"{
        "dims": {"m": 3, "p_rank": 3, "r_rank": 3},
        "algebroid": {
            "rho": [["0","0","0"],["0","0","0"],["0","0","0"]],
            "l": [
                [["0","0","0"],["0","0","0"],["0","0","0"]],
                [["0","0","0"],["0","0","0"],["0","0","0"]],
                [["0","1","0"],["0","0","0"],["0","0","0"]]
            ]
        },
        "checks": ["algebroid-axioms"],
        "samples": 10,
        "seed": 1,
        "tol": 1e-9
    }"#;
    let path = temp_path("broken.json");
    std::fs::write(&path, text).unwrap();
    let out = geo().arg("check").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL algebroid-axioms"));
    let _ = std::fs::remove_file(path);
}

#[test]
fn reports_are_deterministic_modulo_timestamp() {
    let strip = |s: &str| -> String {
        s.lines()
            .filter(|l| !l.contains("\"timestamp\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let report = temp_path("det.json");
        let out = geo()
            .args(["examples", "run", "obata-family", "--report"])
            .arg(&report)
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(strip(&std::fs::read_to_string(&report).unwrap()));
        let _ = std::fs::remove_file(report);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn cli_overrides_take_effect() {
    let report = temp_path("override.json");
    let out = geo()
        .args([
            "examples",
            "run",
            "cartan-finsler",
            "--samples",
            "7",
            "--seed",
            "99",
            "--report",
        ])
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["seed"], serde_json::json!(99));
    assert_eq!(parsed["reports"][0]["samples_used"], serde_json::json!(7));
    let _ = std::fs::remove_file(report);
}

#[test]
fn shipped_expected_reports_match_fresh_runs() {
    for name in dualgeo::scenario::list_examples() {
        let expected_path = repo_path(&format!("scenarios/expected/{name}.json"));
        let expected: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&expected_path).unwrap()).unwrap();
        let scenario = dualgeo::scenario::load_example(name).unwrap();
        let outcome = dualgeo::scenario::run(&scenario);
        let fresh: serde_json::Value =
            serde_json::from_str(&dualgeo::scenario::report_json(&scenario, &outcome, 0)).unwrap();
        assert_eq!(fresh["all_pass"], expected["all_pass"], "{name}");
        let fr = fresh["reports"].as_array().unwrap();
        let er = expected["reports"].as_array().unwrap();
        assert_eq!(fr.len(), er.len(), "{name}");
        for (a, b) in fr.iter().zip(er) {
            assert_eq!(a["name"], b["name"], "{name}");
            assert_eq!(a["pass"], b["pass"], "{name}");
            assert_eq!(a["samples_used"], b["samples_used"], "{name}");
            let ra = a["max_residual"].as_f64().unwrap();
            let rb = b["max_residual"].as_f64().unwrap();
            assert!(
                (ra - rb).abs() <= 1e-12,
                "{name}/{}: {ra} vs {rb}",
                a["name"]
            );
        }
    }
}
