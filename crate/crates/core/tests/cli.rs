//! End-to-end tests of the `kla` binary: exit codes, the contraction tamper
//! check, schema validation of every JSON artifact and stable CSV headers.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn read_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn validator(name: &str) -> jsonschema::Validator {
    let common = read_json(&schema_dir().join("common.schema.json"));
    let schema = read_json(&schema_dir().join(name));
    jsonschema::options()
        .with_resource(
            "https://kla.local/schemas/common.schema.json",
            jsonschema::Resource::from_contents(common).unwrap(),
        )
        .build(&schema)
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn assert_valid(schema: &str, path: &Path) {
    let instance = read_json(path);
    let v = validator(schema);
    let errors: Vec<String> = v
        .iter_errors(&instance)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(
        errors.is_empty(),
        "{} against {schema}: {errors:#?}",
        path.display()
    );
}

/// The schema every JSON artifact is checked against.
fn schema_for(rel: &str) -> &'static str {
    match rel {
        "plan.json" => "plan.schema.json",
        "reports/leading_order.json" => "leading_order.schema.json",
        "reports/one_shot.json" => "one_shot.schema.json",
        "reports/stationarity.json" => "stationarity.schema.json",
        "reports/mix.json" => "mix.schema.json",
        "reports/sample.json" => "sample.schema.json",
        _ => "verification_report.schema.json",
    }
}

fn kla(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kla"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("kla runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Writes a configuration file built from the quick-check template.
fn quick_config(dir: &Path, extra: &[(&str, Value)]) -> PathBuf {
    let mut cfg = read_json(&config_dir().join("quick.json"));
    for (k, v) in extra {
        cfg[*k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn json_artifacts(out: &Path) -> Vec<String> {
    let mut found = Vec::new();
    for sub in ["", "reports"] {
        let dir = out.join(sub);
        if let Ok(entries) = std::fs::read_dir(&dir) {
            for e in entries {
                let p = e.unwrap().path();
                if p.extension().is_some_and(|x| x == "json") {
                    found.push(p.strip_prefix(out).unwrap().display().to_string());
                }
            }
        }
    }
    found.sort();
    found
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap_or_default()
        .to_string()
}

#[test]
fn shipped_configs_match_the_config_schema() {
    let v = validator("config.schema.json");
    for entry in std::fs::read_dir(config_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = read_json(&path);
        assert!(v.is_valid(&cfg), "{}", path.display());
        kla::runner::RunConfig::from_json(&std::fs::read_to_string(&path).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn every_artifact_matches_its_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), &[]);
    let cfg = cfg.to_str().unwrap();
    let expected: [(&str, &[&str]); 4] = [
        ("plan", &["plan.json"]),
        (
            "verify",
            &[
                "plan.json",
                "reports/contraction.json",
                "reports/energy_error.json",
                "reports/exit_frequency.json",
                "reports/leading_order.json",
                "reports/lyapunov_drift.json",
                "reports/one_shot.json",
                "reports/ou_moments.json",
                "reports/rejection_rate.json",
                "reports/stationarity.json",
            ],
        ),
        ("mix", &["plan.json", "reports/mix.json"]),
        ("sample", &["reports/sample.json"]),
    ];
    for (command, files) in expected {
        let out = tmp.path().join(command);
        let o = kla(&[command, "--config", cfg], &out);
        assert!(
            matches!(code(&o), 0 | 1),
            "{command}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(json_artifacts(&out), files.to_vec(), "{command}");
        for rel in files {
            assert_valid(schema_for(rel), &out.join(rel));
        }
    }

    let mix = tmp.path().join("mix/traces");
    assert_eq!(first_line(&mix.join("mix_curve.csv")), "n,raw,value,stderr");
    assert_eq!(
        first_line(&mix.join("mix_trace.csv")),
        "replica,step,met,in_domain,rejected,delta_H,twisted_distance"
    );
    assert_eq!(
        first_line(&tmp.path().join("sample/traces/chain.csv")),
        "chain,step,x0,x1,v0,v1,accepted,delta_H"
    );
}

#[test]
fn csv_headers_survive_empty_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), &[("trace_replicas", 0.into())]);
    let o = kla(&["mix", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(tmp.path().join("traces/mix_trace.csv")).unwrap();
    assert_eq!(
        trace,
        "replica,step,met,in_domain,rejected,delta_H,twisted_distance\n"
    );
}

#[test]
fn plan_exit_code_follows_the_certificates() {
    let tmp = tempfile::tempdir().unwrap();
    let auto = kla(
        &["plan", "--model", "iso_gauss", "--dim", "2", "--eps", "0.1"],
        &tmp.path().join("auto"),
    );
    assert_eq!(code(&auto), 0, "{}", String::from_utf8_lossy(&auto.stderr));
    let plan = read_json(&tmp.path().join("auto/plan.json"));
    assert_eq!(plan["gamma"], 10.0);
    assert_eq!(plan["h"], plan["h_bar"]);
    assert_eq!(plan["certificates"]["all_ok"], true);

    let fixed = kla(
        &[
            "plan",
            "--model",
            "iso_gauss",
            "--dim",
            "2",
            "--h",
            "0.05",
            "--gamma",
            "10",
        ],
        &tmp.path().join("fixed"),
    );
    assert_eq!(code(&fixed), 1);
    assert_eq!(
        read_json(&tmp.path().join("fixed/plan.json"))["certificates"]["all_ok"],
        false
    );
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["plan", "--model", "banana", "--dim", "2"],
        vec!["plan", "--model", "iso_gauss"],
        vec!["plan", "--model", "iso_gauss", "--dim", "2", "--h", "fast"],
        vec!["plan", "--model", "iso_gauss", "--dim", "2", "--L", "-1"],
        vec!["plan", "--model", "iso_gauss", "--dim", "2", "--eps", "0.9"],
        vec![
            "verify",
            "--model",
            "iso_gauss",
            "--dim",
            "2",
            "--h",
            "0.05",
            "--gamma",
            "10",
            "--suite",
            "nope",
        ],
        vec!["plan", "--config", "/nonexistent/kla.json"],
    ];
    for args in cases {
        let o = kla(&args, tmp.path());
        assert_eq!(
            code(&o),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }

    let unknown = tmp.path().join("unknown.json");
    std::fs::write(
        &unknown,
        r#"{"model": "iso_gauss", "d": 2, "colour": "red"}"#,
    )
    .unwrap();
    let o = kla(&["plan", "--config", unknown.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn contraction_tamper_is_caught() {
    let tmp = tempfile::tempdir().unwrap();
    let base = [
        "verify",
        "--model",
        "iso_gauss",
        "--dim",
        "1",
        "--h",
        "0.05",
        "--gamma",
        "10",
        "--suite",
        "contraction",
    ];
    let run = |scale: &str| {
        let out = tmp.path().join(scale);
        let mut args = base.to_vec();
        args.extend(["--contraction-scale", scale]);
        let o = kla(&args, &out);
        (code(&o), read_json(&out.join("reports/contraction.json")))
    };
    let (ok, report) = run("1");
    assert_eq!(ok, 0);
    assert_eq!(report["violations"], 0);
    // The certified rate is conservative by a large factor, so doubling it
    // still holds on every pair.
    assert_eq!(run("2").0, 0);
    let (bad, report) = run("100");
    assert_eq!(bad, 1);
    assert!(report["violations"].as_u64().unwrap() > 0);
    assert_eq!(report["passed"], false);
}
