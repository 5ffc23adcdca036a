use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

/// Coarsest grid scale whose TEB stays off the grid edge.
const COARSE: &str = "0.67";
const SCENARIO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/sim1.json");

fn teb(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teb"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .args(["--seed", "7"])
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// The bundled scenario with the disturbance off, no obstacles and a slow planner.
fn calm_scenario(dir: &Path) -> PathBuf {
    let mut s: Value = serde_json::from_str(&std::fs::read_to_string(SCENARIO).unwrap()).unwrap();
    s["truth"]["disturbance"] = Value::Bool(false);
    s["planner_speed_m_s"] = Value::from(0.05);
    s["workspace"]["obstacles"] = Value::Array(vec![]);
    let p = dir.join("calm.json");
    std::fs::write(&p, serde_json::to_string_pretty(&s).unwrap()).unwrap();
    p
}

#[test]
fn missing_upstream_artifacts_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in ["solve-hji", "plan", "simulate", "study"] {
        let o = teb(&[stage], Path::new(SCENARIO), &tmp.path().join(stage));
        assert_eq!(code(&o), 3, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn invalid_scenarios_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let broken = tmp.path().join("broken.json");
    std::fs::write(&broken, "{ not json").unwrap();
    assert_eq!(code(&teb(&["fit-gp"], &broken, &tmp.path().join("a"))), 2);

    let mut s: Value = serde_json::from_str(&std::fs::read_to_string(SCENARIO).unwrap()).unwrap();
    s["grid"]["axes"][2]["n"] = Value::from(1);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, s.to_string()).unwrap();
    let o = teb(&["fit-gp"], &bad, &tmp.path().join("b"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("psi"));

    let o = teb(&["fit-gp", "--grid-scale", "0.5"], Path::new(SCENARIO), &tmp.path().join("c"));
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join("c").join("gp").exists());
}

#[test]
fn calm_pipeline_is_contained_and_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = calm_scenario(tmp.path());
    let out = tmp.path().join("run");
    for stage in ["fit-gp", "solve-hji", "plan", "simulate"] {
        let o = teb(&[stage, "--grid-scale", COARSE], &scn, &out);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["containment_fraction"], 1.0);
    assert_eq!(metrics["collisions"], 0);

    let o = teb(&["study", "--grid-scale", COARSE, "--trials", "8"], &scn, &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["trials"], 8);
    assert_eq!(metrics["aborted_trials"], 0);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let stages = manifest["stages"].as_object().unwrap();
    for stage in ["fit-gp", "solve-hji", "plan", "simulate", "study"] {
        assert!(stages.contains_key(stage), "{stage} not recorded");
    }
    assert!(stages["simulate"]["outputs"].get("metrics.json").is_none(), "study took over metrics.json");
    for (stage, rec) in stages {
        for (rel, hash) in rec["outputs"].as_object().unwrap() {
            let bytes = std::fs::read(out.join(rel)).unwrap();
            assert_eq!(hex::encode(Sha256::digest(&bytes)), hash.as_str().unwrap(), "{stage}: {rel}");
        }
    }

    // replanning against a new workspace reuses the stored value; a wall
    // across the whole workspace leaves no route to the goal
    let mut s: Value = serde_json::from_str(&std::fs::read_to_string(&scn).unwrap()).unwrap();
    s["workspace"]["obstacles"] = serde_json::json!([{ "x_m": [1.0, 1.4], "y_m": [-1.0, 1.0] }]);
    let walled = tmp.path().join("walled.json");
    std::fs::write(&walled, s.to_string()).unwrap();
    let o = teb(&["plan", "--grid-scale", COARSE], &walled, &out);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let plan: Value = serde_json::from_str(&std::fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["plan"]["feasible"], false);
}
