use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_obsdrive"))
}

fn sample(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("manifests").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Sample manifests shrunk so the debug binary stays quick.
fn small_manifests() -> Vec<(&'static str, Value)> {
    let mut out = Vec::new();
    let mut m = sample("simulate_poisson.json");
    m["params"] = json!({"horizon": 200});
    out.push(("simulate", m));
    let mut m = sample("couple_poisson.json");
    m["params"]["replicas"] = json!(20);
    m["params"]["horizon"] = json!(100);
    out.push(("couple", m));
    let mut m = sample("backward_poisson.json");
    m["params"]["replicas"] = json!(100);
    m["params"]["n_schedule"] = json!([25, 50]);
    out.push(("backward", m));
    let mut m = sample("stationary_logit.json");
    m["params"] = json!({"tol": 0.05, "max_n": 200, "replicas": 100});
    out.push(("stationary", m));
    let mut m = sample("verify_poisson.json");
    m["params"] = json!({"verify": {"mc_n": 10000, "grid_size": 50, "tv_tol": 1e-6}});
    out.push(("verify", m));
    let mut m = sample("diagnose_poisson.json");
    m["params"] = json!({"horizon": 500});
    out.push(("diagnose", m));
    out
}

fn run(manifest: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let o = bin()
        .arg("--manifest")
        .arg(manifest)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8(o.stdout).unwrap())
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p: PathBuf = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn sample_manifests_parse_and_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("manifests")).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert!(v["command"].is_string(), "{}", path.display());
    }
    // Unknown fields are a usage error.
    let mut m = sample("simulate_poisson.json");
    m["params"]["horizn"] = json!(5);
    let p = tmp.path().join("bad.json");
    fs::write(&p, m.to_string()).unwrap();
    assert_eq!(run(&p, &tmp.path().join("o"), &[]).0, 1);
}

#[test]
fn every_command_is_deterministic_across_runs_threads_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, manifest) in small_manifests() {
        let mpath = tmp.path().join(format!("{name}.json"));
        fs::write(&mpath, manifest.to_string()).unwrap();
        let a = tmp.path().join(format!("{name}_a"));
        let b = tmp.path().join(format!("{name}_b"));
        let c = tmp.path().join(format!("{name}_c"));
        let (code_a, out_a) = run(&mpath, &a, &["--threads", "1"]);
        let (code_b, out_b) = run(&mpath, &b, &["--threads", "4"]);
        let (code_c, out_c) = run(&a.join("replay.json"), &c, &[]);
        assert!(code_a == 0 || code_a == 2, "{name}: exit {code_a}");
        assert_eq!((code_a, &out_a), (code_b, &out_b), "{name}");
        assert_eq!((code_a, &out_a), (code_c, &out_c), "{name}");
        assert_eq!(out_a.lines().count(), 1, "{name}: {out_a}");
        assert_eq!(files(&a), files(&b), "{name}: thread count changed outputs");
        assert_eq!(files(&a), files(&c), "{name}: replay changed outputs");
    }
}

#[test]
fn trajectory_header_and_length() {
    let tmp = tempfile::tempdir().unwrap();
    let mpath = tmp.path().join("m.json");
    fs::write(&mpath, small_manifests()[0].1.to_string()).unwrap();
    let (code, _) = run(&mpath, tmp.path(), &[]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(tmp.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,x,lambda,y"));
    assert_eq!(lines.count(), 200);
}

#[test]
fn seed_flag_overrides_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mpath = tmp.path().join("m.json");
    fs::write(&mpath, small_manifests()[0].1.to_string()).unwrap();
    run(&mpath, &tmp.path().join("a"), &[]);
    run(&mpath, &tmp.path().join("b"), &["--seed", "99"]);
    let a = fs::read(tmp.path().join("a/trajectory.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/trajectory.csv")).unwrap();
    assert_ne!(a, b);
    let replay: Value = serde_json::from_slice(&fs::read(tmp.path().join("b/replay.json")).unwrap()).unwrap();
    assert_eq!(replay["seed"], json!(99));
}

#[test]
fn exit_codes_follow_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = sample("verify_explosive.json");
    m["params"] = json!({"verify": {"mc_n": 10000, "grid_size": 50, "tv_tol": 1e-6}});
    let mpath = tmp.path().join("explosive.json");
    fs::write(&mpath, m.to_string()).unwrap();
    let (code, out) = run(&mpath, &tmp.path().join("v"), &[]);
    assert_eq!(code, 2, "{out}");
    let report: Value = serde_json::from_slice(&fs::read(tmp.path().join("v/report.json")).unwrap()).unwrap();
    assert_eq!(report["a1"]["verdict"], json!("fail"));

    // The explosive model never settles, so the sampler reports NotConverged.
    m["command"] = json!("stationary");
    m["params"] = json!({"tol": 0.01, "max_n": 100, "replicas": 100});
    fs::write(&mpath, m.to_string()).unwrap();
    let (code, out) = run(&mpath, &tmp.path().join("s"), &[]);
    assert_eq!(code, 2);
    assert!(out.contains("NotConverged"), "{out}");

    let missing = run(&tmp.path().join("absent.json"), &tmp.path().join("x"), &[]);
    assert_eq!(missing.0, 1);
    let status = bin().arg("--no-such-flag").output().unwrap().status;
    assert_eq!(status.code(), Some(1));
}
