use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.json");

fn gbunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbunet"))
        .args(args)
        .env_remove("GBUNET_CONFIG")
        .env("GBUNET_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn ok(args: &[&str]) -> String {
    let out = gbunet(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn synth(dir: &Path, name: &str, profile: &str, seed: u64) -> PathBuf {
    let prof = dir.join(format!("{name}.profile.json"));
    fs::write(&prof, profile).unwrap();
    let out = dir.join(name);
    ok(&["synth", "--out", s(&out), "--profile", s(&prof), "--seed", &seed.to_string()]);
    out
}

fn rsp_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "rsp"))
        .collect();
    v.sort();
    v
}

const SMALL: &str = r#"{"nights": 8, "night_s": 480, "nights_per_subject": 2}"#;

#[test]
fn synth_default_profile_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&["synth", "--out", s(&a), "--seed", "4", "--jobs", "2"]);
    assert_eq!(rsp_files(&a).len(), 20);
    let b = dir.path().join("b");
    ok(&["synth", "--out", s(&b), "--seed", "4"]);
    for (x, y) in rsp_files(&a).iter().zip(rsp_files(&b)) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["files"].as_array().unwrap().len(), 20);
    assert_eq!(m["profile"]["seed"], 4);
    assert!(m["profile_hash"].is_string() && m["tool_version"].is_string());
}

#[test]
fn synth_manifest_echoes_group_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let groups = r#"[{"gender": 0, "stage": 1, "offset": 3.5, "slope": 1.0},
                     {"gender": 1, "stage": null, "offset": -1.25, "slope": 0.5}]"#;
    let out = synth(dir.path(), "d", &format!(r#"{{"nights": 3, "night_s": 240, "groups": {groups}}}"#), 0);
    let m = json(&out.join("manifest.json"));
    let expected: Value = serde_json::from_str(groups).unwrap();
    assert_eq!(m["group_offsets"], expected);
    assert_eq!(rsp_files(&out).len(), 3);
}

#[test]
fn synth_bad_profile_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let prof = dir.path().join("p.json");
    for text in [r#"{"nightz": 3}"#, r#"{"nights": 0}"#, "not json"] {
        fs::write(&prof, text).unwrap();
        let out = gbunet(&["synth", "--out", s(&dir.path().join("o")), "--profile", s(&prof)]);
        assert_eq!(code(&out), 2, "{text}");
    }
}

#[test]
fn gated_training_writes_all_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", SMALL, 1);
    let run = |name: &str| {
        let ck = dir.path().join(name);
        ok(&["train", "--config", TINY, "--data", s(&data), "--variant", "gated", "--epochs", "5", "--out", s(&ck)]);
        ck
    };
    let a = run("a.gbu");
    let b = run("b.gbu");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(&fs::read(&a).unwrap()[..4], b"GBU1");

    let map = json(&a.with_extension("gatemap.json"));
    assert_eq!(map["n_heads"], 2);
    assert_eq!(map["provenance"]["method"], "grad-sim");
    assert!(map["provenance"]["tool_version"].is_string());
    let log = fs::read_to_string(a.with_extension("log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["phase"], "pretrain");
    assert_eq!(lines[4]["phase"], "gated");
    assert!(lines.iter().all(|l| l["config_hash"].is_string()));
}

#[test]
fn resumed_training_reproduces_the_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", SMALL, 2);
    for variant in ["backbone", "gated"] {
        let full = dir.path().join(format!("{variant}.gbu"));
        let base = ["train", "--config", TINY, "--data", s(&data), "--variant", variant, "--epochs", "5"];
        let mut args = base.to_vec();
        args.extend(["--out", s(&full), "--checkpoint-every", "2"]);
        ok(&args);
        let mid = full.with_extension("e0002.gbu");
        assert!(mid.exists());
        let resumed = dir.path().join(format!("{variant}-resumed.gbu"));
        let mut args = base.to_vec();
        args.extend(["--out", s(&resumed), "--resume", s(&mid)]);
        ok(&args);
        assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap(), "{variant}");
    }
}

#[test]
fn eval_report_groups_dumps_and_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", SMALL, 3);
    let ck = dir.path().join("m.gbu");
    ok(&["train", "--config", TINY, "--data", s(&data), "--epochs", "3", "--out", s(&ck)]);

    let report = dir.path().join("r.json");
    let dumps = dir.path().join("dumps");
    ok(&[
        "eval", "--config", TINY, "--ckpt", s(&ck), "--data", s(&data), "--split", "all",
        "--group-by", "gender", "--dump", s(&dumps), "--report", s(&report), "--jobs", "2",
    ]);
    let r = json(&report);
    for block in [&r["overall"], &r["datasets"]["synth"]] {
        for k in ["corr", "mae", "rmse"] {
            assert!(block[k].is_number(), "{k}");
        }
    }
    assert_eq!(r["segment_count"], 16);
    assert!(r["checkpoint_id"].is_string() && r["config_hash"].is_string());
    assert!(r["groups"]["groups"].as_object().unwrap().len() == 2);
    assert_eq!(fs::read_dir(&dumps).unwrap().count(), 8);

    let plain = dir.path().join("plain.json");
    ok(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--split", "all", "--report", s(&plain)]);
    assert!(json(&plain).get("groups").is_none());

    let other = dir.path().join("other.json");
    let mut cfg = json(Path::new(TINY));
    cfg["model"]["lambda"] = 0.5.into();
    fs::write(&other, cfg.to_string()).unwrap();
    let out = gbunet(&["eval", "--config", s(&other), "--ckpt", s(&ck), "--data", s(&data), "--report", s(&plain)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn overfit_model_fits_its_own_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "one", r#"{"nights": 1, "night_s": 480}"#, 1);
    let ck = dir.path().join("o.gbu");
    ok(&[
        "train", "--config", TINY, "--data", s(&data), "--split", "all", "--epochs", "800", "--lr", "3e-3",
        "--out", s(&ck),
    ]);
    let report = dir.path().join("r.json");
    ok(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--split", "all", "--report", s(&report)]);
    let mae = json(&report)["overall"]["mae"].as_f64().unwrap();
    assert!(mae < 0.5, "own-record MAE {mae}");
}

#[test]
fn gatemap_with_one_head_per_state_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", SMALL, 5);
    let ck = dir.path().join("bb.gbu");
    ok(&["train", "--config", TINY, "--data", s(&data), "--split", "all", "--epochs", "2", "--out", s(&ck)]);
    let map = dir.path().join("map.json");
    ok(&["gatemap", "--config", TINY, "--ckpt", s(&ck), "--data", s(&data), "--split", "all", "--n-heads", "6", "--out", s(&map)]);
    let m = json(&map);
    let table = m["table"].as_object().unwrap();
    let heads: Vec<u64> = table.values().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(heads, (1..=6).collect::<Vec<_>>());
    let sim = m["provenance"]["similarity"].as_array().unwrap();
    assert_eq!(sim.len(), 6);
    for (i, row) in sim.iter().enumerate() {
        assert!((row[i].as_f64().unwrap() - 1.0).abs() < 1e-12);
        for (j, v) in row.as_array().unwrap().iter().enumerate() {
            assert_eq!(*v, sim[j][i]);
        }
    }
}

#[test]
fn gradcheck_passes_on_a_fresh_tree() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let stdout = ok(&["gradcheck", "--scale", "tiny", "--seed", "0", "--report", s(&report)]);
    assert!(stdout.contains("gradient suite passed"));
    let cases = json(&report)["cases"].as_array().unwrap().len();
    assert!(cases > 40);
}

#[test]
fn inspect_reports_reference_count_and_rejects_truncation() {
    let stdout = ok(&["inspect"]);
    assert!(stdout.contains("26,821,113"));
    assert!(stdout.contains("variant gated"));

    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", r#"{"nights": 2, "night_s": 240}"#, 0);
    let ck = dir.path().join("m.gbu");
    ok(&["train", "--config", TINY, "--data", s(&data), "--split", "all", "--epochs", "1", "--out", s(&ck)]);
    let stdout = ok(&["inspect", "--ckpt", s(&ck)]);
    assert!(stdout.contains("parameters") && stdout.contains("encoder.0"));

    let bytes = fs::read(&ck).unwrap();
    let cut = dir.path().join("cut.gbu");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = gbunet(&["inspect", "--ckpt", s(&cut)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gbunet(&["train", "--bogus"])), 2);
    assert_eq!(code(&gbunet(&["inspect", "--ckpt", s(&dir.path().join("missing.gbu"))])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochz": 1}}"#).unwrap();
    let out = gbunet(&["train", "--config", s(&bad), "--data", s(dir.path()), "--out", s(&dir.path().join("x.gbu"))]);
    assert_eq!(code(&out), 2);
    // no records in the data directory: a runtime failure
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = gbunet(&["train", "--config", TINY, "--data", s(&empty), "--out", s(&dir.path().join("x.gbu"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_path_comes_from_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_gbunet"))
        .args(["inspect"])
        .env("GBUNET_CONFIG", TINY)
        .env("GBUNET_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("variant backbone"));
    assert!(!stdout.contains("parameters 26,821,113"));
}
