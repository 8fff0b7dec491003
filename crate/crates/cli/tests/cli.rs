use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reader-bench"));
    c.env("RUST_LOG", "error");
    c
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out-dir").arg(out).args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) -> Value {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Exit code plus the parsed single-line stderr error.
fn fails(out: &Path, args: &[&str]) -> (i32, Value) {
    let o = run(out, args);
    let stderr = String::from_utf8(o.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    (o.status.code().unwrap(), serde_json::from_str(lines[0]).unwrap())
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn pipeline(dir: &Path, seed: &str) {
    let manifest = core_fixture("manifest_240.csv");
    let m = manifest.to_str().unwrap();
    let ingest = ok(dir, &["ingest", "--manifest", m]);
    assert_eq!(ingest["patients"], 240);
    let design = ok(dir, &["--seed", seed, "design", "--manifest", m]);
    assert_eq!(design["rounds"], 4);
    let sim = ok(
        dir,
        &["--seed", seed, "simulate", "--schedule", &p(dir, "schedule.json"), "--cohort", &p(dir, "cohort.csv")],
    );
    assert_eq!(sim["events"], 11_520);
    ok(dir, &["--seed", seed, "analyze"]);
    ok(dir, &["--seed", seed, "report", "--report", &p(dir, "report.json")]);
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "2024");
    pipeline(b.path(), "2024");
    let fa = files(a.path());
    let fb = files(b.path());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        if name == "manifest_summary.json" {
            continue; // records the input path
        }
        assert!(bytes == &fb[name], "{name} differs between runs");
    }
    for name in [
        "schedule.json",
        "cohort.csv",
        "verification.json",
        "events.jsonl",
        "suggestions.json",
        "payload_audit.json",
        "report.json",
        "per_clinician_f1.csv",
        "timing_series.csv",
        "per_scale_f1.csv",
        "lmm_coefficients.csv",
    ] {
        assert!(fa.contains_key(name), "missing {name}");
    }

    let verification: Value = serde_json::from_slice(&fa["verification.json"]).unwrap();
    assert!(verification["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
    let audit: Value = serde_json::from_slice(&fa["payload_audit.json"]).unwrap();
    assert_eq!(audit["manual_payloads"], 5_760);
    assert_eq!(audit["violations"], json!([]));

    // Re-analyzing the same log gives the same bytes.
    let report = fa["report.json"].clone();
    ok(a.path(), &["--seed", "2024", "analyze"]);
    assert_eq!(std::fs::read(a.path().join("report.json")).unwrap(), report);

    let rep: Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(rep["metadata"]["events"], 11_520);
    assert_eq!(rep["audit"], json!([]));
    let sev = rep["arm_comparison"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["target"] == "severity")
        .unwrap();
    assert!(sev["improved"].as_u64().unwrap() >= 23);
}

#[test]
fn different_seed_changes_the_design() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = core_fixture("manifest_240.csv");
    ok(a.path(), &["--seed", "1", "design", "--manifest", m.to_str().unwrap()]);
    ok(b.path(), &["--seed", "2", "design", "--manifest", m.to_str().unwrap()]);
    assert_ne!(
        std::fs::read(a.path().join("schedule.json")).unwrap(),
        std::fs::read(b.path().join("schedule.json")).unwrap()
    );
}

#[test]
fn table1_from_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let arg = |ds: &str, f: &str| format!("{ds}={}", core_fixture(f).display());
    // Shuffled dataset order renders the same canonical table.
    let out = ok(
        dir.path(),
        &[
            "report",
            "--predictions",
            &arg("SEED", "table1_seed.csv"),
            "--predictions",
            &arg("AREDS", "table1_areds.csv"),
            "--predictions",
            &arg("AREDS2", "table1_areds2.csv"),
            "--models",
            "baseline,extended",
        ],
    );
    assert_eq!(out["files"], json!(["table1.csv", "model_comparison.json"]));
    let table = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "dataset,scale,baseline,extended,p");
    assert!(lines.contains(&"AREDS,Overall,0.4755,0.4793,0.95"));
    assert!(lines.contains(&"AREDS2,Overall,0.5162,0.6395,<.001"));
    assert!(lines.contains(&"SEED,Overall,0.3895,0.5243,<.001"));
    assert_eq!(lines.len(), 1 + 7 + 4 + 7);
    assert_eq!(lines[1], "AREDS,Overall,0.4755,0.4793,0.95");
}

#[test]
fn validation_failures_exit_2_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let (code, err) = fails(d, &["design"]);
    assert_eq!((code, err["error"].as_str()), (2, Some("validation")));

    let (code, _) = fails(d, &["no-such-command"]);
    assert_eq!(code, 2);

    let (code, err) = fails(d, &["ingest", "--manifest", "/nonexistent/manifest.csv"]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("/nonexistent/manifest.csv"));

    std::fs::write(d.join("bad.csv"), "patient_id,drusen_L\nP1,9\n").unwrap();
    let (code, _) = fails(d, &["ingest", "--manifest", &p(d, "bad.csv")]);
    assert_eq!(code, 2);

    std::fs::write(d.join("study.toml"), "sead = 3\n").unwrap();
    let (code, err) = fails(d, &["--config", &p(d, "study.toml"), "ingest", "--synthetic", "2"]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("study.toml"));

    let (code, _) = fails(d, &["report", "--predictions", "no-equals-sign"]);
    assert_eq!(code, 2);

    // A corrupted event log.
    ok(d, &["ingest", "--synthetic", "2"]);
    std::fs::write(d.join("study.toml"), "[simulation]\npatients_per_level = 2\nclinicians = 2\nmissing_time_clinicians = 0\n").unwrap();
    let cfg = p(d, "study.toml");
    ok(d, &["--config", &cfg, "simulate", "--manifest", &p(d, "manifest.csv")]);
    ok(d, &["--config", &cfg, "analyze"]);
    std::fs::write(d.join("events.jsonl"), "{not json}\n").unwrap();
    let (code, err) = fails(d, &["--config", &cfg, "analyze"]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("line 1"));
}

#[test]
fn environment_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let (code, err) = fails(&blocker.join("sub"), &["ingest", "--synthetic", "2"]);
    assert_eq!((code, err["error"].as_str()), (3, Some("runtime")));
}

#[test]
fn help_exits_zero() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in ["ingest", "design", "serve", "simulate", "analyze", "report"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

struct Server {
    child: Child,
    base: String,
    replayed: u64,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server(dir: &Path, config: &str) -> Server {
    let mut child = bin()
        .args(["--out-dir", dir.to_str().unwrap(), "--config", config, "serve", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let info: Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("unexpected stderr: {line}"));
    Server {
        child,
        base: format!("http://{}", info["listening"].as_str().unwrap()),
        replayed: info["events_replayed"].as_u64().unwrap(),
    }
}

#[test]
fn serve_with_subprocess_predictor_and_resume_from_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["ingest", "--synthetic", "2"]);
    // A predictor that always answers the same grades.
    let reply = r#"{"left": {"drusen": 2, "pigment": 0, "late_amd": 0}, "right": {"drusen": 2, "pigment": 0, "late_amd": 0}}"#;
    let config = format!(
        "[predictor]\nmode = \"subprocess\"\ncommand = [\"sh\", \"-c\", '''while read line; do echo '{reply}'; done''']\ntimeout_seconds = 5\n\n[simulation]\npatients_per_level = 2\nclinicians = 2\nmissing_time_clinicians = 0\n"
    );
    std::fs::write(d.join("study.toml"), config).unwrap();
    let cfg = p(d, "study.toml");
    ok(d, &["--config", &cfg, "design", "--manifest", &p(d, "manifest.csv")]);

    let client = reqwest::blocking::Client::new();
    let grades = json!({
        "left": {"drusen": 0, "pigment": 0, "late_amd": 0},
        "right": {"drusen": 0, "pigment": 0, "late_amd": 0}
    });
    let alias;
    {
        let server = start_server(d, &cfg);
        assert_eq!(server.replayed, 0);
        let session: Value = client
            .post(format!("{}/sessions", server.base))
            .json(&json!({"clinician_id": "C01", "round_no": 1}))
            .send()
            .unwrap()
            .json()
            .unwrap();
        let id = session["session_id"].as_str().unwrap();
        let mut saw_ai = false;
        let mut last = String::new();
        // Batches are single-arm, so four cases span both arms.
        for _ in 0..4 {
            let case: Value = client
                .get(format!("{}/sessions/{id}/next", server.base))
                .send()
                .unwrap()
                .json()
                .unwrap();
            if case["arm"] == "ManualPlusAI" {
                saw_ai = true;
                assert_eq!(case["ai_suggestion"]["severity"], 2);
            } else {
                assert!(case.get("ai_suggestion").is_none());
            }
            last = case["patient_alias"].as_str().unwrap().to_string();
            let status = client
                .post(format!("{}/sessions/{id}/submit", server.base))
                .json(&json!({"patient_alias": last, "grades": grades}))
                .send()
                .unwrap()
                .status();
            assert_eq!(status.as_u16(), 201);
        }
        assert!(saw_ai);
        alias = last;
        let suggestions: Value =
            serde_json::from_slice(&std::fs::read(d.join("suggestions.json")).unwrap()).unwrap();
        assert_eq!(suggestions["by_patient"].as_object().unwrap().len(), 12);
        assert_eq!(suggestions["failures"], json!({}));
    }

    let server = start_server(d, &cfg);
    assert_eq!(server.replayed, 4);
    let session: Value = client
        .post(format!("{}/sessions", server.base))
        .json(&json!({"clinician_id": "C01", "round_no": 1}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(session["position"], 4);
    let events = client.get(format!("{}/events?clinician=C01", server.base)).send().unwrap().text().unwrap();
    let lines: Vec<Value> = events.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["patient_alias"], alias.as_str());
    let progress: Value = client.get(format!("{}/admin/progress", server.base)).send().unwrap().json().unwrap();
    assert_eq!(progress["events"], 4);
}
