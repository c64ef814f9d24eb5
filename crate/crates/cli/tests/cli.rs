use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn qc<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_qualcode")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(out: Output) -> Value {
    serde_json::from_str(&ok(out)).unwrap()
}

fn failure(out: Output) -> (i32, Value) {
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| {
        panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr))
    });
    for key in ["code", "message", "details"] {
        assert!(err.get(key).is_some(), "{err}");
    }
    (out.status.code().unwrap(), err)
}

/// import, codebook, embed, classify; returns the project dir.
fn pipeline(root: &Path) -> PathBuf {
    let corpus = data().join("synthetic");
    let p = root.join("synthetic");
    let ps = p.to_str().unwrap();
    ok(qc(["import", "--input", corpus.join("responses.csv").to_str().unwrap(), "--project", ps]));
    ok(qc(["codebook", "set", "--project", ps, "--file", corpus.join("codebook.json").to_str().unwrap()]));
    ok(qc(["embed", "--project", ps, "--provider", corpus.join("provider.json").to_str().unwrap()]));
    ok(qc(["classify", "--project", ps, "--mode", "selective"]));
    p
}

#[test]
fn bundled_corpus_matches_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let out = json(qc(["synthetic", "--out", dir.path().to_str().unwrap()]));
    assert_eq!(out["responses"], 306);
    for name in ["responses.csv", "codebook.json", "provider.json", "adapter.json"] {
        let want = std::fs::read(data().join("synthetic").join(name)).unwrap();
        let got = std::fs::read(dir.path().join(name)).unwrap();
        assert!(want == got, "{name} drifted from the generator");
    }
}

#[test]
fn pipeline_reproduces_golden_reports() {
    let golden_metrics = std::fs::read_to_string(data().join("golden/metrics.json")).unwrap();
    let golden_audit = std::fs::read_to_string(data().join("golden/audit.json")).unwrap();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path());
        let ps = p.to_str().unwrap();
        assert_eq!(ok(qc(["evaluate", "--project", ps])), golden_metrics);
        assert_eq!(ok(qc(["audit", "--project", ps, "--threshold", "0.15"])), golden_audit);
    }
}

#[test]
fn identical_codes_give_perfect_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let mut body = String::from("id,text,code\n");
    for i in 0..6 {
        body.push_str(&format!("a{i},the friction did it {i},A\nb{i},energy was lost {i},B\n"));
    }
    std::fs::write(&csv, body).unwrap();
    let provider = dir.path().join("provider.json");
    std::fs::write(
        &provider,
        r#"{"kind":"mock","model_id":"mock/tiny","dim":16,"seed":3,
            "anchors":{"anchors":[{"keyword":"friction","centers":[["c:A",1.0]]},
                                  {"keyword":"energy","centers":[["c:B",1.0]]}],"noise":0.1}}"#,
    )
    .unwrap();
    let codebook = dir.path().join("codebook.json");
    std::fs::write(
        &codebook,
        r#"{"categories":[
            {"id":"A","name":"A","definition":"","exemplar_ids":["a0","a1"],"is_other":false},
            {"id":"B","name":"B","definition":"","exemplar_ids":["b0","b1"],"is_other":false}]}"#,
    )
    .unwrap();
    let p = dir.path().join("tiny");
    let ps = p.to_str().unwrap();
    ok(qc(["import", "--input", csv.to_str().unwrap(), "--project", ps]));
    ok(qc(["codebook", "set", "--project", ps, "--file", codebook.to_str().unwrap()]));
    ok(qc(["embed", "--project", ps, "--provider", provider.to_str().unwrap()]));
    ok(qc(["classify", "--project", ps]));
    let report = json(qc(["evaluate", "--project", ps]));
    assert_eq!(report["kappa"], 1.0);
    assert_eq!(report["mcc"], 1.0);
    let table = ok(qc(["evaluate", "--project", ps, "--format", "table"]));
    assert!(table.contains("kappa        1.0000"), "{table}");
}

#[test]
fn exit_codes_and_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let (code, err) = failure(qc(["evaluate", "--project", missing.to_str().unwrap()]));
    assert_eq!((code, err["code"].as_str().unwrap()), (2, "not_found"));
    let (code, err) = failure(qc(["classify", "--project", "x", "--mode", "bogus"]));
    assert_eq!((code, err["code"].as_str().unwrap()), (2, "usage"));

    let p = pipeline(dir.path());
    let ps = p.to_str().unwrap();
    let (code, _) = failure(qc(["audit", "--project", ps, "--threshold", "3"]));
    assert_eq!(code, 2);
    let (code, _) = failure(qc(["evaluate", "--project", ps, "--resample", "k=13,runs=2"]));
    assert_eq!(code, 2);

    // stale revision and mismatched old code: integrity
    json(qc(["audit", "--project", ps]));
    let rev = json(qc(["codebook", "show", "--project", ps])); // read-only
    assert!(rev["categories"].is_array());
    let res = dir.path().join("res.csv");
    std::fs::write(&res, "response_id,old_code,new_code\nr016,L,S\n").unwrap();
    let (code, err) = failure(qc(["audit", "resolve", "--project", ps, "--file", res.to_str().unwrap(), "--revision", "1"]));
    assert_eq!((code, err["code"].as_str().unwrap()), (4, "stale_revision"));
    std::fs::write(&res, "response_id,old_code,new_code\nr016,P,S\n").unwrap();
    let (code, _) = failure(qc(["audit", "resolve", "--project", ps, "--file", res.to_str().unwrap()]));
    assert_eq!(code, 4);
    std::fs::write(&res, "response_id,old_code,new_code\nr016,L,L\n").unwrap();
    let out = json(qc(["audit", "resolve", "--project", ps, "--file", res.to_str().unwrap(), "--revision", "5"]));
    assert_eq!(out["revision"], 6);
    let summary = out["summary"].clone();
    assert_eq!(summary["flagged"], 51);

    // unreachable provider: transport
    let provider = dir.path().join("dead.json");
    std::fs::write(
        &provider,
        r#"{"kind":"remote_http","endpoint":"http://127.0.0.1:1/v1","model_id":"remote/x",
            "retry":{"max_retries":0,"base_backoff_ms":1},"timeout_secs":2}"#,
    )
    .unwrap();
    let (code, err) = failure(qc(["embed", "--project", ps, "--provider", provider.to_str().unwrap()]));
    assert_eq!((code, err["code"].as_str().unwrap()), (3, "transport"));
    // nothing was written
    assert_eq!(json(qc(["audit", "summary", "--project", ps])), summary);
}

#[test]
fn adapter_projection_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let ps = p.to_str().unwrap();
    let hp = data().join("synthetic/adapter.json");
    let out = json(qc(["adapter", "train", "--project", ps, "--hyperparams", hp.to_str().unwrap(), "--seed", "1"]));
    assert_eq!(out["pair_count"], 48 * 48);
    assert_eq!(out["active"], false);
    assert!(out["final_loss"].as_f64().unwrap() < out["initial_loss"].as_f64().unwrap());
    let out = json(qc(["adapter", "apply", "--project", ps]));
    assert_eq!(out["adapter_active"], true);
    let out = json(qc(["classify", "--project", ps, "--mode", "exhaustive"]));
    assert_eq!(out["adapted"], true);
    let out = json(qc(["adapter", "apply", "--project", ps, "--off"]));
    assert_eq!(out["adapter_active"], false);

    let run = |seed: &str| {
        json(qc(["project", "--project", ps, "--method", "tsne", "--perplexity", "20", "--iterations", "300", "--seed", seed]));
        std::fs::read(p.join("projection.json")).unwrap()
    };
    let a = run("5");
    assert_eq!(a, run("5"));
    assert_ne!(a, run("6"));
    let csv_path = dir.path().join("pca.csv");
    let out = json(qc(["project", "--project", ps, "--method", "pca", "--out", csv_path.to_str().unwrap()]));
    assert_eq!(out["points"], 306);
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap().lines().count(), 307);

    let csv = ok(qc(["export", "--project", ps]));
    assert!(csv.starts_with("response_id,category_id,"));
    assert_eq!(csv.lines().count(), 307);
    let jsonl = ok(qc(["export", "--project", ps, "--data", "responses", "--format", "jsonl"]));
    assert_eq!(jsonl.lines().count(), 306);
    let (code, _) = failure(qc(["export", "--project", ps, "--data", "audit"]));
    assert_eq!(code, 2);
}

#[test]
fn serve_subcommand_answers_health() {
    let store = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_qualcode"))
        .args(["serve", "--addr", &addr, "--store", store.path().to_str().unwrap()])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let body = rt.block_on(async {
        let started = Instant::now();
        loop {
            match reqwest::get(format!("http://{addr}/api/v1/health")).await {
                Ok(r) => break r.json::<Value>().await.unwrap(),
                Err(_) if started.elapsed() < Duration::from_secs(20) => {
                    tokio::time::sleep(Duration::from_millis(50)).await
                }
                Err(e) => panic!("service did not come up: {e}"),
            }
        }
    });
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(body["status"], "ok");
}
