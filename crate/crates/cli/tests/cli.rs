use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use overwhelm_core::format::write_model;
use overwhelm_core::toy::{random_model, ToyConfig};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_overwhelm"))
}

fn fixture(dir: &Path, name: &str, cfg: &ToyConfig, seed: u64) -> PathBuf {
    let path = dir.join(name);
    write_model(&random_model(cfg, seed), std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> (Output, Option<Value>) {
    let out = bin().args(args).output().unwrap();
    let json = serde_json::from_slice(&out.stdout).ok();
    (out, json)
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn without_wall_time(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_time_seconds");
    v
}

#[test]
fn fully_fixed_input_is_overwhelmed() {
    let dir = TempDir::new().unwrap();
    let m = fixture(dir.path(), "m.ovwm", &ToyConfig::default(), 3);
    let (out, json) = run(&["verify", "--model", m.to_str().unwrap(), "--fixed", "0,1,2", "--n-free", "0", "--query", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json = json.unwrap();
    assert_eq!(json["report_version"], 1);
    assert_eq!(json["result"]["w"], 0.0);
    assert_eq!(json["outcome"]["verdict"], "overwhelmed");
    assert_eq!(json["model"]["sha256"].as_str().unwrap().len(), 64);
    for key in ["l_min", "l_max"] {
        assert!(json["result"]["heads"][0]["logits"][key].is_array());
    }
    assert!(json["result"]["heads"][0]["mass"]["shift"].is_number());
}

#[test]
fn reports_are_reproducible_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = ToyConfig { n_heads: 2, d_emb: 8, ..ToyConfig::default() };
    let m = fixture(dir.path(), "m.ovwm", &cfg, 4);
    let m = m.to_str().unwrap();
    let base = ["verify", "--model", m, "--fixed", "0,1,2,3", "--n-free", "2", "--query", "1"];
    let (a, ja) = run(&base);
    let (b, jb) = run(&[&base[..], &["--threads", "1"]].concat());
    let (c, jc) = run(&[&base[..], &["--threads", "3"]].concat());
    assert_eq!(code(&a), code(&b));
    assert_eq!(code(&a), code(&c));
    let ja = without_wall_time(ja.unwrap());
    assert_eq!(ja, without_wall_time(jb.unwrap()));
    assert_eq!(ja, without_wall_time(jc.unwrap()));

    let strip = |out: &Output| {
        String::from_utf8(out.stdout.clone())
            .unwrap()
            .lines()
            .filter(|l| !l.contains("wall_time_seconds"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn exit_code_follows_verdict() {
    let dir = TempDir::new().unwrap();
    let m = fixture(dir.path(), "m.ovwm", &ToyConfig { value_scale: 3.0, ..ToyConfig::default() }, 5);
    let (out, json) = run(&["verify", "--model", m.to_str().unwrap(), "--n-free", "3", "--query", "0"]);
    let json = json.unwrap();
    let expected = if json["outcome"]["verdict"] == "overwhelmed" { 0 } else { 1 };
    assert_eq!(code(&out), expected);
    assert_eq!(json["outcome"]["exit_code"], expected);
}

#[test]
fn lp_bound_never_exceeds_naive() {
    let dir = TempDir::new().unwrap();
    let m = fixture(dir.path(), "m.ovwm", &ToyConfig { d_vocab: 6, qk_scale: 3.0, ..ToyConfig::default() }, 6);
    let m = m.to_str().unwrap();
    let w = |method: &str| {
        let (out, json) = run(&["verify-perm", "--model", m, "--fixed", "1,2", "--perm", "0,3,3,5", "--query", "4", "--method", method]);
        assert!(code(&out) < 2, "{}", String::from_utf8_lossy(&out.stderr));
        let json = json.unwrap();
        assert_eq!(json["result"]["method"], method);
        json["result"]["w"].as_f64().unwrap()
    };
    assert!(w("lp") <= w("naive"));
}

#[test]
fn oracle_check_passes_and_refuses_large_spaces() {
    let dir = TempDir::new().unwrap();
    let m = fixture(dir.path(), "m.ovwm", &ToyConfig::default(), 7);
    let m = m.to_str().unwrap();
    let (out, json) = run(&["oracle-check", "--model", m, "--fixed", "2", "--n-free", "3", "--query", "1"]);
    assert!(code(&out) < 2, "{}", String::from_utf8_lossy(&out.stderr));
    let json = json.unwrap();
    assert_eq!(json["result"]["enumeration"]["count"], 64);
    assert!(json["result"]["violations"].as_array().unwrap().is_empty());

    let (out, _) = run(&["oracle-check", "--model", m, "--perm", "0,1,1,2", "--query", "3"]);
    assert!(code(&out) < 2);

    let (out, _) = run(&["oracle-check", "--model", m, "--n-free", "3", "--query", "1", "--limit", "10"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("64 inputs exceed the limit of 10"));
}

#[test]
fn errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let m = fixture(dir.path(), "m.ovwm", &ToyConfig::default(), 8);
    let m = m.to_str().unwrap();
    // token out of range
    assert_eq!(code(&run(&["verify", "--model", m, "--n-free", "1", "--query", "9"]).0), 2);
    // missing required flag
    assert_eq!(code(&run(&["verify", "--model", m, "--query", "1"]).0), 2);
    // unreadable model
    assert_eq!(code(&run(&["verify", "--model", "/nonexistent", "--n-free", "1", "--query", "1"]).0), 2);
    // corrupt model
    let bad = dir.path().join("bad.ovwm");
    std::fs::write(&bad, b"OVWMxxxx").unwrap();
    assert_eq!(code(&run(&["verify", "--model", bad.to_str().unwrap(), "--n-free", "1", "--query", "1"]).0), 2);
    // convergence needs a model without rotary embedding
    assert_eq!(code(&run(&["converge", "--model", m, "--query", "0", "--n-free", "4"]).0), 2);
}

#[test]
fn convergence_scan_and_csv() {
    let dir = TempDir::new().unwrap();
    let m = fixture(dir.path(), "m.ovwm", &ToyConfig { rope: false, ..ToyConfig::default() }, 0);
    let m = m.to_str().unwrap();
    let (out, json) = run(&["converge", "--model", m, "--query", "0", "--n-free", "4", "--schedule", "2^3..2^20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json = json.unwrap();
    assert_eq!(json["result"]["rows"].as_array().unwrap().len(), 18);
    assert!(json["result"]["first_certified"].is_u64());

    let (out, _) = run(&["converge", "--model", m, "--query", "0", "--free-ratio", "1/2"]);
    assert_eq!(code(&out), 1);

    let csv_path = dir.path().join("scan.csv");
    let (out, _) = run(&[
        "converge", "--model", m, "--query", "0", "--n-free", "4", "--schedule", "8,64,512", "--format", "csv", "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("field,value\n"));
    assert!(text.lines().any(|l| l.starts_with("result.rows.2.n_ctx,512")));
    assert!(text.lines().any(|l| l.starts_with("wall_time_seconds,")));
}

#[test]
fn vocab_map_accepts_token_text() {
    let dir = TempDir::new().unwrap();
    let m = fixture(dir.path(), "m.ovwm", &ToyConfig::default(), 9);
    let vocab = dir.path().join("vocab.txt");
    std::fs::write(&vocab, "the\ncat\nsat\n.\n").unwrap();
    let m = m.to_str().unwrap();
    let v = vocab.to_str().unwrap();
    let (out, json) = run(&["verify", "--model", m, "--vocab", v, "--fixed", "the,cat", "--n-free", "1", "--query", "sat"]);
    assert!(code(&out) < 2, "{}", String::from_utf8_lossy(&out.stderr));
    let json = json.unwrap();
    assert_eq!(json["config"]["fixed"], serde_json::json!([0, 1]));
    assert_eq!(json["config"]["query"], 2);
    assert!(json["outcome"]["greedy_text"].is_string());

    let (by_id, json_id) = run(&["verify", "--model", m, "--fixed", "0,1", "--n-free", "1", "--query", "2"]);
    assert_eq!(code(&by_id), code(&out));
    assert_eq!(json_id.unwrap()["result"], json["result"]);

    std::fs::write(&vocab, "the\ncat\n").unwrap();
    assert_eq!(code(&run(&["verify", "--model", m, "--vocab", v, "--n-free", "1", "--query", "the"]).0), 2);
}
