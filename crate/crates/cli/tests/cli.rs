//! End-to-end command tests driving the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_statesoup"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_train_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.json");
    std::fs::write(
        &path,
        r#"{
  "model": {"vocab_size": 206, "n_layers": 2, "d_model": 16, "d_inner": 32,
            "d_state": 8, "n_heads": 2, "eps": 1e-5, "seed": 3},
  "train": {"mode": "soup_full", "soup_cfg": {"op": "average"},
            "batch_size": 4, "grad_accum_steps": 1, "epochs": 1, "seed": 9}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn help_documents_all_flags() {
    let expectations: &[(&str, &[&str])] = &[
        ("gen-data", &["--task", "--out", "--seed", "--examples", "--pairs", "--segments", "--distractors"]),
        ("train", &["--config", "--data", "--out", "--ckpt-every"]),
        (
            "eval",
            &["--ckpt", "--data", "--test-segments", "--soup", "--mode", "--train-segments", "--task", "--out", "--sample", "--temperature", "--top-p", "--top-k", "--max-len", "--seed"],
        ),
        ("encode", &["--ckpt", "--doc", "--cache", "--id", "--no-doc-sep"]),
        ("soup", &["--cache", "--ids", "--soup", "--out", "--ckpt", "--id"]),
        ("ask", &["--ckpt", "--state", "--question", "--sample", "--temperature", "--top-p", "--top-k", "--max-len", "--seed"]),
        ("bench", &["--ckpt", "--lengths", "--trials", "--query-len", "--cache", "--out", "--seed"]),
    ];
    for (cmd, flags) in expectations {
        let out = run(&[cmd, "--help"]);
        assert_ok(&out);
        let text = stdout(&out);
        for flag in *flags {
            assert!(text.contains(flag), "{cmd} --help missing {flag}:\n{text}");
        }
    }
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("niah.jsonl");

    let out = run(&[
        "gen-data", "--task", "niah", "--out", data.to_str().unwrap(),
        "--seed", "1", "--examples", "12", "--pairs", "8", "--segments", "2",
    ]);
    assert_ok(&out);
    assert!(data.exists());
    assert!(dir.path().join("niah.jsonl.manifest.json").exists());

    let cfg = write_train_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train", "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let ckpt = run_dir.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(run_dir.join("manifest.json").exists());
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss,grad_norm"));

    let out = run(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--test-segments", "2,4", "--train-segments", "2", "--task", "niah",
    ]);
    assert_ok(&out);
    let csv = stdout(&out);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,train_segments,test_segments,n,em,f1,matched_cell");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("niah,2,2,12,"));
    assert!(lines[1].ends_with("true"));
    assert!(lines[2].starts_with("niah,2,4,12,"));
    assert!(lines[2].ends_with("false"));
}

#[test]
fn encode_soup_ask_pipeline_and_k1_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path());
    let data = dir.path().join("d.jsonl");
    assert_ok(&run(&[
        "gen-data", "--task", "niah", "--out", data.to_str().unwrap(),
        "--seed", "2", "--examples", "4", "--pairs", "4", "--segments", "2",
    ]));
    let run_dir = dir.path().join("run");
    assert_ok(&run(&[
        "train", "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap(),
    ]));
    let ckpt = run_dir.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let doc_a = dir.path().join("doc_a.txt");
    let doc_b = dir.path().join("doc_b.txt");
    std::fs::write(&doc_a, "key k1 value v2 key k3 value v4").unwrap();
    std::fs::write(&doc_b, "key k5 value v6").unwrap();
    let cache = dir.path().join("cache");
    let cache_s = cache.to_str().unwrap();

    let enc_a = run(&["encode", "--ckpt", ckpt, "--doc", doc_a.to_str().unwrap(), "--cache", cache_s]);
    assert_ok(&enc_a);
    let state_a = PathBuf::from(stdout(&enc_a).trim());
    assert!(state_a.exists());
    assert_ok(&run(&["encode", "--ckpt", ckpt, "--doc", doc_b.to_str().unwrap(), "--cache", cache_s]));

    // pool both docs and ask a question against the soup
    let souped = dir.path().join("both.state");
    let out = run(&[
        "soup", "--cache", cache_s, "--ids", "doc_a,doc_b",
        "--soup", r#"{"op":"average"}"#, "--out", souped.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let ask = run(&[
        "ask", "--ckpt", ckpt, "--state", souped.to_str().unwrap(),
        "--question", "what is the value of key k3",
    ]);
    assert_ok(&ask);

    // k = 1 soup must answer byte-for-byte like the directly encoded state
    let solo = dir.path().join("solo.state");
    assert_ok(&run(&[
        "soup", "--cache", cache_s, "--ids", "doc_a", "--out", solo.to_str().unwrap(),
    ]));
    let direct = run(&[
        "ask", "--ckpt", ckpt, "--state", state_a.to_str().unwrap(),
        "--question", "what is the value of key k1",
    ]);
    let via_soup = run(&[
        "ask", "--ckpt", ckpt, "--state", solo.to_str().unwrap(),
        "--question", "what is the value of key k1",
    ]);
    assert_ok(&direct);
    assert_ok(&via_soup);
    assert_eq!(direct.stdout, via_soup.stdout);
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("a.jsonl");
    let d2 = dir.path().join("b.jsonl");
    for out in [&d1, &d2] {
        assert_ok(&run(&[
            "gen-data", "--task", "multihop", "--out", out.to_str().unwrap(),
            "--seed", "7", "--examples", "20", "--distractors", "3",
        ]));
    }
    assert_eq!(std::fs::read(&d1).unwrap(), std::fs::read(&d2).unwrap());

    let cfg = write_train_config(dir.path());
    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    for out in [&r1, &r2] {
        assert_ok(&run(&[
            "train", "--config", cfg.to_str().unwrap(),
            "--data", d1.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]));
    }
    assert_eq!(
        std::fs::read(r1.join("model.ckpt")).unwrap(),
        std::fs::read(r2.join("model.ckpt")).unwrap(),
        "training must be byte-deterministic given the seed"
    );
    assert_eq!(
        std::fs::read(r1.join("train_log.csv")).unwrap(),
        std::fs::read(r2.join("train_log.csv")).unwrap()
    );
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();

    // usage: unknown flag
    let out = run(&["gen-data", "--task", "niah", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    // usage: malformed soup JSON
    let out = run(&[
        "soup", "--cache", dir.path().to_str().unwrap(), "--ids", "x",
        "--soup", "{not json", "--out", dir.path().join("o.state").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // data error: missing checkpoint file
    let out = run(&[
        "eval", "--ckpt", dir.path().join("none.ckpt").to_str().unwrap(),
        "--data", dir.path().join("none.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // fingerprint mismatch: state from one model, asked through another
    let data = dir.path().join("d.jsonl");
    assert_ok(&run(&[
        "gen-data", "--task", "niah", "--out", data.to_str().unwrap(),
        "--seed", "3", "--examples", "4", "--pairs", "4", "--segments", "2",
    ]));
    let cfg_a = write_train_config(dir.path());
    let cfg_b_path = dir.path().join("train_b.json");
    let cfg_b = std::fs::read_to_string(&cfg_a).unwrap().replace("\"seed\": 3", "\"seed\": 4");
    std::fs::write(&cfg_b_path, cfg_b).unwrap();
    let (ra, rb) = (dir.path().join("ra"), dir.path().join("rb"));
    assert_ok(&run(&["train", "--config", cfg_a.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", ra.to_str().unwrap()]));
    assert_ok(&run(&["train", "--config", cfg_b_path.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", rb.to_str().unwrap()]));
    let doc = dir.path().join("doc.txt");
    std::fs::write(&doc, "key k1 value v2").unwrap();
    let cache = dir.path().join("cache");
    let enc = run(&[
        "encode", "--ckpt", ra.join("model.ckpt").to_str().unwrap(),
        "--doc", doc.to_str().unwrap(), "--cache", cache.to_str().unwrap(),
    ]);
    assert_ok(&enc);
    let state = stdout(&enc);
    let out = run(&[
        "ask", "--ckpt", rb.join("model.ckpt").to_str().unwrap(),
        "--state", state.trim(), "--question", "what is the value of key k1",
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_emits_latency_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    assert_ok(&run(&[
        "gen-data", "--task", "niah", "--out", data.to_str().unwrap(),
        "--seed", "5", "--examples", "4", "--pairs", "4", "--segments", "2",
    ]));
    let cfg = write_train_config(dir.path());
    let run_dir = dir.path().join("run");
    assert_ok(&run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]));
    let out = run(&[
        "bench", "--ckpt", run_dir.join("model.ckpt").to_str().unwrap(),
        "--lengths", "16,32", "--trials", "2", "--query-len", "4",
    ]);
    assert_ok(&out);
    let csv = stdout(&out);
    assert!(csv.starts_with("doc_len,concat_ms,cached_ms,speedup\n"));
    assert_eq!(csv.lines().count(), 3);
}
