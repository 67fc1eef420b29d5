use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_conftree");
const SUBCOMMANDS: [&str; 9] = [
    "synth",
    "ingest",
    "annotate",
    "train",
    "embed",
    "attention",
    "eval",
    "gradcheck",
    "config",
];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/ingest")
}

fn conftree(args: &[&str]) -> Output {
    conftree_env(args, &[])
}

fn conftree_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .env_remove("CONFTREE_CONFIG")
        .env_remove("ANNOTATE_LLM_URL");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failed(out: Output) -> String {
    assert!(
        !out.status.success(),
        "unexpected success: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Small model settings so training runs in well under a second.
const TINY: [&str; 10] = [
    "--set",
    "node.d_model=8",
    "--set",
    "d_embed=8",
    "--set",
    "node.heads=2",
    "--set",
    "conf.heads=2",
    "--set",
    "conf.max_nodes=16",
];

#[test]
fn synth_writes_conferences_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(conftree(&["synth", "--n", "8", "--seed", "7", "--out", s(&corpus)]));
    let files = snapshot(&corpus);
    let conferences = files
        .keys()
        .filter(|p| s(p).starts_with("synth-") && s(p).ends_with(".json"))
        .count();
    assert_eq!(conferences, 8);
    assert!(files.contains_key(Path::new("manifest.json")));
    assert!(files.contains_key(Path::new("effective-config.txt")));

    let again = dir.path().join("again");
    ok(conftree(&["synth", "--n", "8", "--seed", "7", "--out", s(&again)]));
    assert_eq!(snapshot(&again), files);
}

#[test]
fn help_documents_every_flag_and_default() {
    for sub in SUBCOMMANDS {
        let help = ok(conftree(&[sub, "--help"]));
        let mut blocks: Vec<String> = Vec::new();
        for line in help.lines() {
            let t = line.trim_start();
            if t.starts_with('-') || t.starts_with('<') {
                blocks.push(t.to_string());
            } else if let Some(last) = blocks.last_mut() {
                if line.starts_with("  ") {
                    last.push(' ');
                    last.push_str(t);
                }
            }
        }
        for b in &blocks {
            if b.starts_with("-h, --help") || b.starts_with("-V, --version") {
                continue;
            }
            assert!(
                b.contains("[default") || b.contains("[required"),
                "{sub}: undocumented default in `{b}`"
            );
        }
    }
    let top = ok(conftree(&["--help"]));
    for sub in SUBCOMMANDS {
        assert!(top.contains(sub), "{sub} missing from top-level help");
    }
}

#[test]
fn config_precedence_flag_env_file_default() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("settings.txt");
    fs::write(&config, "synth.conferences = 5\nsynth.seed = 1\nsynth.pairs = 3-3\n").unwrap();
    let out = dir.path().join("c");
    let env = [("CONFTREE_CONFIG", s(&config)), ("CONFTREE_SYNTH_SEED", "3")];
    ok(conftree_env(&["synth", "--n", "4", "--out", s(&out)], &env));
    let echo = fs::read_to_string(out.join("effective-config.txt")).unwrap();
    assert!(echo.contains("synth.conferences = 4  # flag"), "{echo}");
    assert!(echo.contains("synth.seed = 3  # env CONFTREE_SYNTH_SEED"), "{echo}");
    assert!(
        echo.contains("synth.pairs = 3-3  # ") && echo.contains("settings.txt:3"),
        "{echo}"
    );
    assert!(echo.contains("synth.monologues = 2-4  # default"), "{echo}");
    assert_eq!(snapshot(&out).len(), 4 + 2);

    let listed = ok(conftree_env(&["config", "--config", s(&config)], &[]));
    assert!(listed.contains("synth.seed = 1  # "), "{listed}");
}

#[test]
fn gradcheck_reports_max_relative_error() {
    let stdout = ok(conftree(&["gradcheck"]));
    let line = stdout
        .lines()
        .find(|l| l.starts_with("max relative error:"))
        .expect(&stdout);
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value < 1e-5, "{line}");
}

fn tiny_run(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus");
    ok(conftree(&["synth", "--n", "4", "--seed", "2", "--out", s(&corpus)]));
    let run = dir.join("run");
    let mut args = vec![
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&run),
        "--epochs",
        "2",
        "--batch-size",
        "2",
    ];
    args.extend(TINY);
    ok(conftree(&args));
    (corpus, run)
}

#[test]
fn train_embed_eval_are_idempotent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (corpus, run_a) = tiny_run(a.path());
    let (_, run_b) = tiny_run(b.path());
    assert_eq!(snapshot(&run_a), snapshot(&run_b));
    let loss = fs::read_to_string(run_a.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,step,node_loss,conf_loss,total\n"));

    let ckpt = run_a.join("checkpoint.ckpt");
    let mut outputs = Vec::new();
    for tag in ["x", "y"] {
        let emb = a.path().join(format!("emb-{tag}"));
        ok(conftree(&[
            "embed",
            "--checkpoint",
            s(&ckpt),
            s(&corpus),
            "--out",
            s(&emb),
        ]));
        let ev = a.path().join(format!("eval-{tag}"));
        ok(conftree(&[
            "eval",
            "--embeddings",
            s(&emb.join("embeddings.json")),
            "--out",
            s(&ev),
        ]));
        let att = a.path().join(format!("att-{tag}"));
        ok(conftree(&[
            "attention",
            "--checkpoint",
            s(&ckpt),
            s(&corpus),
            "--out",
            s(&att),
        ]));
        outputs.push((snapshot(&emb), snapshot(&ev), snapshot(&att)));
    }
    assert_eq!(outputs[0], outputs[1]);
    let (emb, ev, att) = &outputs[0];
    let json: serde_json::Value = serde_json::from_slice(&emb[Path::new("embeddings.json")]).unwrap();
    assert_eq!(json["d_embed"], 8);
    assert_eq!(json["conferences"].as_array().unwrap().len(), 4);
    let metrics: serde_json::Value = serde_json::from_slice(&ev[Path::new("metrics.json")]).unwrap();
    assert!(metrics["conference"]["retrieval@1"].is_number());
    assert!(String::from_utf8_lossy(&ev[Path::new("projection.csv")]).starts_with("id,x,y\n"));
    assert_eq!(att.len(), 4 + 1);
}

#[test]
fn resume_continues_to_requested_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, run) = tiny_run(dir.path());
    let first = run.join("checkpoints/epoch-0001.ckpt");
    let resumed = dir.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    let args = [
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&resumed),
        "--resume",
        s(&first),
        "--epochs",
        "2",
    ];
    ok(conftree(&args));
    assert_eq!(
        fs::read(resumed.join("checkpoint.ckpt")).unwrap(),
        fs::read(run.join("checkpoint.ckpt")).unwrap()
    );

    let err = failed(conftree(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&resumed),
        "--resume",
        s(&first),
        "--seed",
        "5",
    ]));
    assert!(err.starts_with("error: train: ") && err.contains("seed = 5"), "{err}");
}

#[test]
fn embed_with_mismatched_d_embed_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, run) = tiny_run(dir.path());
    let ckpt = run.join("checkpoint.ckpt");
    let out = dir.path().join("emb");
    let err = failed(conftree(&[
        "embed",
        "--checkpoint",
        s(&ckpt),
        s(&corpus),
        "--out",
        s(&out),
        "--d-embed",
        "64",
    ]));
    assert!(
        err.starts_with("error: embed: ") && err.contains("d_embed = 64") && err.contains("has 8"),
        "{err}"
    );
    assert!(!out.join("embeddings.json").exists());
}

#[test]
fn ingest_and_annotate_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let inputs = ["alternating", "merged_answers", "unanswered", "procedural_turns"]
        .map(|n| f.join(format!("{n}.transcript.json")));
    let mut snaps = Vec::new();
    for tag in ["a", "b"] {
        let trees = dir.path().join(format!("trees-{tag}"));
        let mut args = vec!["ingest", "--out", s(&trees)];
        args.extend(inputs.iter().map(|p| s(p)));
        ok(conftree(&args));
        let ann = dir.path().join(format!("ann-{tag}"));
        ok(conftree(&[
            "annotate",
            s(&trees),
            "--out",
            s(&ann),
            "--backend",
            "rule",
            "--backend",
            "noisy:0.3",
            "--runs",
            "3",
        ]));
        snaps.push((snapshot(&trees), snapshot(&ann)));
    }
    assert_eq!(snaps[0], snaps[1]);
    for name in ["alternating", "merged_answers", "unanswered", "procedural_turns"] {
        let golden = fs::read(f.join(format!("{name}.tree.json"))).unwrap();
        assert_eq!(snaps[0].0[&PathBuf::from(format!("{name}.json"))], golden, "{name}");
    }
    let report: serde_json::Value = serde_json::from_slice(&snaps[0].1[Path::new("alternating.report.json")]).unwrap();
    assert_eq!(report["backends"], serde_json::json!(["rule", "noisy:0.3"]));
}

#[test]
fn recorded_labels_drive_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let out = dir.path().join("t");
    let transcript = f.join("orphan_answer.transcript.json");
    let labels = f.join("orphan_answer.kinds.json");
    ok(conftree(&[
        "ingest",
        s(&transcript),
        "--labels",
        s(&labels),
        "--out",
        s(&out),
    ]));
    assert_eq!(
        fs::read(out.join("orphan_answer.json")).unwrap(),
        fs::read(f.join("orphan_answer.tree.json")).unwrap()
    );
    let two = f.join("alternating.transcript.json");
    let err = failed(conftree(&[
        "ingest",
        s(&transcript),
        s(&two),
        "--labels",
        s(&labels),
        "--out",
        s(&out),
    ]));
    assert!(err.contains("exactly one"), "{err}");
}

#[test]
fn schema_violations_name_file_and_json_path() {
    let dir = tempfile::tempdir().unwrap();
    let golden = fs::read_to_string(fixtures().join("alternating.tree.json")).unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        golden.replacen("\"topic\": \"unknown\"", "\"topic\": \"gossip\"", 1),
    )
    .unwrap();
    assert_ne!(fs::read_to_string(&bad).unwrap(), golden);
    let err = failed(conftree(&["annotate", s(&bad), "--out", s(&dir.path().join("o"))]));
    assert!(
        err.starts_with("error: annotate: ") && err.contains("bad.json") && err.contains("nodes[0].metadata.topic"),
        "{err}"
    );

    let transcript = dir.path().join("t.json");
    fs::write(&transcript, r#"{"id": "x", "interventions": [{"speaker": "A", "section": "qa", "start_s": 0, "end_s": "late", "sentences": []}]}"#).unwrap();
    let err = failed(conftree(&["ingest", s(&transcript), "--out", s(&dir.path().join("o"))]));
    assert!(
        err.starts_with("error: ingest: ") && err.contains("t.json") && err.contains("interventions[0].end_s"),
        "{err}"
    );
}

#[test]
fn usage_and_missing_file_errors() {
    let out = conftree(&["train", "--corpus", "x", "--out", "y", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = failed(conftree(&[
        "eval",
        "--embeddings",
        "/nonexistent/embeddings.json",
        "--out",
        "/tmp/unused",
    ]));
    assert!(
        err.starts_with("error: eval: reading /nonexistent/embeddings.json"),
        "{err}"
    );
    let err = failed(conftree(&["synth", "--out", "x", "--set", "bogus=1"]));
    assert!(err.contains("unknown config key 'bogus'"), "{err}");
    let err = failed(conftree(&["annotate", "nowhere", "--out", "x", "--backend", "oracle"]));
    assert!(err.contains("unknown backend 'oracle'"), "{err}");
}
