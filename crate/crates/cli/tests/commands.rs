use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthoproto"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn error_record(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("stderr has a JSON record");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

/// A small experiment so the commands finish in about a second.
const TINY: &str = r#"{
  "experiment": {
    "data": {"n_total_classes": 7, "raw_dim": 6, "samples_per_class": 40, "n_unknown_style": 2},
    "n_known": 4,
    "hidden_dims": [16],
    "feature_dim": 4,
    "train": {"epochs": 4, "batch_size": 32, "eval_every": 5}
  }
}"#;

fn tiny_run(dir: &Path, name: &str, seed: &str) -> Output {
    fs::write(dir.join("tiny.json"), TINY).unwrap();
    run(&["train", "--config", "tiny.json", "--seed", seed, "--out", name], dir)
}

#[test]
fn help_lists_flags_with_defaults() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["--help"], d.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["gen-data", "split", "train", "eval", "ablate", "gradcheck", "score"] {
        assert!(text.contains(c), "{c} missing");
    }
    let o = run(&["eval", "--help"], d.path());
    let text = String::from_utf8_lossy(&o.stdout);
    for f in ["--seed", "--out", "--config", "--checkpoint", "--dataset", "--split", "--threshold"] {
        assert!(text.contains(f), "{f} missing");
    }
    assert!(text.contains("default"));
}

#[test]
fn usage_errors_exit_one_with_json() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["train", "--no-such-flag"], d.path());
    assert_eq!(code(&o), 1);
    assert_eq!(error_record(&o)["error"]["exit_code"], 1);

    fs::write(d.path().join("bad.json"), r#"{"experiment": {"nonsense": 1}}"#).unwrap();
    let o = run(&["train", "--config", "bad.json"], d.path());
    assert_eq!(code(&o), 1);
    assert_eq!(error_record(&o)["error"]["kind"], "config");

    let o = run(&["ablate", "--suite", "table9"], d.path());
    assert_eq!(code(&o), 1);
    let o = run(&["eval", "--dataset", "x.csv"], d.path());
    assert_eq!(code(&o), 1, "missing --checkpoint");
}

#[test]
fn data_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("broken.csv"), "label,f1,f2\n0,1.0\n").unwrap();
    let o = run(&["split", "--dataset", "broken.csv"], d.path());
    assert_eq!(code(&o), 2);
    let rec = error_record(&o);
    assert_eq!(rec["error"]["kind"], "parse");
    assert!(rec["error"]["message"].as_str().unwrap().contains("broken.csv:2:"));

    let o = run(&["split", "--dataset", "missing.csv"], d.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn numeric_failure_exits_three() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("hot.json"),
        r#"{"experiment": {"data": {"n_total_classes": 6, "raw_dim": 4, "samples_per_class": 20, "n_unknown_style": 2, "cluster_spread": 1e150},
            "n_known": 3, "hidden_dims": [4], "feature_dim": 3, "train": {"epochs": 1, "batch_size": 16, "learning_rate": 1e10}}}"#,
    )
    .unwrap();
    let o = run(&["train", "--config", "hot.json"], d.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_record(&o)["error"]["kind"], "numeric");
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--seed", "7"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.contains("max_rel_err")).count(), 8);
}

#[test]
fn run_directory_layout_and_replay() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let o = tiny_run(p, "a", "3");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "split.json", "steps.log", "model.ckpt", "metrics.json", "dataset.csv", "dataset.meta.json"] {
        assert!(p.join("a").join(f).exists(), "{f}");
    }
    let snaps = fs::read_dir(p.join("a/snapshots")).unwrap().count();
    assert!(snaps >= 2, "periodic and final snapshots, got {snaps}");
    let steps = fs::read_to_string(p.join("a/steps.log")).unwrap();
    let first: serde_json::Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert!(first["total"].is_f64());

    // The echoed config alone reproduces the run.
    let o = run(&["train", "--config", "a/config.json", "--out", "b"], p);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(p.join("a/model.ckpt")).unwrap(), fs::read(p.join("b/model.ckpt")).unwrap());
    assert_eq!(fs::read(p.join("a/metrics.json")).unwrap(), fs::read(p.join("b/metrics.json")).unwrap());

    let o = tiny_run(p, "c", "4");
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(p.join("a/model.ckpt")).unwrap(), fs::read(p.join("c/model.ckpt")).unwrap());
}

#[test]
fn eval_is_repeatable_and_writes_plot_data() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&tiny_run(p, "r", "1")), 0);
    let args = |out: &'static str| {
        vec![
            "eval", "--checkpoint", "r/model.ckpt", "--dataset", "r/dataset.csv", "--split", "r/split.json",
            "--threshold", "0.5", "--out", out,
        ]
    };
    assert_eq!(code(&run(&args("e1"), p)), 0);
    assert_eq!(code(&run(&args("e2"), p)), 0);
    for f in ["metrics.json", "curve.csv", "histogram.csv", "confusion.csv", "scores.csv", "decisions.csv"] {
        assert_eq!(fs::read(p.join("e1").join(f)).unwrap(), fs::read(p.join("e2").join(f)).unwrap(), "{f}");
    }
    // Train's test metrics use the same rule and populations.
    assert_eq!(fs::read(p.join("e1/metrics.json")).unwrap(), fs::read(p.join("r/metrics.json")).unwrap());
    let curve = fs::read_to_string(p.join("e1/curve.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "threshold,fpr,ccr");
    let hist = fs::read_to_string(p.join("e1/histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 51);

    let o = run(&["eval", "--checkpoint", "r/model.ckpt", "--dataset", "r/dataset.csv", "--split", "r/split.json", "--rule", "nope"], p);
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_data_split_and_score_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&run(&["gen-data", "--seed", "5", "--out", "g"], p)), 0);
    let o = run(&["split", "--dataset", "g/dataset.csv", "--seed", "5", "--out", "s"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("s/split.json")).unwrap()).unwrap();
    assert_eq!(split["known_class_ids"].as_array().unwrap().len(), 8);
    assert_eq!(split["unknown_class_ids"].as_array().unwrap().len(), 4);

    assert_eq!(code(&tiny_run(p, "t", "2")), 0);
    let o = run(
        &["score", "--checkpoint", "t/model.ckpt", "--dataset", "t/dataset.csv", "--split", "t/split.json", "--threshold", "0", "--out", "sc"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let scores = fs::read_to_string(p.join("sc/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 7 * 40 + 1);
    assert!(scores.starts_with("sample_id,true_label,is_known,c_max,k_star,c_0,c_1,c_2,c_3\n"));
    assert!(p.join("sc/decisions.csv").exists());

    // A checkpoint for another input width is rejected as a data error.
    let o = run(&["score", "--checkpoint", "t/model.ckpt", "--dataset", "g/dataset.csv", "--out", "x"], p);
    assert_eq!(code(&o), 2);
}

#[test]
fn signal_csv_is_windowed() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let mut csv = String::from("subject,trial,label,t,ch1,ch2\n");
    for label in 0..6 {
        for trial in 0..2 {
            for t in 0..20 {
                csv += &format!("1,{trial},{label},{t},{}.5,{}\n", label + t, t % 3);
            }
        }
    }
    fs::write(p.join("sig.csv"), csv).unwrap();
    let o = run(&["split", "--dataset", "sig.csv", "--n-known", "3", "--window", "8", "--stride", "4", "--out", "s"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("s/split.json")).unwrap()).unwrap();
    let n: usize = ["train_known", "test_known", "train_background", "test_unknown"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .sum();
    // (20 - 8) / 4 + 1 = 4 windows per recording, 12 recordings
    assert_eq!(n, 48);
}

#[test]
fn ablate_writes_six_rows() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(
        p.join("ab.json"),
        r#"{"experiment": {"data": {"n_total_classes": 7, "raw_dim": 5, "samples_per_class": 20, "n_unknown_style": 2},
            "n_known": 4, "hidden_dims": [8], "feature_dim": 4, "train": {"epochs": 1, "batch_size": 16}}}"#,
    )
    .unwrap();
    let o = run(&["ablate", "--suite", "table3", "--seeds", "2", "--config", "ab.json", "--out", "ab"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("row,name,auroc_mean,auroc_std,oscr_mean,oscr_std,acc_mean,acc_std"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",2,0")));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 12);
}
