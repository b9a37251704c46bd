use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infoground"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn gen_small(dir: &Path) {
    let d = dir.to_str().unwrap();
    json(&run(&[
        "gen-data", "--out", d, "--num-images", "30", "--num-val-images", "10", "--d-r", "8", "--d-w", "8",
    ]));
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir);
    for f in ["train.manifest.json", "train.igfb", "val.manifest.json", "oracle.jsonl", "lm.json", "synth_config.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let p = |f: &str| dir.join(f).to_str().unwrap().to_string();

    let neg = json(&run(&[
        "make-negatives", "--data", &p("train.manifest.json"), "--lm", &p("lm.json"), "--out", &p("neg.jsonl"),
    ]));
    assert!(neg["sets"].as_u64().unwrap() > 0);

    let run_dir = p("run");
    let trained = json(&run(&[
        "train", "--train", &p("train.manifest.json"), "--val", &p("val.manifest.json"),
        "--negatives-file", &p("neg.jsonl"), "--out", &run_dir, "--batch-size", "10", "--max-epochs", "2",
        "--eval-every", "2", "--learning-rate", "1e-3", "--norm", "affine", "--d", "4", "--patience", "none",
    ]));
    assert_eq!(trained["steps"], 6);
    let runlog = std::fs::read_to_string(dir.join("run/runlog.csv")).unwrap();
    assert_eq!(runlog.lines().count(), 4);
    let steps = std::fs::read_to_string(dir.join("run/steps.csv")).unwrap();
    assert!(steps.starts_with("step,l_img,l_lang,total,mi_bound_per_word,wall_ms\n"));
    assert_eq!(steps.lines().count(), 7);

    let csv = p("eval.csv");
    let report = json(&run(&[
        "eval", "--checkpoint", &p("run/best.igck"), "--data", &p("val.manifest.json"), "--csv", &csv, "--epoch", "2",
    ]));
    let acc = report["pointing_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("epoch,recall@1,recall@5,recall@10,pointing_accuracy\n2,"));

    let dump = run(&[
        "dump-attention", "--checkpoint", &p("run/best.igck"), "--data", &p("val.manifest.json"), "--index", "1",
        "--tokens", "1,3",
    ]);
    assert!(dump.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(dump.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2 * 8);
    for w in lines.windows(2) {
        assert!(w[0]["weight"].as_f64() >= w[1]["weight"].as_f64());
    }
    assert!(lines.iter().all(|l| l.get("box").is_some() && l.get("image_id").is_some()));
}

#[test]
fn train_refuses_missing_cache() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path());
    let p = |f: &str| tmp.path().join(f).to_str().unwrap().to_string();
    let out = run(&[
        "train", "--train", &p("train.manifest.json"), "--val", &p("val.manifest.json"), "--out", &p("run"),
        "--max-epochs", "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    // an empty cache with the override trains with image loss only
    std::fs::write(tmp.path().join("empty.jsonl"), "").unwrap();
    let out = run(&[
        "train", "--train", &p("train.manifest.json"), "--val", &p("val.manifest.json"), "--out", &p("run"),
        "--negatives-file", &p("empty.jsonl"), "--max-epochs", "1", "--batch-size", "10", "--eval-every", "1",
        "--allow-missing-negatives",
    ]);
    json(&out);
}

#[test]
fn train_config_file_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path());
    let p = |f: &str| tmp.path().join(f).to_str().unwrap().to_string();
    std::fs::write(
        tmp.path().join("cfg.json"),
        r#"{"batch_size": 10, "max_epochs": 5, "use_lang": false, "norm": "affine", "eval_every": 3}"#,
    )
    .unwrap();
    let out = json(&run(&[
        "train", "--train", &p("train.manifest.json"), "--val", &p("val.manifest.json"), "--out", &p("run"),
        "--config", &p("cfg.json"), "--max-epochs", "1",
    ]));
    assert_eq!(out["steps"], 3);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/train_config.json")).unwrap()).unwrap();
    assert_eq!(saved["max_epochs"], 1);
    assert_eq!(saved["batch_size"], 10);

    std::fs::write(tmp.path().join("bad.json"), r#"{"batch_sise": 10}"#).unwrap();
    let out = run(&[
        "train", "--train", &p("train.manifest.json"), "--val", &p("val.manifest.json"), "--out", &p("run"),
        "--config", &p("bad.json"),
    ]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn untrained_eval_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    json(&run(&["gen-data", "--out", d, "--num-images", "20", "--num-val-images", "100"]));
    let p = |f: &str| tmp.path().join(f).to_str().unwrap().to_string();
    // zero epochs saves nothing, so train one step at learning rate 0
    json(&run(&[
        "train", "--train", &p("train.manifest.json"), "--val", &p("val.manifest.json"), "--out", &p("run"),
        "--use-lang", "false", "--learning-rate", "0", "--max-epochs", "1", "--batch-size", "20", "--eval-every", "1",
        "--norm", "affine",
    ]));
    let report = json(&run(&["eval", "--checkpoint", &p("run/best.igck"), "--data", &p("val.manifest.json")]));
    let n = report["phrases"].as_f64().unwrap();
    let acc = report["pointing_accuracy"].as_f64().unwrap();
    let sigma = (0.125 * 0.875 / n).sqrt();
    assert!((acc - 0.125).abs() <= 3.0 * sigma, "accuracy {acc} over {n} phrases");
}

#[test]
fn check_grad_passes() {
    let v = json(&run(&["check-grad", "--seed", "7", "--instances", "3"]));
    assert_eq!(v["pass"], true);
    assert!(v["report"]["max_relative_error"].as_f64().unwrap() <= 1e-5);
}

#[test]
fn mi_demo_presets_and_files() {
    let v = json(&run(&["mi-demo", "--joint", "independent", "--batches", "2000"]));
    assert_eq!(v["exact_mi"].as_f64().unwrap(), 0.0);
    assert!(v["mean_bound"].as_f64().unwrap() <= 3.0 * v["std_err"].as_f64().unwrap());

    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("joint.json");
    std::fs::write(&f, "[[0.5, 0.0], [0.0, 0.5]]").unwrap();
    let v = json(&run(&["mi-demo", "--joint", f.to_str().unwrap(), "--critic", "ratio", "--batches", "500", "--k", "8"]));
    assert!((v["exact_mi"].as_f64().unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!(v["mean_bound"].as_f64().unwrap() <= 8f64.ln() + 1e-12);

    std::fs::write(&f, "[[0.5, 0.6]]").unwrap();
    assert_eq!(run(&["mi-demo", "--joint", f.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let out = run(&["eval", "--checkpoint", "/nonexistent/model.igck", "--data", "/nonexistent/m.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent"));
    assert_eq!(run(&["mi-demo", "--joint", "nowhere"]).status.code(), Some(2));
}
