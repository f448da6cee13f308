//! End-to-end tests of the `aligncap` binary: exit codes, JSON stdout, and
//! byte-level determinism of both output and training artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aligncap::synth::{caption_vocab, make_synthetic_dataset, tag_vocabulary};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aligncap"));
    c.env_remove("ALIGNCAP_LOG").env_remove("ALIGNCAP_TEST_CORRUPT_GRAD");
    c
}

fn tmp(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn shipped_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn write_detections(dir: &Path) -> PathBuf {
    let mut dets = Vec::new();
    for (class, n, x) in [("person", 4, 0.1), ("dog", 3, 0.4), ("mouse", 2, 0.7)] {
        for i in 0..n {
            let y = 0.1 + 0.05 * i as f64;
            dets.push(serde_json::json!({
                "class": class,
                "bbox": [x, y, x + 0.2, y + 0.3],
                "score": 0.9,
            }));
        }
    }
    let path = dir.join("detections.json");
    std::fs::write(&path, serde_json::to_string(&dets).unwrap()).unwrap();
    path
}

const TARGET: &str = "0.2,0.2,0.5,0.5";

#[test]
fn god_ranks_the_worked_example_and_emits_j_views() {
    let dir = tmp("god-sample");
    let dets = write_detections(&dir);
    let run = || {
        bin()
            .args(["god", "--detections"])
            .arg(&dets)
            .args(["--target", TARGET, "--k", "1", "--j", "4", "--seed", "7"])
            .output()
            .unwrap()
    };
    let out = run();
    let v = stdout_json(&out);
    assert_eq!(v["classes"], serde_json::json!(["person"]));
    let views = v["views"].as_array().unwrap();
    assert_eq!(views.len(), 4);
    assert_eq!(views[0]["is_target"], true);
    assert!(views[1..].iter().all(|w| w["is_target"] == false));
    assert_eq!(out.stdout, run().stdout);
}

#[test]
fn god_inference_selects_one_view_under_both_modes() {
    let dir = tmp("god-inference");
    let dets = write_detections(&dir);
    for mode in ["feature-cosine", "one-minus-iou"] {
        let run = || {
            bin()
                .args(["god", "--detections"])
                .arg(&dets)
                .args(["--target", TARGET, "--k", "2", "--j", "3"])
                .args(["--select", "inference", "--mode", mode, "--seed", "3"])
                .output()
                .unwrap()
        };
        let out = run();
        let v = stdout_json(&out);
        assert!(v["selected"]["bbox"].as_array().unwrap().len() == 4, "mode {mode}");
        assert!(v.get("views").is_none());
        assert_eq!(out.stdout, run().stdout, "mode {mode}");
    }
}

#[test]
fn god_classifies_input_failures() {
    let dir = tmp("god-errors");
    let dets = write_detections(&dir);

    let bad_file = dir.join("bad.json");
    std::fs::write(&bad_file, r#"[{"class": "x", "bbox": [0.1, 0.1], "score": 0.5}]"#).unwrap();
    let out = bin()
        .args(["god", "--detections"])
        .arg(&bad_file)
        .args(["--target", TARGET, "--k", "1", "--j", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    // parses as four floats but is not a box: validation, not usage
    let out = bin()
        .args(["god", "--detections"])
        .arg(&dets)
        .args(["--target", "0.5,0.5,0.2,0.8", "--k", "1", "--j", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin()
        .args(["god", "--detections"])
        .arg(&dets)
        .args(["--target", TARGET, "--k", "1", "--j", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "j < 2 is a usage error");

    let out = bin()
        .args(["god", "--detections"])
        .arg(dir.join("missing.json"))
        .args(["--target", TARGET, "--k", "1", "--j", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["god", "--bogus-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes_and_module_flag_filters_groups() {
    let out =
        bin().args(["grad-check", "--config"]).arg(shipped_config("grad_check.toml")).output().unwrap();
    let v = stdout_json(&out);
    assert_eq!(v["pass"], true);
    assert_eq!(v["tolerance"], 1e-4);
    let modules: std::collections::BTreeSet<&str> =
        v["groups"].as_array().unwrap().iter().map(|g| g["module"].as_str().unwrap()).collect();
    for m in ["spatial-awareness", "latent-refinement", "semantic-alignment", "losses-training"] {
        assert!(modules.contains(m), "missing {m}");
    }
    assert!(v["groups"].as_array().unwrap().iter().all(|g| g["rel_err"].as_f64().unwrap() <= 1e-4));

    let out = bin()
        .args(["grad-check", "--config"])
        .arg(shipped_config("grad_check.toml"))
        .args(["--module", "semantic-alignment"])
        .output()
        .unwrap();
    let v = stdout_json(&out);
    let groups = v["groups"].as_array().unwrap();
    assert!(!groups.is_empty());
    assert!(groups.iter().all(|g| g["module"] == "semantic-alignment"));

    let out = bin()
        .args(["grad-check", "--config"])
        .arg(shipped_config("grad_check.toml"))
        .args(["--module", "nonsense"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_detects_a_corrupted_gradient() {
    let out = bin()
        .args(["grad-check", "--config"])
        .arg(shipped_config("grad_check.toml"))
        .env("ALIGNCAP_TEST_CORRUPT_GRAD", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], false);
    assert!(v["worst"]["rel_err"].as_f64().unwrap() > 1e-4);
}

#[test]
fn train_runs_are_byte_identical() {
    let dir = tmp("train-determinism");
    for run in ["a", "b"] {
        let out = bin()
            .args(["train", "--config"])
            .arg(shipped_config("smoke.toml"))
            .arg("--out")
            .arg(dir.join(run))
            .output()
            .unwrap();
        let v = stdout_json(&out);
        assert!(v["final_total"].as_f64().unwrap().is_finite());
    }
    for artifact in ["metrics.jsonl", "checkpoint.json", "checkpoint.bin", "data.json"] {
        let a = std::fs::read(dir.join("a").join(artifact)).unwrap();
        let b = std::fs::read(dir.join("b").join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
    }
}

#[test]
fn eval_matches_the_final_train_record_and_rejects_bad_data() {
    let dir = tmp("train-eval");
    let out = bin()
        .args(["train", "--config"])
        .arg(shipped_config("smoke.toml"))
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success());

    let metrics = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let last: serde_json::Value =
        serde_json::from_str(metrics.lines().last().unwrap()).unwrap();

    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.join("checkpoint.json"))
        .arg("--data")
        .arg(dir.join("data.json"))
        .output()
        .unwrap();
    let v = stdout_json(&out);
    let diff = (v["total"].as_f64().unwrap() - last["total"].as_f64().unwrap()).abs();
    assert!(diff <= 1e-9, "eval total drifted from final train record by {diff}");

    let empty = dir.join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.join("checkpoint.json"))
        .arg("--data")
        .arg(&empty)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "empty dataset is a usage error");

    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.join("no-such-checkpoint.json"))
        .arg("--data")
        .arg(dir.join("data.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_incompatible_dims_between_checkpoint_and_data() {
    let dir = tmp("eval-mismatch");
    let base = std::fs::read_to_string(shipped_config("smoke.toml")).unwrap();
    let widened = base.replace("g = 4", "g = 8");
    assert_ne!(base, widened);
    let other_cfg = dir.join("widened.toml");
    std::fs::write(&other_cfg, widened).unwrap();

    for (cfg, out_dir) in [(shipped_config("smoke.toml"), "base"), (other_cfg.clone(), "wide")] {
        let out = bin()
            .args(["train", "--config"])
            .arg(cfg)
            .arg("--out")
            .arg(dir.join(out_dir))
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.join("base/checkpoint.json"))
        .arg("--data")
        .arg(dir.join("wide/data.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));
}

#[test]
fn demo_caption_emits_vocabulary_words_and_known_tags() {
    let dir = tmp("demo-caption");
    let out = bin()
        .args(["train", "--config"])
        .arg(shipped_config("smoke.toml"))
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success());

    let config = aligncap::config::TrainingConfig::from_file(&shipped_config("smoke.toml")).unwrap();
    let example = make_synthetic_dataset(config.seed, 1, &config.dims).unwrap().remove(0);
    let scene_path = dir.join("scene.json");
    std::fs::write(&scene_path, serde_json::to_string(&example.scene).unwrap()).unwrap();
    let t = example.target;
    let target = format!("{},{},{},{}", t.x0, t.y0, t.x1, t.y1);

    let run = || {
        bin()
            .args(["demo-caption", "--checkpoint"])
            .arg(dir.join("checkpoint.json"))
            .arg("--scene")
            .arg(&scene_path)
            .args(["--target", &target, "--seed", "9"])
            .output()
            .unwrap()
    };
    let out = run();
    let v = stdout_json(&out);

    let vocab = caption_vocab();
    let words: Vec<&str> = v["caption"].as_str().unwrap().split_whitespace().collect();
    assert!(words.len() <= 20);
    for w in &words {
        let reserved = ["<unk>", "<bos>", "<eos>"].contains(w);
        assert!(vocab.id(w).is_some() || reserved, "`{w}` is not a decoder token");
    }

    let tag_names = tag_vocabulary();
    let tags = v["tags"].as_array().unwrap();
    assert_eq!(tags.len(), 5);
    for tag in tags {
        let name = tag["tag"].as_str().unwrap();
        assert!(tag_names.tags.iter().any(|t| t == name), "unknown tag `{name}`");
        let p = tag["p"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    assert_eq!(out.stdout, run().stdout);
}

#[test]
fn log_level_changes_stderr_but_never_stdout() {
    let dir = tmp("logging");
    let dets = write_detections(&dir);
    let run = |level: Option<&str>| {
        let mut c = bin();
        c.args(["god", "--detections"])
            .arg(&dets)
            .args(["--target", TARGET, "--k", "1", "--j", "2", "--seed", "1"]);
        if let Some(level) = level {
            c.env("ALIGNCAP_LOG", level);
        }
        c.output().unwrap()
    };
    let quiet = run(None);
    let chatty = run(Some("info"));
    assert!(quiet.status.success() && chatty.status.success());
    assert!(quiet.stderr.is_empty());
    assert!(String::from_utf8_lossy(&chatty.stderr).contains("detections"));
    assert_eq!(quiet.stdout, chatty.stdout);
}
