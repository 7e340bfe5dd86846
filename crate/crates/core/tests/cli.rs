use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SYNTH: &str = "num_ids = 8\ncams_per_id = 2\nimages_per_id_cam = 3\ngrid_h = 4\ngrid_w = 2\ndim = 8\nproj_dim = 4\ndistractor_ids = 2\n";
const RUN: &str = "num_anchors = 3\ndomain_anchors = 1\ndomain_hidden = 4\ntext_width = 8\ntext_layers = 1\ntext_heads = 2\nn_blocks = 1\nheads = 2\nffn_ratio = 2\nepochs = 2\nids_per_batch = 2\nimages_per_id = 2\ncoverages = [0.0, 0.5]\nocclusion_seeds = [0]\ncmc_ranks = 5\n";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchor-reid")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates a tiny corpus and trains a checkpoint in `dir`.
fn fixture(dir: &Path, extra: &[&str]) -> (String, String) {
    fs::write(dir.join("synth.toml"), SYNTH).unwrap();
    fs::write(dir.join("run.toml"), RUN).unwrap();
    let corpus = dir.join("c.sfc");
    let ckpt = dir.join("m.ckpt");
    let out = cli(&[&["gen-synth", "--config", p(&dir.join("synth.toml")), "--out", p(&corpus)], extra].concat());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let out = cli(&[
        &["train", "--corpus", p(&corpus), "--config", p(&dir.join("run.toml")), "--out", p(&ckpt)],
        extra,
    ]
    .concat());
    assert!(out.status.success(), "{}", text(&out.stderr));
    (p(&corpus).to_string(), p(&ckpt).to_string())
}

#[test]
fn flops_prints_constant() {
    let out = cli(&["flops", "--n", "128", "--anchors", "27", "--dim", "768"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout).trim(), "5308416");
}

#[test]
fn usage_errors_exit_two_with_help() {
    let out = cli(&["flops", "--n", "1", "--anchors", "1", "--dim", "1", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("Usage"));
    assert_eq!(cli(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(cli(&["flops", "--n", "x", "--anchors", "1", "--dim", "1"]).status.code(), Some(2));
}

#[test]
fn gradcheck_module_runs() {
    let out = cli(&["gradcheck", "--module", "objective"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("triplet_batch_hard"));
    assert_eq!(cli(&["gradcheck", "--module", "nope"]).status.code(), Some(1));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ckpt) = fixture(dir.path(), &[]);
    assert!(dir.path().join("c.pool.sfc").exists());
    assert!(dir.path().join("c.meta.json").exists());
    assert!(fs::read_to_string(dir.path().join("m.log.csv")).unwrap().starts_with("# tool_version="));

    let out = cli(&["validate", "--corpus", &corpus]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));

    let out = cli(&["eval", "--corpus", &corpus, "--checkpoint", &ckpt, "--wr", "0", "--wi", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("both fusion weights zero"));

    let out = cli(&["eval", "--corpus", &corpus, "--checkpoint", &ckpt, "--variant", "refined_only"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["num_anchors"], 3);
    assert!(v["tool_version"].is_string());
    assert!((0.0..=1.0).contains(&v["mAP"].as_f64().unwrap()));

    let pool = p(&dir.path().join("c.pool.sfc")).to_string();
    let out = cli(&[
        "sweep-occlusion", "--corpus", &corpus, "--checkpoint", &ckpt, "--kinds", "lower_half,distractor",
        "--distractors", &pool,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = text(&out.stdout);
    assert!(csv.lines().any(|l| l.starts_with("distractor,0.5,0,refined_only,")), "{csv}");

    let out = cli(&["sweep-fusion", "--corpus", &corpus, "--checkpoint", &ckpt, "--ratios", "0,1,inf"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("argmax_ratio"));

    let out = cli(&["export-attention", "--corpus", &corpus, "--checkpoint", &ckpt, "--image-index", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).lines().filter(|l| !l.starts_with('#')).count(), 1 + 8);

    let out = cli(&["export-attention", "--corpus", &corpus, "--checkpoint", &ckpt, "--image-index", "9999"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outputs_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, ka) = fixture(a.path(), &["--seed", "5"]);
    let (cb, kb) = fixture(b.path(), &["--seed", "5", "--threads", "3"]);
    assert_eq!(fs::read(&ca).unwrap(), fs::read(&cb).unwrap());
    assert_eq!(fs::read(&ka).unwrap(), fs::read(&kb).unwrap());
    for (threads, c, k) in [("1", &ca, &ka), ("4", &cb, &kb)] {
        let out = cli(&["--threads", threads, "eval", "--corpus", c, "--checkpoint", k, "--out", &format!("{k}.eval.json")]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        let out = cli(&[
            "--threads", threads, "sweep-occlusion", "--corpus", c, "--checkpoint", k, "--out", &format!("{k}.sweep.csv"),
        ]);
        assert!(out.status.success(), "{}", text(&out.stderr));
    }
    let strip = |s: String, dir: &Path| s.replace(p(dir), "DIR");
    for suffix in ["eval.json", "sweep.csv"] {
        let x = fs::read_to_string(format!("{ka}.{suffix}")).unwrap();
        let y = fs::read_to_string(format!("{kb}.{suffix}")).unwrap();
        assert_eq!(strip(x, a.path()), strip(y, b.path()), "{suffix}");
    }
}
