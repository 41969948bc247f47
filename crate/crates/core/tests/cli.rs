mod common;

use lateral::checkpoint::{load_model, Checkpoint, CheckpointKind};
use lateral::cli::dispatch;
use lateral::leafpipe::write_raw_corpus;
use lateral::seqcore::read_corpus;
use std::path::Path;

fn run(dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["lateral".to_owned()];
    argv.extend(
        args.iter()
            .map(|a| a.replace("{dir}", dir.to_str().unwrap())),
    );
    dispatch(argv)
}

const TINY: &str = r#"
d_model = 16
n_layers = 1
n_heads = 2
vocab_size = 32
patch_channels = 4
grid_height = 3
grid_width = 3
lora_rank = 2
lora_alpha = 4.0
conv_kernel = 2
conv_stride = 1
dropout_p = 0.0
adapter_variant = "lateral"
wrapped_layers = ["query", "key", "value", "output", "ffn_up", "ffn_down"]
max_seq_len = 64
loss_weight_mse = 1.0
seed = 3
"#;

#[test]
fn train_and_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        run(
            d,
            &[
                "synth",
                "--out",
                "{dir}/c.jsonl",
                "--instances",
                "6",
                "--sidecar"
            ]
        ),
        0
    );
    assert!(d.join("c.bin").exists());
    assert_eq!(read_corpus(&d.join("c.jsonl")).unwrap().len(), 6);

    let pre = [
        "pretrain",
        "--corpus",
        "{dir}/c.jsonl",
        "--out",
        "{dir}/base.ckpt",
        "--metrics",
        "{dir}/pre.csv",
        "--steps",
        "3",
    ];
    assert_eq!(run(d, &pre), 0);
    assert_eq!(
        Checkpoint::read(&d.join("base.ckpt")).unwrap().kind,
        CheckpointKind::Model
    );

    let ft = [
        "finetune",
        "--variant",
        "moe",
        "--base",
        "{dir}/base.ckpt",
        "--corpus",
        "{dir}/c.jsonl",
        "--out",
        "{dir}/ad.ckpt",
        "--metrics",
        "{dir}/ft.csv",
        "--steps",
        "3",
        "--lr",
        "1e-3",
    ];
    assert_eq!(run(d, &ft), 0);
    let metrics = std::fs::read_to_string(d.join("ft.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("step,ce_text,mse_image,total,lr,variant,seed")
    );
    assert_eq!(lines.count(), 3);
    assert_eq!(
        Checkpoint::read(&d.join("ad.ckpt")).unwrap().kind,
        CheckpointKind::Adapters
    );

    let gen = [
        "generate",
        "--base",
        "{dir}/base.ckpt",
        "--adapters",
        "{dir}/ad.ckpt",
        "--corpus",
        "{dir}/c.jsonl",
        "--index",
        "1",
        "--max-steps",
        "40",
        "--out",
        "{dir}/g.jsonl",
    ];
    assert_eq!(run(d, &gen), 0);
    assert!(load_model(&d.join("base.ckpt")).is_ok());
    if d.join("g.jsonl").exists() {
        assert_eq!(read_corpus(&d.join("g.jsonl")).unwrap().len(), 1);
    }
    assert_eq!(
        run(
            d,
            &[
                "generate",
                "--base",
                "{dir}/base.ckpt",
                "--corpus",
                "{dir}/c.jsonl",
                "--index",
                "99"
            ]
        ),
        1
    );
}

#[test]
fn finetune_defaults_and_bad_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let spec = "instances = 4\ngrid_height = 3\ngrid_width = 3\nchannels = 4\nvocab_size = 32\n";
    std::fs::write(d.join("spec.toml"), spec).unwrap();
    assert_eq!(
        run(
            d,
            &[
                "synth",
                "--out",
                "{dir}/c.jsonl",
                "--spec",
                "{dir}/spec.toml"
            ]
        ),
        0
    );

    assert_eq!(
        run(
            d,
            &[
                "finetune",
                "--variant",
                "bogus",
                "--corpus",
                "{dir}/c.jsonl"
            ]
        ),
        2
    );
    assert_eq!(run(d, &["finetune", "--corpus", "{dir}/c.jsonl"]), 2);

    // Outputs default to the working directory; pass explicit paths so the
    // test does not write into the crate.
    let ft = [
        "finetune",
        "--variant",
        "lateral",
        "--config",
        "{dir}/tiny.toml",
        "--corpus",
        "{dir}/c.jsonl",
        "--out",
        "{dir}/adapters.ckpt",
        "--metrics",
        "{dir}/metrics.csv",
        "--steps",
        "2",
    ];
    assert_eq!(run(d, &ft), 0);
    assert!(d.join("adapters.ckpt").exists() && d.join("metrics.csv").exists());

    // Corpus shaped for another grid is a contract failure, and nothing is written.
    assert_eq!(
        run(
            d,
            &["synth", "--out", "{dir}/big.jsonl", "--instances", "2"]
        ),
        0
    );
    let bad = [
        "finetune",
        "--variant",
        "shared",
        "--config",
        "{dir}/tiny.toml",
        "--corpus",
        "{dir}/big.jsonl",
        "--out",
        "{dir}/never.ckpt",
        "--metrics",
        "{dir}/never.csv",
        "--steps",
        "1",
    ];
    assert_eq!(run(d, &bad), 1);
    assert!(!d.join("never.ckpt").exists() && !d.join("never.csv").exists());
}

#[test]
fn gradcheck_passes_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    assert_eq!(
        run(
            d,
            &[
                "gradcheck",
                "--config",
                "{dir}/tiny.toml",
                "--out",
                "{dir}/gc.csv"
            ]
        ),
        0
    );
    let csv = std::fs::read_to_string(d.join("gc.csv")).unwrap();
    assert!(csv.starts_with("variant,name,checked,total,max_rel_err,max_abs_err\n"));
    for v in ["shared,", "moe,", "lateral,"] {
        assert!(csv.lines().any(|l| l.starts_with(v)), "{v}");
    }
    // An impossible tolerance fails with exit 1.
    let strict = [
        "gradcheck",
        "--config",
        "{dir}/tiny.toml",
        "--variant",
        "lateral",
        "--tolerance",
        "1e-300",
        "--out",
        "{dir}/gc2.csv",
    ];
    assert_eq!(run(d, &strict), 1);
}

#[test]
fn filter_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_raw_corpus(&d.join("raw.jsonl"), &common::labeled_fixture()).unwrap();
    std::fs::write(d.join("pipe.toml"), "coherence_threshold = 0.45\n").unwrap();
    let f = [
        "filter",
        "--input",
        "{dir}/raw.jsonl",
        "--out",
        "{dir}/clean.jsonl",
        "--pipeline",
        "{dir}/pipe.toml",
    ];
    assert_eq!(run(d, &f), 0);
    let accepted = read_corpus(&d.join("clean.jsonl")).unwrap();
    assert_eq!(accepted.len(), 10);
    assert!(accepted
        .iter()
        .all(|i| i.metadata.source_id.starts_with("clean-")));
    let verdicts = std::fs::read_to_string(d.join("clean.jsonl.verdicts.csv")).unwrap();
    assert_eq!(verdicts.lines().count(), 21);

    assert_eq!(
        run(
            d,
            &[
                "stats",
                "--corpus",
                "{dir}/clean.jsonl",
                "--out",
                "{dir}/s.csv"
            ]
        ),
        0
    );
    let stats = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(stats.starts_with("metric,key,count\ninstances,,10\n"));
    assert_eq!(
        run(
            d,
            &[
                "--format",
                "jsonl",
                "stats",
                "--corpus",
                "{dir}/clean.jsonl",
                "--out",
                "{dir}/s.jsonl"
            ]
        ),
        0
    );
    assert!(std::fs::read_to_string(d.join("s.jsonl"))
        .unwrap()
        .starts_with("{\"metric\":\"instances\""));

    std::fs::write(d.join("bad.toml"), "dup_threshold = 0.6\nnot_a_key = 1\n").unwrap();
    let bad = [
        "filter",
        "--input",
        "{dir}/raw.jsonl",
        "--out",
        "{dir}/x.jsonl",
        "--pipeline",
        "{dir}/bad.toml",
    ];
    assert_eq!(run(d, &bad), 1);
}
