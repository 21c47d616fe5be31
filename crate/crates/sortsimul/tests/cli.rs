use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sortsimul::io::sha256_file;
use tempfile::TempDir;

const TINY: &str = "\
output_dir = data
gen.rule = block_move
gen.distance = 2
gen.block = 1
gen.vocab_size = 6
gen.min_len = 3
gen.max_len = 6
gen.seed = 17
gen.train_size = 60
gen.valid_size = 10
gen.test_size = 12
model.embed_dim = 16
model.ffn_dim = 24
model.heads = 2
model.layers = 1
asn.decoder_layers = 1
train.max_steps = 6
train.eval_every = 3
train.warmup_steps = 3
train.max_tokens = 64
";

fn sortsimul(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sortsimul"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = sortsimul(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.conf"), config).unwrap();
    dir
}

fn read_json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn hashes(dir: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .map(|n| sha256_file(&dir.join(n)).unwrap())
        .collect()
}

#[test]
fn gen_records_rule_and_seed_and_is_deterministic() {
    let config = TINY.replace("gen.rule = block_move", "gen.rule = monotonic");
    let d = setup(&config);
    ok(d.path(), &["gen", "run.conf"]);
    let m = read_json(d.path().join("data/gen.manifest.json"));
    assert_eq!(m["settings"]["gen.rule"], "monotonic");
    assert_eq!(m["seeds"]["gen.seed"], 17);
    let files = ["data/train.txt", "data/valid.txt", "data/test.txt"];
    let first = hashes(d.path(), &files);
    ok(d.path(), &["gen", "run.conf"]);
    assert_eq!(first, hashes(d.path(), &files));
    let test = fs::read_to_string(d.path().join("data/test.txt")).unwrap();
    assert_eq!(test.lines().count(), 12);
}

#[test]
fn invalid_rule_is_a_usage_error_naming_the_key() {
    let d = setup(&TINY.replace("gen.rule = block_move", "gen.rule = shuffle"));
    let out = sortsimul(d.path(), &["gen", "run.conf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen.rule"));
}

#[test]
fn unknown_key_and_missing_files_exit_2() {
    let d = setup(&format!("{TINY}model.colour = red\n"));
    let out = sortsimul(d.path(), &["gen", "run.conf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.colour"));

    let d = setup(TINY);
    assert_eq!(
        sortsimul(d.path(), &["gen", "nope.conf"]).status.code(),
        Some(2)
    );
    let out = sortsimul(d.path(), &["eval", "missing.ckpt", "run.conf"]);
    assert_eq!(out.status.code(), Some(2));
    // training before generating has no corpus to read
    assert_eq!(
        sortsimul(d.path(), &["train", "run.conf"]).status.code(),
        Some(2)
    );
    // bad flag values
    assert_eq!(
        sortsimul(d.path(), &["train", "run.conf", "--phase", "warmup"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sortsimul(d.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let d = setup(TINY);
    ok(d.path(), &["gen", "run.conf"]);
    fs::write(d.path().join("bad.ckpt"), b"SSCK\x01garbage").unwrap();
    let out = sortsimul(d.path(), &["eval", "bad.ckpt", "data/test.txt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_pretrain_finetune_eval_analyze() {
    let d = setup(TINY);
    let p = d.path();
    ok(p, &["gen", "run.conf"]);
    ok(p, &["train", "run.conf", "--phase", "ctc_pretrain"]);
    for f in [
        "ctc_pretrain.ckpt",
        "ctc_pretrain.last.ckpt",
        "ctc_pretrain.infer.ckpt",
        "ctc_pretrain.log.jsonl",
    ] {
        assert!(p.join("data").join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(p.join("data/ctc_pretrain.log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss", "lr", "val_bleu"] {
            assert!(v.get(key).is_some(), "{key} in {line}");
        }
    }
    assert_eq!(log.lines().count(), 2);

    // finetuning needs an init checkpoint
    let out = sortsimul(p, &["train", "run.conf", "--phase", "asn_finetune"]);
    assert_eq!(out.status.code(), Some(2));
    ok(
        p,
        &[
            "train",
            "run.conf",
            "--phase",
            "asn_finetune",
            "--init",
            "data/ctc_pretrain.ckpt",
        ],
    );
    let m = read_json(p.join("data/asn_finetune.manifest.json"));
    assert!(m["inputs"]["ctc_pretrain.ckpt"].is_string());

    ok(p, &["train", "run.conf", "--phase", "from_scratch"]);
    ok(
        p,
        &[
            "train",
            "run.conf",
            "--phase",
            "from_scratch",
            "--ablation",
            "gumbel_softmax",
        ],
    );
    let m = read_json(p.join("data/from_scratch-gumbel_softmax.manifest.json"));
    assert_eq!(m["settings"]["ablation"], "gumbel_softmax");

    let out = ok(
        p,
        &[
            "eval",
            "data/asn_finetune.ckpt",
            "data/test.txt",
            "--k",
            "1,3,5,7,9",
            "--oracle",
        ],
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 5);
    let csv = fs::read_to_string(p.join("data/asn_finetune.curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().ends_with(",oracle_bleu"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split(',').count() == 6));
    assert!(fs::read_to_string(p.join("data/asn_finetune.curve.svg"))
        .unwrap()
        .starts_with("<svg"));

    // baseline checkpoints have no sorting network to feed the reference to
    let out = sortsimul(
        p,
        &[
            "eval",
            "data/ctc_pretrain.ckpt",
            "data/test.txt",
            "--oracle",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    ok(
        p,
        &[
            "eval",
            "data/ctc_pretrain.infer.ckpt",
            "data/test.txt",
            "--k",
            "1,3",
        ],
    );
    let csv = fs::read_to_string(p.join("data/ctc_pretrain.infer.curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(!csv.lines().next().unwrap().contains("oracle"));

    ok(
        p,
        &[
            "analyze",
            "data/asn_finetune.ckpt",
            "--corpus",
            "data/test.txt",
            "--samples",
            "3",
            "--out",
            "figs",
        ],
    );
    let pairs = sortsimul::io::read_corpus(&p.join("data/test.txt")).unwrap();
    for (i, pair) in pairs.iter().take(3).enumerate() {
        let z = fs::read_to_string(p.join(format!("figs/asn_finetune.z{}.csv", i + 1))).unwrap();
        let n = pair.source.len();
        let lines: Vec<&str> = z.lines().collect();
        assert_eq!(lines.len(), n + 1, "header plus one row per position");
        assert!(lines.iter().all(|l| l.split(',').count() == n + 2));
    }
    assert!(p.join("figs/asn_finetune.permutation.csv").is_file());
}

#[test]
fn analyze_monotonic_corpus_has_zero_anticipation() {
    let d = setup(&TINY.replace("gen.rule = block_move", "gen.rule = monotonic"));
    ok(d.path(), &["gen", "run.conf"]);
    ok(d.path(), &["analyze", "data/train.txt"]);
    let csv = fs::read_to_string(d.path().join("data/train.kar.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for r in rows {
        let rate: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(rate, 0.0, "{r}");
    }
}

#[test]
fn train_and_eval_reruns_are_checksum_identical() {
    let d = setup(TINY);
    let p = d.path();
    ok(p, &["gen", "run.conf"]);
    let outputs = [
        "data/from_scratch.ckpt",
        "data/from_scratch.last.ckpt",
        "data/from_scratch.infer.ckpt",
        "data/from_scratch.log.jsonl",
        "data/from_scratch.manifest.json",
        "data/from_scratch.eval.json",
        "data/from_scratch.curve.csv",
        "data/from_scratch.traces.jsonl",
        "data/from_scratch.eval.manifest.json",
    ];
    let run = || {
        ok(p, &["train", "run.conf", "--phase", "from_scratch"]);
        ok(
            p,
            &[
                "eval",
                "data/from_scratch.ckpt",
                "data/test.txt",
                "--k",
                "1,2",
                "--oracle",
            ],
        );
        hashes(p, &outputs)
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let d = setup(TINY);
    let p = d.path();
    ok(p, &["gen", "run.conf"]);
    ok(
        p,
        &[
            "train",
            "run.conf",
            "--phase",
            "from_scratch",
            "--name",
            "full",
        ],
    );
    let short = TINY.replace("train.max_steps = 6", "train.max_steps = 3");
    fs::write(p.join("short.conf"), short).unwrap();
    ok(
        p,
        &[
            "train",
            "short.conf",
            "--phase",
            "from_scratch",
            "--name",
            "half",
        ],
    );
    ok(
        p,
        &[
            "train",
            "run.conf",
            "--phase",
            "from_scratch",
            "--resume",
            "data/half.last.ckpt",
            "--name",
            "resumed",
        ],
    );
    let a = sortsimul::io::read_checkpoint(&p.join("data/full.last.ckpt")).unwrap();
    let b = sortsimul::io::read_checkpoint(&p.join("data/resumed.last.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam, b.adam);
    assert_eq!(a.step, b.step);
}
