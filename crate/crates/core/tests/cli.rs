use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_clipbench");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("spawn clipbench")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set", "model.image.patch_size=16",
    "--set", "model.image.width=16",
    "--set", "model.image.depth=1",
    "--set", "model.image.heads=2",
    "--set", "model.image.embed_dim=8",
    "--set", "model.text.width=16",
    "--set", "model.text.depth=1",
    "--set", "model.text.heads=2",
    "--set", "model.text.embed_dim=8",
    "--set", "model.text.vocab_size=64",
    "--set", "train.batch_size=4",
    "--set", "loss.queue_capacity=16",
    "--set", "data.train=\"d/train.tsv\"",
    "--set", "data.val=\"d/val.tsv\"",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

fn synth(dir: &Path) {
    let o = run(dir, &["synth", "--out", "d", "--classes", "3", "--train-per-class", "4", "--val-per-class", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn verify_passes_pristine_and_names_each_broken_check() {
    let dir = tempfile::tempdir().unwrap();
    let cheap = ["--only", "oracle", "--only", "fixtures", "--only", "identities", "--only", "grad.primitives"];
    let o = run(dir.path(), &[&["verify"][..], &cheap].concat());
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all 9 checks passed"));

    for (flag, check) in [
        ("--break-filip-tiebreak", "oracle.filip"),
        ("--break-matmul-grad", "grad.primitives"),
        ("--break-clip-symmetry", "oracle.info_nce"),
        ("--break-corpus-std", "fixtures.corpus"),
    ] {
        let o = run(dir.path(), &[&["verify", flag][..], &cheap].concat());
        assert_eq!(o.status.code(), Some(1), "{flag}");
        assert!(stdout(&o).contains(&format!("FAIL {check}")), "{flag}: {}", stdout(&o));
        assert!(stderr(&o).contains(check));
    }
}

#[test]
fn verify_lists_checks_and_rejects_unknown_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--list"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("grad.full_stack"));
    assert_eq!(run(dir.path(), &["verify", "--only", "nope"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--check", "--variant", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("clip, slip, filip, declip, defilip"));
    assert_eq!(run(dir.path(), &["train", "--check", "--set", "train.nonsense=1"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["train", "--check", "--set", "noequals"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["train", "--check", "--config", "missing.toml"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["stats", "missing.txt"]).status.code(), Some(2));
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(dir.path(), &["train", "--check", "--variant", "declip", "--set", "train.epochs=3"]);
    assert!(first.status.success(), "{}", stderr(&first));
    std::fs::write(dir.path().join("c.toml"), first.stdout.clone()).unwrap();
    let second = run(dir.path(), &["train", "--check", "--config", "c.toml"]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(stdout(&first), stdout(&second));
    assert!(stdout(&first).contains("epochs = 3"));
}

#[test]
fn train_eval_and_resume_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);

    let o = run(d, &with_tiny(&["train", "--variant", "filip", "--epochs", "2", "--out", "r"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("val_top1="));
    assert_eq!(stderr(&o).lines().filter(|l| l.starts_with("eval epoch=")).count(), 2);
    for f in ["config.toml", "metrics.log", "initial.ckpt", "final.ckpt", "best.ckpt", "eval_report.txt"] {
        assert!(d.join("r").join(f).is_file(), "{f}");
    }

    let o = run(d, &["eval", "--checkpoint", "r/final.ckpt", "--data", "d/val.tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("top1_accuracy="));
    let o = run(d, &["eval", "--checkpoint", "r/final.ckpt", "--data", "d/val.tsv", "--min-accuracy", "1.01"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(d, &["eval", "--checkpoint", "r/final.ckpt", "--prompts", "nofile.txt"]).status.code(), Some(2));

    std::fs::write(d.join("bad.ckpt"), b"garbage").unwrap();
    assert_eq!(run(d, &["eval", "--checkpoint", "bad.ckpt"]).status.code(), Some(3));
    assert_eq!(run(d, &["eval", "--checkpoint", "absent.ckpt"]).status.code(), Some(2));

    // same settings resume cleanly; changed settings are an artifact mismatch
    let o = run(d, &with_tiny(&["train", "--variant", "filip", "--epochs", "2", "--out", "r", "--resume", "r/initial.ckpt"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(d, &with_tiny(&["train", "--variant", "filip", "--epochs", "3", "--out", "r", "--resume", "r/final.ckpt"]));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn stats_prints_table_and_key_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.txt"), "a b\n\na b c d\nsnow ☃\n").unwrap();
    let o = run(dir.path(), &["stats", "c.txt", "--min-english-ratio", "0.9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Caption length"));
    assert!(out.contains("examples=3\n"));
    assert!(out.contains("rejected_ratio=1\n"));
    assert!(out.contains("filtered.examples=2\n"));
    assert!(out.contains("filtered.caption_length_std=1.000000\n"));
    let o = run(dir.path(), &["stats", "c.txt", "--min-length", "5", "--max-length", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_render_writes_readable_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["synth", "--out", "d", "--classes", "2", "--train-per-class", "1", "--val-per-class", "1", "--render"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(dir.path().join("d/train.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    let first = manifest.lines().next().unwrap().split('\t').next().unwrap();
    let bytes = std::fs::read(dir.path().join("d").join(first)).unwrap();
    assert!(bytes.starts_with(b"farbfeld"));
}

#[test]
fn sweep_writes_one_row_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let o = run(d, &with_tiny(&["sweep-text-depth", "--epochs", "1", "--out", "sw", "--depths", "1,2", "--jobs", "2"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(d.join("sw/sweep_report.txt")).unwrap();
    assert_eq!(report, stdout(&o));
    let rows: Vec<&str> = report.lines().skip(1).take(2).collect();
    assert!(rows[0].trim_start().starts_with('1') && rows[1].trim_start().starts_with('2'));
    assert!(d.join("sw/depth_1/final.ckpt").is_file() && d.join("sw/depth_2/final.ckpt").is_file());
    assert_eq!(run(d, &with_tiny(&["sweep-text-depth", "--depths", "0"])).status.code(), Some(2));
}
