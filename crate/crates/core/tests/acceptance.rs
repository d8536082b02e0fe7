//! Release gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Runs without the libtest harness so the lines are visible
//! in plain `cargo test` output.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use clipbench::checkpoint::Checkpoint;
use clipbench::config::RunConfig;
use clipbench::gradcheck::GradCheckOptions;
use clipbench::supervision::Variant;
use clipbench::trainer::{PairSet, Trainer};
use clipbench::verify::{self, FULL_STACK_PASS_FRACTION, FULL_STACK_TOLERANCE};

const BIN: &str = env!("CARGO_BIN_EXE_clipbench");

type Outcome = Result<String, String>;

fn clipbench(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("spawn clipbench")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    let d = detail.into();
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn verify_subset(dir: &Path, prefixes: &[&str], extra: &[&str]) -> Output {
    let mut args = vec!["verify"];
    args.extend_from_slice(extra);
    for p in prefixes {
        args.extend(["--only", p]);
    }
    clipbench(dir, &args)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions {
        tolerance: FULL_STACK_TOLERANCE,
        ..GradCheckOptions::default()
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for v in Variant::ALL {
        let r = verify::full_stack_gradients(v, opts)?;
        let frac = r.pass_fraction();
        ok &= r.checked > 0 && frac >= FULL_STACK_PASS_FRACTION;
        parts.push(format!("{v} {}/{} ({:.2}%)", r.passed, r.checked, 100.0 * frac));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(300);
    check(ok, format!("{}; {:.0}s", parts.join(", "), elapsed.as_secs_f64()))
}

/// Runs a verify subset in-process and folds it into one outcome.
fn verify_in_process(prefixes: &[&str]) -> Outcome {
    let only: Vec<String> = prefixes.iter().map(|s| s.to_string()).collect();
    let outcomes = verify::run_checks(&[], &only);
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| format!("{}: {}", o.name, o.detail)).collect();
    if outcomes.is_empty() {
        return Err(format!("no checks match {prefixes:?}"));
    }
    if failed.is_empty() {
        Ok(outcomes.iter().map(|o| format!("{}: {}", o.name, o.detail)).collect::<Vec<_>>().join("; "))
    } else {
        Err(failed.join("; "))
    }
}

struct Trained {
    accuracy: f64,
    seconds: f64,
}

fn train_default(dir: &Path, variant: &str, out: &str) -> Result<Trained, String> {
    let start = Instant::now();
    let o = clipbench(dir, &["train", "--variant", variant, "--out", out]);
    let seconds = start.elapsed().as_secs_f64();
    if !o.status.success() {
        return Err(format!("{variant} run failed: {}", text(&o)));
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    let accuracy = stdout
        .lines()
        .find_map(|l| l.strip_prefix("val_top1="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("no accuracy in output: {stdout}"))?;
    Ok(Trained { accuracy, seconds })
}

fn end_to_end(dir: &Path) -> Outcome {
    let clip = train_default(dir, "clip", "clip_a")?;
    let defilip = train_default(dir, "defilip", "defilip")?;
    let secs = clip.seconds + defilip.seconds;
    let order = if defilip.accuracy > clip.accuracy { "DeFILIP > CLIP" } else { "DeFILIP <= CLIP" };
    check(
        clip.accuracy >= 0.6 && defilip.accuracy >= 0.6 && secs <= 1800.0,
        format!(
            "CLIP {:.3} ({:.0}s), DeFILIP {:.3} ({:.0}s), chance 0.125; ordering observed: {order} (not gated)",
            clip.accuracy, clip.seconds, defilip.accuracy, defilip.seconds
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    // the first run is the CLIP run of the end-to-end criterion
    if !dir.join("clip_a/final.ckpt").is_file() {
        train_default(dir, "clip", "clip_a")?;
    }
    train_default(dir, "clip", "clip_b")?;
    let mut compared = Vec::new();
    for f in ["metrics.log", "initial.ckpt", "final.ckpt", "best.ckpt", "eval_report.txt"] {
        let a = std::fs::read(dir.join("clip_a").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dir.join("clip_b").join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between identical runs"));
        }
        compared.push(format!("{f} ({} B)", a.len()));
    }
    Ok(format!("byte-identical: {}", compared.join(", ")))
}

fn depth_sweep(dir: &Path) -> Outcome {
    let o = clipbench(dir, &["sweep-text-depth", "--out", "sweep", "--depths", "1,2,3,4", "--require-above-chance"]);
    let report = std::fs::read_to_string(dir.join("sweep/sweep_report.txt")).unwrap_or_default();
    let rows = report.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).count();
    let summary = report.lines().skip(1).map(str::trim).collect::<Vec<_>>().join(" | ");
    check(o.status.success() && rows == 4, if summary.is_empty() { text(&o) } else { summary })
}

fn checkpoint_round_trip() -> Outcome {
    const STEPS: u64 = 50;
    const SPLIT: u64 = 25;
    let config = RunConfig::resolve(None, &[("train.variant".into(), "\"defilip\"".into())]).map_err(|e| e.to_string())?;
    let records = config.train_records().map_err(|e| e.to_string())?;
    let size = config.model.image.image_size();
    let data = || PairSet::from_records(&records, size).map_err(|e| e.to_string());
    let vocab = config.vocab(&records);

    let mut straight = Trainer::new(config.settings(), vocab.clone(), data()?).map_err(|e| e.to_string())?;
    let mut reference = Vec::new();
    for _ in 0..STEPS {
        reference.push(straight.step().map_err(|e| e.to_string())?.log_line());
    }

    let mut first = Trainer::new(config.settings(), vocab, data()?).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for _ in 0..SPLIT {
        lines.push(first.step().map_err(|e| e.to_string())?.log_line());
    }
    let mut bytes = Vec::new();
    first.checkpoint().map_err(|e| e.to_string())?.write_to(&mut bytes).map_err(|e| e.to_string())?;
    drop(first);
    let ckpt = Checkpoint::read_from(bytes.as_slice()).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(&ckpt, data()?).map_err(|e| e.to_string())?;
    for _ in SPLIT..STEPS {
        lines.push(resumed.step().map_err(|e| e.to_string())?.log_line());
    }
    if let Some(i) = (0..reference.len()).find(|&i| reference[i] != lines[i]) {
        return Err(format!("step {i} differs:\n  {}\n  {}", reference[i], lines[i]));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    straight.checkpoint().map_err(|e| e.to_string())?.write_to(&mut a).map_err(|e| e.to_string())?;
    resumed.checkpoint().map_err(|e| e.to_string())?.write_to(&mut b).map_err(|e| e.to_string())?;
    check(
        a == b,
        format!("DeFILIP, save at step {SPLIT}, resume to {STEPS}: all metrics lines and the final state bitwise equal"),
    )
}

fn verify_command(dir: &Path) -> Outcome {
    let pristine = clipbench(dir, &["verify"]);
    if pristine.status.code() != Some(0) {
        return Err(format!("pristine build exited {:?}: {}", pristine.status.code(), text(&pristine)));
    }
    let cheap = ["oracle", "fixtures", "identities", "grad.primitives"];
    let mut parts = vec!["pristine exit 0".to_string()];
    for flag in ["--break-filip-tiebreak", "--break-matmul-grad", "--break-clip-symmetry", "--break-corpus-std"] {
        let o = verify_subset(dir, &cheap, &[flag]);
        if o.status.code() != Some(1) {
            return Err(format!("{flag} exited {:?}", o.status.code()));
        }
        let failed = text(&o).lines().find_map(|l| l.strip_prefix("error: failed checks: ").map(str::to_string)).unwrap_or_default();
        parts.push(format!("{flag} exit 1 ({failed})"));
    }
    Ok(parts.join(", "))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let dir = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient oracle", Box::new(gradient_oracle)),
        ("brute-force equivalence", Box::new(|| verify_in_process(&["oracle."]))),
        ("analytic fixtures", Box::new(|| verify_in_process(&["fixtures.losses"]))),
        ("composition identities", Box::new(|| verify_in_process(&["identities.composition"]))),
        ("end-to-end learning", Box::new(|| end_to_end(dir))),
        ("determinism", Box::new(|| determinism(dir))),
        ("depth sweep", Box::new(|| depth_sweep(dir))),
        ("corpus stats", Box::new(|| verify_in_process(&["fixtures.corpus"]))),
        ("checkpoint round-trip", Box::new(checkpoint_round_trip)),
        ("verify command", Box::new(|| verify_command(dir))),
    ];
    let mut failures = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name:<24} [{secs:>6.1}s] {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL {name:<24} [{secs:>6.1}s] {d}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
