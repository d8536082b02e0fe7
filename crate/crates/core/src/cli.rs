//! Command-line front end. Exit codes: 0 success, 1 verification or
//! accuracy failure (and runtime failures such as divergence), 2 usage or
//! configuration error, 3 artifact mismatch.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{parse_override, prompt_set, ConfigError, RunConfig};
use crate::corpus::{analyze_file, CorpusError, FilterPolicy};
use crate::data::{generate_synthetic, read_manifest, write_farbfeld, write_manifest, DataError, ImageSource, PairRecord};
use crate::faults::Fault;
use crate::supervision::Variant;
use crate::trainer::{self, load_for_eval, EvalSet, PairSet, RunOptions, TrainError, Trainer};
use crate::verify;
use crate::zeroshot::ZeroShotError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.into(),
        }
    }
    fn failure(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: m.into(),
        }
    }
    fn mismatch(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_MISMATCH,
            message: m.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<ZeroShotError> for CliError {
    fn from(e: ZeroShotError) -> Self {
        match e {
            ZeroShotError::Prompts(_) => Self::usage(e.to_string()),
            _ => Self::mismatch(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) | TrainError::Data(_) | TrainError::Augment(_) => Self::usage(e.to_string()),
            TrainError::Mismatch(_) | TrainError::Checkpoint(_) | TrainError::Encoder(_) => Self::mismatch(e.to_string()),
            _ => Self::failure(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "clipbench", version, about = "Train and evaluate small contrastive language-image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write checkpoints, metrics and reports.
    Train(TrainArgs),
    /// Zero-shot evaluation of a checkpoint on a labelled manifest.
    Eval(EvalArgs),
    /// Corpus statistics of a caption file, optionally after filtering.
    Stats(StatsArgs),
    /// Write the synthetic shapes dataset as manifests.
    Synth(SynthArgs),
    /// Run the built-in oracle suite.
    Verify(VerifyArgs),
    /// Train one model per text-encoder depth and tabulate accuracy.
    SweepTextDepth(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set train.variant=...`.
    #[arg(long)]
    variant: Option<String>,
    /// Shorthand for `--set train.epochs=...`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `--set train.seed=...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set out_dir=...`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the configuration, print it resolved, and stop.
    #[arg(long)]
    check: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut overrides = Vec::new();
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        if let Some(v) = &self.variant {
            v.parse::<Variant>().map_err(CliError::usage)?;
            overrides.push(("train.variant".into(), format!("\"{v}\"")));
        }
        if let Some(e) = self.epochs {
            overrides.push(("train.epochs".into(), e.to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("train.seed".into(), s.to_string()));
        }
        if let Some(o) = &self.out {
            overrides.push(("out_dir".into(), toml_string(&o.display().to_string())));
        }
        Ok(RunConfig::resolve(self.config.as_deref(), &overrides)?)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.into()).to_string()
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Exit 1 if the final validation accuracy is below this.
    #[arg(long)]
    min_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled manifest; the synthetic validation set when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `desk`, `clip`, or a template file.
    #[arg(long, default_value = "desk")]
    prompts: String,
    /// Exit 1 if the accuracy is below this.
    #[arg(long)]
    min_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Manifest or plain caption file.
    path: PathBuf,
    /// TOML filter policy (`min_length`, `max_length`, `min_english_ratio`).
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    min_length: Option<usize>,
    #[arg(long)]
    max_length: Option<usize>,
    #[arg(long)]
    min_english_ratio: Option<f64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 25)]
    val_per_class: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also render every image to a farbfeld file and reference it.
    #[arg(long)]
    render: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// List the checks without running them.
    #[arg(long)]
    list: bool,
    /// Run only checks whose names start with this prefix. Repeatable.
    #[arg(long)]
    only: Vec<String>,
    /// Test hook: argmax ties resolve to the last candidate.
    #[arg(long)]
    break_filip_tiebreak: bool,
    /// Test hook: scale one matmul gradient by 1.01.
    #[arg(long)]
    break_matmul_grad: bool,
    /// Test hook: the text-side contrastive term reuses image-side logits.
    #[arg(long)]
    break_clip_symmetry: bool,
    /// Test hook: caption-length std uses the sample denominator.
    #[arg(long)]
    break_corpus_std: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated depths; the config's `sweep.depths` when absent.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    /// Train this many depths concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Exit 1 unless every depth beats chance accuracy.
    #[arg(long)]
    require_above_chance: bool,
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit code. Output goes to stdout, diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Verify(a) => cmd_verify(a),
        Command::SweepTextDepth(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

struct Prepared {
    vocab: crate::data::Vocab,
    train: PairSet,
    val: EvalSet,
    prompts: crate::zeroshot::PromptSet,
}

fn prepare(config: &RunConfig) -> Result<Prepared, CliError> {
    let size = config.model.image.image_size();
    let train_records = config.train_records()?;
    let val_records = config.val_records()?;
    let prompts = config.prompts()?;
    let vocab = config.vocab(&train_records);
    Ok(Prepared {
        vocab,
        train: PairSet::from_records(&train_records, size)?,
        val: EvalSet::from_records(&val_records, size)?,
        prompts,
    })
}

/// Trains under `config` into its `out_dir`, returning the final accuracy.
fn train_one(config: &RunConfig, resume: Option<&Path>, echo: bool) -> Result<Option<f64>, CliError> {
    let p = prepare(config)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let t = Trainer::resume(&ckpt, p.train)?;
            if t.settings() != &config.settings() {
                return Err(CliError::mismatch(format!(
                    "{} was written under different settings than this configuration",
                    path.display()
                )));
            }
            if t.vocab() != &p.vocab {
                return Err(CliError::mismatch(format!(
                    "{} was trained with a different vocabulary",
                    path.display()
                )));
            }
            t
        }
        None => Trainer::new(config.settings(), p.vocab, p.train)?,
    };
    config.write_to(&config.out_dir)?;
    let print = |line: &str| eprintln!("{line}");
    let summary = trainer::run(
        &mut trainer,
        &RunOptions {
            out_dir: &config.out_dir,
            eval: Some(&p.val),
            prompts: &p.prompts,
            progress: echo.then_some(&print as &dyn Fn(&str)),
        },
    )?;
    Ok(summary.final_report.map(|r| r.accuracy))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    if a.config.check {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let accuracy = train_one(&config, a.resume.as_deref(), true)?;
    println!("run_dir={}", config.out_dir.display());
    match accuracy {
        Some(acc) => {
            println!("val_top1={acc:.6}");
            if let Some(min) = a.min_accuracy {
                if acc < min {
                    return Err(CliError::failure(format!("accuracy {acc:.4} is below {min}")));
                }
            }
        }
        None => println!("no training steps taken"),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::usage(format!("{}: {io}", path.display()))
        }
        other => CliError::mismatch(format!("{}: {other}", path.display())),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let prompts = prompt_set(&a.prompts)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (vocab, model) = load_for_eval(&ckpt).map_err(|e| CliError::mismatch(e.to_string()))?;
    let records = match &a.data {
        Some(path) => read_manifest(path)?,
        None => {
            let s = crate::config::SyntheticData::default();
            generate_synthetic(s.classes, s.val_per_class, s.val_seed)?
        }
    };
    let size = model.config().image.image_size();
    let eval = EvalSet::from_records(&records, size).map_err(|e| match e {
        TrainError::Data(d @ DataError::Invalid(_)) => CliError::mismatch(d.to_string()),
        other => other.into(),
    })?;
    let report = eval.evaluate(&model, &vocab, &prompts)?;
    print!("{report}");
    if let Some(min) = a.min_accuracy {
        if report.accuracy < min {
            return Err(CliError::failure(format!("accuracy {:.4} is below {min}", report.accuracy)));
        }
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<(), CliError> {
    let mut policy = match &a.policy {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            Some(toml::from_str::<FilterPolicy>(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    if a.min_length.is_some() || a.max_length.is_some() || a.min_english_ratio.is_some() {
        let p = policy.get_or_insert_with(FilterPolicy::default);
        if let Some(v) = a.min_length {
            p.min_length = v;
        }
        if a.max_length.is_some() {
            p.max_length = a.max_length;
        }
        if let Some(v) = a.min_english_ratio {
            p.min_english_ratio = v;
        }
    }
    let (report, filtered) = analyze_file(&a.path, policy.as_ref())?;
    let mut out = String::new();
    let _ = writeln!(out, "corpus: {}", a.path.display());
    let _ = write!(out, "{report}");
    out.push_str(&report.key_values(""));
    if let Some((tally, kept)) = filtered {
        let _ = writeln!(out, "rejected_length={}\nrejected_ratio={}", tally.length, tally.ratio);
        let _ = writeln!(out, "after filtering:");
        let _ = write!(out, "{kept}");
        out.push_str(&kept.key_values("filtered."));
    }
    print!("{out}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::usage(format!("{}: {e}", a.out.display())))?;
    for (name, per_class, seed) in [("train", a.train_per_class, a.seed), ("val", a.val_per_class, a.seed.wrapping_add(1))] {
        let mut records = generate_synthetic(a.classes, per_class, seed)?;
        if a.render {
            let dir = a.out.join(format!("{name}_images"));
            std::fs::create_dir_all(&dir).map_err(|e| CliError::failure(format!("{}: {e}", dir.display())))?;
            for (i, r) in records.iter_mut().enumerate() {
                let path = dir.join(format!("{i:05}.ff"));
                let img = r.load_image(crate::data::SYNTHETIC_SIZE)?;
                let file = std::fs::File::create(&path).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
                write_farbfeld(&img, std::io::BufWriter::new(file))
                    .map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
                *r = PairRecord {
                    image: ImageSource::File(path),
                    ..r.clone()
                };
            }
        }
        let path = a.out.join(format!("{name}.tsv"));
        write_manifest(&path, &records)?;
        println!("{name}={} ({} records)", path.display(), records.len());
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), CliError> {
    if a.list {
        for c in verify::checks() {
            println!("{:<24} {}", c.name, c.about);
        }
        return Ok(());
    }
    let faults: Vec<Fault> = [
        (a.break_filip_tiebreak, Fault::FilipTiebreak),
        (a.break_matmul_grad, Fault::MatmulGrad),
        (a.break_clip_symmetry, Fault::ClipSymmetry),
        (a.break_corpus_std, Fault::CorpusStd),
    ]
    .into_iter()
    .filter_map(|(on, f)| on.then_some(f))
    .collect();
    for f in &faults {
        println!("injected fault: --{}", f.flag());
    }
    let outcomes = verify::run_checks(&faults, &a.only);
    if outcomes.is_empty() {
        return Err(CliError::usage(format!("no check matches {:?}; see --list", a.only)));
    }
    for o in &outcomes {
        println!("{} {:<24} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::failure(format!("failed checks: {}", failed.join(", "))))
    }
}

/// One row of the depth sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub depth: usize,
    pub text_parameters: usize,
    pub accuracy: f64,
}

pub fn sweep_table(rows: &[SweepRow], chance: f64) -> String {
    let mut out = format!("{:>5}  {:>16}  {:>12}\n", "depth", "text parameters", "val top-1");
    for r in rows {
        let _ = writeln!(out, "{:>5}  {:>16}  {:>12.4}", r.depth, r.text_parameters, r.accuracy);
    }
    let _ = writeln!(out, "chance = {chance:.4}");
    out
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let mut base = a.config.resolve()?;
    if let Some(d) = a.depths {
        base.sweep.depths = d;
        base.validate()?;
    }
    let configs: Vec<RunConfig> = base
        .sweep
        .depths
        .iter()
        .map(|&d| {
            let mut c = base.clone();
            c.model.text.depth = d;
            c.out_dir = base.out_dir.join(format!("depth_{d}"));
            c
        })
        .collect();
    if a.config.check {
        print!("{}", base.to_toml());
        return Ok(());
    }
    if a.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let mut results: Vec<Option<Result<Option<f64>, CliError>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_configs, chunk_results) in configs.chunks(a.jobs).zip(results.chunks_mut(a.jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_configs
                .iter()
                .map(|c| s.spawn(move || train_one(c, None, a.jobs == 1)))
                .collect();
            for (h, slot) in handles.into_iter().zip(chunk_results.iter_mut()) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(CliError::failure("training thread panicked"))));
            }
        });
    }
    let mut rows = Vec::new();
    for (c, r) in configs.iter().zip(results) {
        let acc = r.expect("every run joined")?.ok_or_else(|| CliError::usage("the sweep needs at least one epoch"))?;
        rows.push(SweepRow {
            depth: c.model.text.depth,
            text_parameters: c.model.text.parameter_count(),
            accuracy: acc,
        });
    }
    let val_classes = crate::data::class_names(&base.val_records()?).len().max(1);
    let chance = 1.0 / val_classes as f64;
    let table = sweep_table(&rows, chance);
    let path = base.out_dir.join("sweep_report.txt");
    std::fs::write(&path, &table).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
    print!("{table}");
    if a.require_above_chance {
        let below: Vec<usize> = rows.iter().filter(|r| r.accuracy <= chance).map(|r| r.depth).collect();
        if !below.is_empty() {
            return Err(CliError::failure(format!("depths {below:?} did not beat chance")));
        }
    }
    Ok(())
}
