//! Command-line front end: `train`, `eval`, `bench` and `check`.
//!
//! Exit codes: 0 success, 1 failed check or other error, 2 configuration
//! error, 3 non-finite value during training, 4 checkpoint/architecture
//! mismatch, 5 corrupt checkpoint or data file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binconv::{binary_conv2d, float_pm1_conv2d_oracle, ConvSpec};
use crate::bitcore::{inject_sign_zero_fault, sign, sign_quantize, FloatTensor};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::train::{train_loop, validate};
use crate::verify::{run_suite, Suite};

#[derive(Debug, Parser)]
#[command(name = "bitsird", version, about = "1-bit infrared small-target segmentation engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write final.ckpt, best.ckpt and report.txt.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Time the packed binary convolution against the float oracle.
    Bench(BenchArgs),
    /// Run the verification suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "account_only")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the cost accounting only; no data or checkpoint is read.
    #[arg(long)]
    pub account_only: bool,
    /// Report file; defaults to `eval.txt` beside the checkpoint.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Square input sizes.
    #[arg(long, value_delimiter = ',', default_value = "64,256")]
    pub sizes: Vec<usize>,
    /// Input and output channel counts (c = n).
    #[arg(long, value_delimiter = ',', default_value = "16,64")]
    pub channels: Vec<usize>,
    /// Minimum timed seconds per kernel and configuration.
    #[arg(long, default_value_t = 0.3)]
    pub min_time: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Run a single suite.
    #[arg(long)]
    pub suite: Option<Suite>,
    /// Mutation test: binarize zero to -1.
    #[arg(long, hide = true)]
    pub inject_sign_fault: bool,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownKey { .. } => 2,
        Error::NonFinite { .. } => 3,
        Error::ArchitectureMismatch(_) => 4,
        Error::Format { .. } => 5,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a).map(|_| 0),
        Command::Check(a) => Ok(cmd_check(&a)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let dataset = cfg.dataset()?;
    let mut model = Model::build(&cfg.net)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let start = Instant::now();
    let report = train_loop(&mut model, &dataset, &cfg.train, |r| {
        if !args.quiet {
            println!(
                "epoch {:>3}  loss {:.5}  mIoU {:.4}  Pd {:.4}  Fa {:.3}  lr {:.3e}  [{:.0}s]",
                r.epoch,
                r.loss,
                r.val.miou,
                r.val.pd,
                r.val.fa,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let elapsed = start.elapsed().as_secs_f64();

    Checkpoint::from_model(&model).save(&args.out.join("final.ckpt"))?;
    let mut best = model.clone();
    best.restore(&report.best_params)?;
    Checkpoint::from_model(&best).save(&args.out.join("best.ckpt"))?;

    let last = report.last().expect("at least one epoch");
    let growth = report.max_sharpness_growth(cfg.net.k_init);
    let accounting = model.account(cfg.net.input_size)?;
    let mut text = String::new();
    for line in cfg.to_text().lines() {
        let _ = writeln!(text, "# {line}");
    }
    let _ = writeln!(text, "{}", last.val.header());
    text.push_str(&report.to_lines());
    let _ = writeln!(text, "final.miou = {:.12}", last.val.miou);
    let _ = writeln!(text, "final.pd = {:.12}", last.val.pd);
    let _ = writeln!(text, "final.fa_e5 = {:.12}", last.val.fa);
    let _ = writeln!(text, "sharpness.max_growth = {growth:.6}");
    let _ = writeln!(text, "train.seconds = {elapsed:.1}");
    text.push_str(&accounting.to_key_values());
    write_file(&args.out.join("report.txt"), &text)?;

    println!("{}", last.val.to_table());
    println!("best epoch {} (mIoU {:.4})", report.best_epoch, report.epochs[report.best_epoch - 1].val.miou);
    println!("largest k growth {growth:.1}x over k_init {}", cfg.net.k_init);
    if growth < 10.0 {
        eprintln!("warning: no Sign site sharpened by 10x or more during training");
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let mut model = Model::build(&cfg.net)?;
    let accounting = model.account(cfg.net.input_size)?;
    if args.account_only {
        print!("{}", accounting.to_table());
        print!("{}", accounting.to_key_values());
        return Ok(0);
    }
    let path = args.checkpoint.as_ref().expect("clap requires --checkpoint");
    let ckpt = Checkpoint::load(path)?;
    ckpt.apply(&mut model)?;
    let dataset = cfg.dataset()?;
    let report = validate(&model, &dataset.val, cfg.train.threshold, cfg.train.match_dist)?;
    let (packed, float) = ckpt.binary_weight_bytes();

    let mut text = report.to_key_values();
    let _ = writeln!(text, "checkpoint.binary_weight_bytes = {packed}");
    let _ = writeln!(text, "checkpoint.binary_weight_float_bytes = {float}");
    text.push_str(&accounting.to_key_values());
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("eval.txt"));
    write_file(&report_path, &text)?;

    print!("{}", report.to_table());
    println!(
        "Params {:.3} K | OPs {:.4} G at {}x{}",
        accounting.params() / 1e3,
        accounting.ops() / 1e9,
        cfg.net.input_size.0,
        cfg.net.input_size.1
    );
    println!("binary weights: {packed} bytes packed vs {float} bytes as f32");
    print!("{text}");
    Ok(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub channels: usize,
    pub exact_match: bool,
    pub packed_rate: f64,
    pub oracle_rate: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.packed_rate / self.oracle_rate
    }
}

/// Seconds per call, repeating until `min_time` has elapsed.
fn time_per_call(min_time: f64, mut f: impl FnMut()) -> f64 {
    let start = Instant::now();
    let mut calls = 0u32;
    loop {
        f();
        calls += 1;
        let t = start.elapsed().as_secs_f64();
        if t >= min_time {
            return t / f64::from(calls);
        }
    }
}

/// One benchmark configuration: outputs are compared for exact equality
/// before either kernel is timed. Rates are output elements per second.
pub fn bench_one(size: usize, channels: usize, min_time: f64, seed: u64) -> Result<BenchRow> {
    let spec = ConvSpec::same(channels, channels, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = FloatTensor::from_fn(&[channels, size, size], |_| rng.gen_range(-1.0..1.0));
    let w = FloatTensor::from_fn(&spec.weight_shape(), |_| rng.gen_range(-1.0..1.0));
    let (a_bits, w_bits) = (sign_quantize(&a)?, sign_quantize(&w)?);
    let (a_pm1, w_pm1) = (a.map(sign), w.map(sign));

    let packed = binary_conv2d(&a_bits, &w_bits, &spec)?;
    let oracle = float_pm1_conv2d_oracle(&a_pm1, &w_pm1, &spec)?;
    let exact_match = packed == oracle;

    let elements = packed.len() as f64;
    let packed_secs = time_per_call(min_time, || {
        std::hint::black_box(binary_conv2d(&a_bits, &w_bits, &spec).expect("checked above"));
    });
    let oracle_secs = time_per_call(min_time, || {
        std::hint::black_box(float_pm1_conv2d_oracle(&a_pm1, &w_pm1, &spec).expect("checked above"));
    });
    Ok(BenchRow {
        size,
        channels,
        exact_match,
        packed_rate: elements / packed_secs,
        oracle_rate: elements / oracle_secs,
    })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    if args.sizes.is_empty() || args.channels.is_empty() || args.sizes.contains(&0) || args.channels.contains(&0) {
        return Err(Error::Config("bench sizes and channels must be positive".into()));
    }
    println!("# k=3, stride 1, padding 1; rates are output elements per second");
    println!(
        "{:>6} {:>8} {:>11} {:>14} {:>14} {:>8}",
        "size", "c=n", "exact_match", "packed/s", "oracle/s", "speedup"
    );
    let mut rows = Vec::new();
    for &size in &args.sizes {
        for &channels in &args.channels {
            let row = bench_one(size, channels, args.min_time, args.seed)?;
            println!(
                "{:>6} {:>8} {:>11} {:>14.4e} {:>14.4e} {:>7.1}x",
                format!("{size}²"),
                channels,
                row.exact_match,
                row.packed_rate,
                row.oracle_rate,
                row.speedup()
            );
            if !row.exact_match {
                return Err(Error::InvalidInput(format!(
                    "packed and oracle outputs differ at size {size}, c=n={channels}"
                )));
            }
            if size >= 256 && channels >= 64 && row.speedup() < 2.0 {
                eprintln!(
                    "warning: speedup {:.2}x at {size}², c=n={channels} is below the expected 2x",
                    row.speedup()
                );
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn cmd_check(args: &CheckArgs) -> i32 {
    inject_sign_zero_fault(args.inject_sign_fault);
    let suites: Vec<Suite> = match args.suite {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for s in suites {
        let outcome = run_suite(s);
        let mark = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{mark} {:<11} {}", outcome.suite.name(), outcome.detail);
        if !outcome.passed {
            failed.push(outcome);
        }
    }
    inject_sign_zero_fault(false);
    match failed.first() {
        None => {
            println!("all suites passed");
            0
        }
        Some(first) => {
            eprintln!("suite `{}` failed: {}", first.suite.name(), first.detail);
            1
        }
    }
}
