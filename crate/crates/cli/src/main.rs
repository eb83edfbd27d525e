use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lbt_core::analyzer::{run_sweep, SweepSpec};
use lbt_core::bitwidth::{feasible, required_bits, AdvisorQuery, DEFAULT_ALPHA};
use lbt_core::data::{save_split, synth_blobs};
use lbt_core::trainer::{evaluate_checkpoint, Checkpoint, Payload, RunConfig, TrainSummary, Trainer};
use lbt_core::Error;

#[derive(Parser)]
#[command(name = "lbt", version, about = "Low-precision training lab: dynamic fixed point with lazy updates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a config file, or resume from a checkpoint.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// `key=value`, applied after the config file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue the run saved in this checkpoint.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the test split of an IDX directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Smallest gradient bit width at which softmax gradients survive quantization.
    Bitwidth {
        #[arg(long)]
        classes: u64,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Sweep softmax-gradient zeroing over class counts and bit widths.
    Analyze {
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        bits: Vec<u32>,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic Gaussian blobs as train/test IDX files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 3.0)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gzip the files.
        #[arg(long)]
        gzip: bool,
    },
    /// Print a checkpoint's header, records and config.
    InspectCheckpoint { path: PathBuf },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: Error) -> Failure {
    let code = match error {
        Error::Config(_) | Error::Invalid(_) | Error::BitWidth(_) => 2,
        _ => 1,
    };
    Failure { code, error }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, overrides, resume } => train(config.as_deref(), &overrides, resume.as_deref()),
        Command::Eval { checkpoint, data } => {
            let ckpt = Checkpoint::load(&checkpoint).map_err(runtime)?;
            let wide = ckpt.records.iter().any(|r| matches!(r.payload, Payload::F64 { .. }));
            let accuracy = if wide {
                evaluate_checkpoint::<f64>(&checkpoint, &data)
            } else {
                evaluate_checkpoint::<f32>(&checkpoint, &data)
            }
            .map_err(runtime)?;
            println!("accuracy={accuracy:.6}");
            Ok(())
        }
        Command::Bitwidth { classes, alpha } => {
            let q = AdvisorQuery::new(classes, alpha).map_err(usage)?;
            println!("required_bits={}", required_bits(&q));
            println!("bits,feasible");
            for bw in 2..=16 {
                println!("{bw},{}", feasible(bw, &q));
            }
            Ok(())
        }
        Command::Analyze { classes, bits, sigma, samples, seed, out } => {
            let spec = SweepSpec { class_sizes: classes, bit_widths: bits, logit_scale: sigma, samples, seed };
            spec.validate().map_err(usage)?;
            let result = run_sweep(&spec).map_err(runtime)?;
            result.write_csv(&out).map_err(runtime)?;
            print!("{}", result.to_csv());
            Ok(())
        }
        Command::GenData { out, classes, per_class, test_per_class, dim, spread, seed, gzip } => {
            let all = synth_blobs::<f32>(classes, per_class + test_per_class, dim, spread, seed).map_err(usage)?;
            let train_n = classes * per_class;
            let (x, y) = all.batch(&(train_n..all.len()).collect::<Vec<_>>());
            let test = lbt_core::data::Dataset::new(x, y, classes).map_err(runtime)?;
            std::fs::create_dir_all(&out).map_err(|e| runtime(Error::Io { path: out.clone(), source: e }))?;
            save_split(&out, "train", &all.head(train_n), gzip).map_err(runtime)?;
            save_split(&out, "test", &test, gzip).map_err(runtime)?;
            println!("train={train_n}");
            println!("test={}", test.len());
            Ok(())
        }
        Command::InspectCheckpoint { path } => {
            let ckpt = Checkpoint::load(&path).map_err(runtime)?;
            print!("{}", ckpt.summary());
            Ok(())
        }
    }
}

fn train(config: Option<&Path>, overrides: &[String], resume: Option<&Path>) -> Result<(), Failure> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::<f32>::resume(ckpt, overrides).map_err(usage)?,
        None => {
            let mut cfg = RunConfig::load(config.expect("clap requires --config without --resume")).map_err(usage)?;
            cfg.apply_overrides(overrides).map_err(usage)?;
            Trainer::<f32>::new(cfg).map_err(usage)?
        }
    };
    let summary = trainer.run().map_err(|error| Failure { code: 3, error })?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(s: &TrainSummary) {
    println!("steps={}", s.steps);
    println!("epochs={}", s.epochs_completed);
    if let Some(a) = s.final_accuracy() {
        println!("final_accuracy={a:.6}");
    }
    if let Some(a) = s.best_accuracy {
        println!("best_accuracy={a:.6}");
    }
    println!("stopped_early={}", s.stopped_early);
}
