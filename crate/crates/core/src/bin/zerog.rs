use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use zerog::loss::random_gradient_checks;
use zerog::pipeline::{run_ablation, run_inference, run_pretrain, sample_stats, ExperimentConfig};
use zerog::synth::{generate_synthetic, SynthSpec};
use zerog::{Error, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "zerog", version, about = "Zero-shot node classification across text-attributed graphs")]
struct Cli {
    /// Output format for results printed to stdout.
    #[arg(long, value_enum, global = true, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train the adapter on the source datasets.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the target datasets.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the full model and each ablation variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report pre-training set statistics per source dataset.
    SampleStats {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write synthetic datasets described by a TOML spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Compare analytic gradients with finite differences on random problems.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ZEROG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ZEROG_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(path)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let json = cli.format == Format::Json;
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = load_config(&config)?;
            let summary = run_pretrain(&cfg)?;
            if json {
                print_json(&summary);
            } else {
                println!("checkpoint:           {}", summary.checkpoint.display());
                println!("training log:         {}", summary.train_log.display());
                println!("subgraphs:            {}", summary.subgraphs);
                println!("steps:                {}", summary.steps);
                println!("adapted matrices:     {}", summary.adapted_matrices);
                println!("trainable parameters: {}", summary.trainable_parameters);
            }
        }
        Command::Infer { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let report = run_inference(&cfg, &checkpoint)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.table());
            }
        }
        Command::Ablate { config } => {
            let cfg = load_config(&config)?;
            let table = run_ablation(&cfg)?;
            fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
            let path = cfg.output_dir.join("ablation.json");
            fs::write(&path, serde_json::to_string_pretty(&table).expect("serializes")).map_err(|e| Error::io(&path, e))?;
            let text = cfg.output_dir.join("ablation.txt");
            fs::write(&text, table.table()).map_err(|e| Error::io(&text, e))?;
            if json {
                print_json(&table);
            } else {
                print!("{}", table.table());
            }
        }
        Command::SampleStats { config } => {
            let cfg = load_config(&config)?;
            let stats = sample_stats(&cfg)?;
            if json {
                print_json(&stats);
            } else {
                println!("{:<24} {:>10} {:>10} {:>10} {:>8}", "dataset", "candidates", "too_large", "filtered", "kept");
                for s in &stats {
                    println!(
                        "{:<24} {:>10} {:>10} {:>10} {:>8}",
                        s.dataset, s.candidates, s.rejected_size, s.rejected_filter, s.kept
                    );
                    let hist: Vec<String> = s.size_histogram.iter().map(|(size, n)| format!("{size}:{n}")).collect();
                    println!("  sizes {}", hist.join(" "));
                }
            }
        }
        Command::Synth { spec } => {
            let spec = SynthSpec::from_file(&spec)?;
            let dirs = generate_synthetic(&spec)?;
            if json {
                print_json(&dirs);
            } else {
                for d in dirs {
                    println!("{}", d.display());
                }
            }
        }
        Command::Gradcheck { seed, instances, step } => {
            if !(step > 0.0) {
                return Err(Error::Config("--step must be positive".into()));
            }
            let errors = random_gradient_checks(seed, instances, step)?;
            let worst = errors.iter().copied().fold(0.0, f64::max);
            let passed = worst < GRADCHECK_TOLERANCE;
            if json {
                #[derive(Serialize)]
                struct Out<'a> {
                    seed: u64,
                    errors: &'a [f64],
                    max_relative_error: f64,
                    tolerance: f64,
                    passed: bool,
                }
                print_json(&Out {
                    seed,
                    errors: &errors,
                    max_relative_error: worst,
                    tolerance: GRADCHECK_TOLERANCE,
                    passed,
                });
            } else {
                for (i, e) in errors.iter().enumerate() {
                    println!("instance {i:>3}: max relative error {e:.3e}");
                }
                println!("worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e}): {}", if passed { "ok" } else { "FAILED" });
            }
            if !passed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
