use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use labo::cli::{self, CliError, ExperimentConfig, OUT_ENV};
use labo::data::load_csv;
use labo::verify::{Mutation, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "labo",
    version,
    about = "Label smoothing regularization experiments"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the numerical self-checks and print one line per check.
    Verify {
        /// 100-instance sweeps instead of 1000.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 20_230_601)]
        seed: u64,
        /// Deliberately break the closed form to confirm the checks notice.
        #[arg(long, hide = true)]
        inject_exponent_inversion: bool,
    },
    /// Train every mode/seed pair from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Shorter runs: a tenth of the configured steps.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        tau: Option<f64>,
        /// Fixed LABO weight instead of the adaptive rule.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Train the distillation teacher named by `teacher_checkpoint`.
    Teacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print every intermediate of the optimal smoothing for one logit vector.
    Smooth {
        /// Comma separated, e.g. "2,1,0".
        #[arg(long, allow_hyphen_values = true)]
        logits: String,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Confidence histogram of a checkpoint on a dataset's test split.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config whose dataset is used.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        config: Option<PathBuf>,
        /// CSV dataset instead of a config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "label")]
        label_column: String,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
}

fn json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))
}

fn run(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::Verify {
            quick,
            seed,
            inject_exponent_inversion,
        } => {
            let opts = VerifyOptions {
                quick,
                seed,
                mutation: inject_exponent_inversion.then_some(Mutation::ExponentInversion),
            };
            let (results, status) = cli::cmd_verify(&opts);
            for r in &results {
                println!("{r}");
            }
            status
        }
        Command::Train {
            config,
            out,
            seed,
            quick,
            tau,
            alpha,
            rho,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if quick {
                cfg.train.steps = (cfg.train.steps / 10).max(1);
                cfg.train.warmup = cfg.train.warmup.map(|w| w / 10);
                cfg.train.eval_every = cfg.train.eval_every.min(cfg.train.steps);
            }
            let reg = &mut cfg.train.regularizer;
            if let Some(t) = tau {
                reg.tau = t;
            }
            match (alpha, rho) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Usage("--alpha and --rho are exclusive".into()))
                }
                (Some(a), None) => reg.alpha_rule = labo::AlphaRule::Fixed { alpha: a },
                (None, Some(r)) => reg.alpha_rule = labo::AlphaRule::Adaptive { rho: r },
                (None, None) => {}
            }
            cfg.train
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let out = cfg.output_dir(out.as_deref());
            let summary = cli::cmd_train(&cfg, &out)?;
            print!("{}", summary.table());
            println!("summary written to {}", out.join("summary.json").display());
            let failed: Vec<String> = summary
                .runs
                .iter()
                .filter_map(|r| {
                    r.error
                        .as_ref()
                        .map(|e| format!("{} seed {}: {e}", r.mode, r.seed))
                })
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Failed(format!(
                    "{} run(s) failed:\n{}",
                    failed.len(),
                    failed.join("\n")
                )))
            }
        }
        Command::Teacher { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = cfg.output_dir(out.as_deref());
            let path = cli::cmd_teacher(&cfg, &out, seed)?;
            println!("teacher written to {}", path.display());
            Ok(())
        }
        Command::Smooth {
            logits,
            target,
            tau,
            alpha,
            rho,
        } => {
            let z = cli::parse_logits(&logits)?;
            let report = cli::cmd_smooth(&z, target, tau, alpha, rho)?;
            println!("{}", json(&report)?);
            Ok(())
        }
        Command::Hist {
            checkpoint,
            config,
            data,
            label_column,
            out,
        } => {
            let dataset = match (config, data) {
                (Some(c), _) => ExperimentConfig::load(&c)?.load_dataset()?,
                (None, Some(d)) => load_csv(Path::new(&d), &label_column)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", d.display())))?,
                (None, None) => {
                    return Err(CliError::Usage(
                        "either --config or --data is required".into(),
                    ))
                }
            };
            let out = out.unwrap_or_else(|| PathBuf::from("hist"));
            let report = cli::cmd_hist(&checkpoint, &dataset, &out)?;
            println!(
                "accuracy {:.4}  mean confidence {:.4}  mean entropy {:.4}",
                report.accuracy, report.mean_confidence, report.mean_entropy
            );
            println!(
                "histogram written to {}",
                out.join("histogram.json").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
