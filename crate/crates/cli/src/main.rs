use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use semalign::losses::Divergence;
use semalign::sampling::ReferenceDistribution;
use semalign::trainer::Mode;
use semalign_cli::commands::write_report;
use semalign_cli::{
    cmd_eval, cmd_gen_data, cmd_sample_analysis, cmd_train, selfcheck, EvalArgs, Overrides,
    ReportFormat, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "semalign",
    version,
    about = "Semi-supervised multimodal alignment on synthetic data"
)]
struct Cli {
    /// Run config (TOML). Missing sections take their defaults.
    #[arg(long, short, global = true, env = "SEMALIGN_CONFIG")]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum DivArg {
    Kl,
    Mse,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    Uniform,
    GaussianMixture,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-modality dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (overrides `data.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a two-stream model and write metrics and checkpoints.
    Train {
        /// Dataset file; generated from `[data]` when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory. Defaults to `<out_dir>/<mode>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        sdd_rd: Option<OnOff>,
        #[arg(long, value_enum)]
        sdd_div: Option<DivArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Recall@k of a checkpoint on a dataset's test pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate even if the config hash does not match.
        #[arg(long)]
        force: bool,
    },
    /// Batch-size sweep of the representativeness gap, as CSV.
    SampleAnalysis {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum)]
        reference: Option<ReferenceArg>,
    },
    /// Gradient, oracle and invariant checks; exits nonzero on any failure.
    Selfcheck {
        /// Perturb one analytic gradient to confirm the check catches it.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: semalign::Error| e.to_string())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { out, seed } => {
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let d = cmd_gen_data(&cfg, &out)?;
            eprintln!(
                "wrote {} ({} pairs, {}+{} unpaired, {} test)",
                out.display(),
                d.n_pairs(),
                d.unpaired_a.rows(),
                d.unpaired_b.rows(),
                d.test_a.rows()
            );
        }
        Command::Train {
            data,
            out,
            mode,
            sdd_rd,
            sdd_div,
            seed,
            epochs,
        } => {
            let ov = Overrides {
                seed,
                epochs,
                mode,
                sdd_rd: sdd_rd.map(|x| matches!(x, OnOff::On)),
                sdd_div: sdd_div.map(|d| match d {
                    DivArg::Kl => Divergence::Kl,
                    DivArg::Mse => Divergence::Mse,
                }),
            };
            ov.apply(&mut cfg)?;
            let run_dir = out.unwrap_or_else(|| {
                let name = mode.map_or("run", Mode::name);
                cfg.out_dir.join(format!("{name}-seed{}", cfg.seed))
            });
            let s = cmd_train(&cfg, data.as_deref(), &run_dir)?;
            if let Some(last) = s.history.last() {
                let recalls: Vec<String> = last
                    .ks
                    .iter()
                    .map(|&k| format!("R@{k} {:.4}", last.mean_recall(k).unwrap_or(f64::NAN)))
                    .collect();
                eprintln!("epoch {}: {}", last.epoch, recalls.join(", "));
            }
            eprintln!("run written to {}", s.run_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            ks,
            format,
            out,
            force,
        } => {
            let args = EvalArgs {
                checkpoint,
                data,
                ks,
                config: cli.config.clone(),
                force,
            };
            let report = cmd_eval(&args)?;
            let queries = semalign::data::load(&args.data)?.test_a.rows();
            let format = match format {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Csv => ReportFormat::Csv,
            };
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p)
                        .with_context(|| format!("creating {}", p.display()))?;
                    write_report(&report, queries, format, io::BufWriter::new(f))?;
                }
                None => write_report(&report, queries, format, io::stdout().lock())?,
            }
        }
        Command::SampleAnalysis {
            out,
            trials,
            reference,
        } => {
            if let Some(t) = trials {
                cfg.sweep.trials = t;
            }
            if let Some(r) = reference {
                cfg.sweep.reference = match r {
                    ReferenceArg::Uniform => ReferenceDistribution::Uniform,
                    ReferenceArg::GaussianMixture => ReferenceDistribution::GaussianMixture,
                };
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("sweep.csv"));
            let rows = cmd_sample_analysis(&cfg, &out)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Selfcheck {
            inject_fault,
            seeds,
        } => {
            let report = selfcheck::run(&selfcheck::Options {
                seeds,
                inject_fault,
            })?;
            report.write_table(io::stdout().lock())?;
            io::stdout().flush()?;
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
