use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mcrec_cli::commands;
use mcrec_cli::config::split_overrides;
use mcrec_cli::matrix::{aggregate_csv, run_matrix};
use mcrec_cli::{Ablations, CliError, CliResult, RunConfig};
use mcrec_core::data::Partition;
use mcrec_core::tune::Regime;

/// Multi-center medication recommendation pipeline.
///
/// Any `--section.key=value` argument (or `--seed=`, `--seeds=`, `--jobs=`,
/// `--output_root=`) overrides the configuration file. Outputs go under
/// `output_root`, which defaults to `$MCREC_OUTPUT_ROOT`, then `runs`.
#[derive(Parser, Debug)]
#[command(name = "mcrec", version)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset (or ingest `ingest.records_file`).
    GenData,
    /// Record-count histogram and pairwise prescription divergence.
    Analyze {
        /// Dataset directory; defaults to `<output_root>/data`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Stage 1: pretrain the shared encoder on all centers.
    Pretrain {
        #[command(flatten)]
        ablations: Ablations,
    },
    /// Stage 2: per-center tuning under one regime.
    Tune {
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        #[command(flatten)]
        ablations: Ablations,
    },
    /// Recommend medications for records given as JSON lines.
    Infer {
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// One record as a JSON object.
        #[arg(long, conflicts_with = "input")]
        record: Option<String>,
        /// JSON Lines file of records.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Serve every record with this center's model.
        #[arg(long)]
        center: Option<String>,
        #[command(flatten)]
        ablations: Ablations,
    },
    /// Score tuned stores; all present stores when no regime is given.
    Evaluate {
        #[arg(long, value_parser = parse_regime)]
        regime: Vec<Regime>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        partition: Split,
        #[command(flatten)]
        ablations: Ablations,
    },
    /// Every seed × regime, with mean ± std tables.
    Matrix {
        #[command(flatten)]
        ablations: Ablations,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Validation,
    Test,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse::<Regime>().map_err(|e| e.to_string())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> CliResult<String> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), overrides)?;
    let ablate = |a: &Ablations, cfg: &mut RunConfig| -> CliResult<()> {
        a.apply(cfg);
        cfg.validate()
    };
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Analyze { dataset } => commands::analyze(&cfg, dataset.as_deref()),
        Command::Pretrain { ablations } => {
            ablate(&ablations, &mut cfg)?;
            Ok(commands::pretrain(&cfg)?.1)
        }
        Command::Tune { regime, ablations } => {
            ablate(&ablations, &mut cfg)?;
            if let Some(r) = regime {
                cfg.tune.regime = r;
            }
            Ok(commands::tune(&cfg)?.2)
        }
        Command::Infer {
            regime,
            record,
            input,
            center,
            ablations,
        } => {
            ablate(&ablations, &mut cfg)?;
            let text = match (record, input) {
                (Some(r), _) => r,
                (None, Some(p)) => std::fs::read_to_string(&p).map_err(|e| CliError::Io(p, e))?,
                (None, None) => return Err(CliError::Config("infer needs --record or --input".into())),
            };
            commands::infer_cmd(&cfg, regime.unwrap_or(cfg.tune.regime), &text, center.as_deref())
        }
        Command::Evaluate {
            regime,
            partition,
            ablations,
        } => {
            ablate(&ablations, &mut cfg)?;
            let part = match partition {
                Split::Validation => Partition::Validation,
                Split::Test => Partition::Test,
            };
            Ok(commands::evaluate_cmd(&cfg, &regime, part)?.1)
        }
        Command::Matrix { ablations } => {
            ablate(&ablations, &mut cfg)?;
            let out = run_matrix(&cfg)?;
            let mut msg = aggregate_csv(&out.aggregate);
            if !out.resumed.is_empty() {
                msg.push_str(&format!("resumed; skipped completed seeds {:?}\n", out.resumed));
            }
            Ok(msg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(msg) => {
            print!("{msg}");
            if !msg.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
