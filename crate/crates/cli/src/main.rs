use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esmfl_core::federation::{
    load_data, run_experiment_with, DatasetKind, ExperimentConfig, Mode, RoundMetrics,
};
use esmfl_core::report::{write_transcript, ExperimentReport};

#[derive(Parser)]
#[command(name = "esmfl", version, about = "Federated learning with enclave aggregation and ADMM pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write rounds.csv and summary.txt
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Check a configuration without running it
    Validate {
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    /// Experiment config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total round budget, warm-up included
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    clients_per_round: Option<usize>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                ExperimentConfig::from_ini_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(rounds) = self.rounds {
            cfg.set_total_rounds(rounds);
        }
        if let Some(n) = self.clients {
            cfg.num_clients = n;
        }
        if let Some(n) = self.clients_per_round {
            cfg.clients_per_round = n;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = std::env::var_os("ESMFL_DATA_DIR") {
        return PathBuf::from(dir);
    }
    match cfg.dataset {
        DatasetKind::Cifar10 => PathBuf::from("data/cifar10"),
        _ => PathBuf::from("data/mnist"),
    }
}

fn progress(m: &RoundMetrics) {
    eprintln!(
        "round {:>3} {:<15} acc {:.4} keep {:.4} up {:>9} B total {:.2} s",
        m.round,
        m.phase.to_string(),
        m.accuracy,
        m.keep_fraction,
        m.bytes_up,
        m.times.total
    );
}

fn run(cfg: ExperimentConfig, out: &Path) -> ExitCode {
    let dir = data_dir(&cfg);
    let data = match load_data(&cfg, &dir) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: loading data from {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    };
    match run_experiment_with(&cfg, &data, progress) {
        Ok(outcome) => {
            let report = match ExperimentReport::new(cfg, outcome.metrics, outcome.compression_rate) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            if let Err(e) =
                report.write(out).and_then(|_| write_transcript(&outcome.transcript.to_text(), out))
            {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
            print!("{}", report.summary.to_text());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            if !err.completed.is_empty() {
                let density = err.completed.last().map_or(1.0, |m| m.global_density);
                match ExperimentReport::new(cfg, err.completed, 1.0 / density).and_then(|r| r.write(out)) {
                    Ok(()) => eprintln!("partial metrics written to {}", out.display()),
                    Err(e) => eprintln!("error: writing partial metrics: {e}"),
                }
            }
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { overrides, out } => match overrides.load() {
            Ok(cfg) => run(cfg, &out),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Validate { overrides } => match overrides.load() {
            Ok(cfg) => {
                println!(
                    "ok: {} on {}, {} clients ({} per round), {} rounds, mode {}",
                    cfg.arch,
                    cfg.dataset,
                    cfg.num_clients,
                    cfg.clients_per_round,
                    cfg.total_rounds(),
                    cfg.mode
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
