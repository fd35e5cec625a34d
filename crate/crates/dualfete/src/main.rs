use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dualfete::config::{load_data, load_train_config, DataSource};
use dualfete::error::Result;
use dualfete::suite::{run_suite, SuiteName, SuiteOptions};
use dualfete::{manifest, report, run, selftest};
use dualfete_core::metrics::Perturbation;
use dualfete_core::synthdata::{synthetic_dataset, DataConfig};

#[derive(Parser)]
#[command(name = "dualfete", version, about = "Dual-teacher feedback training for semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbKind {
    Strong,
    Dropout,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write log.csv, config.echo.json and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// `synthetic:SEED` or a dataset directory; defaults to synthetic data seeded like the run.
        #[arg(long)]
        data: Option<DataSource>,
    },
    /// Evaluate a checkpoint on a test split and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: DataSource,
        #[arg(long, value_enum)]
        perturb: Option<PerturbKind>,
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// Dropout rate for dropout perturbation.
        #[arg(long, default_value_t = 0.2)]
        dropout_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side length of synthetic images; read from a sibling config.echo.json when absent.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Run a named ablation grid and write summary.csv.
    Suite {
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Tiny sizes, for checking the plumbing.
        #[arg(long)]
        quick: bool,
    },
    /// Run every oracle check; exits nonzero if any fails.
    Selftest,
    /// Export the synthetic dataset as a manifest directory.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Training images (labeled plus unlabeled).
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 0.6)]
        ambiguity: f64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        labeled_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Input resolution recorded next to a checkpoint by `train`.
fn sibling_resolution(checkpoint: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(checkpoint.parent()?.join(run::CONFIG_ECHO)).ok()?;
    let cfg = dualfete::config::parse_train_config(&text, checkpoint).ok()?;
    (cfg.net.height == cfg.net.width).then_some(cfg.net.height)
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train { config, out, seed, data } => {
            let mut cfg = load_train_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let source = data.unwrap_or(DataSource::Synthetic(cfg.seed));
            let dataset = load_data(&source, &cfg.net)?;
            let (_, history) = run::train_to_dir(&cfg, &dataset, &out)?;
            if let Some(last) = history.last() {
                eprintln!("step {}: student dice {:.4}, phi {:.4}, psi {:.4}", last.step, last.dice_test_student, last.dice_test_phi, last.dice_test_psi);
            }
            Ok(true)
        }
        Command::Eval { checkpoint, data, perturb, k, dropout_rate, seed, size } => {
            let dataset = match &data {
                DataSource::Synthetic(s) => {
                    let side = size.or_else(|| sibling_resolution(&checkpoint)).unwrap_or(DataConfig::default().height);
                    synthetic_dataset(&DataConfig { seed: *s, height: side, width: side, ..DataConfig::default() })?
                }
                DataSource::Dir(d) => manifest::import(d)?.0,
            };
            let perturb = perturb.map(|p| (if matches!(p, PerturbKind::Strong) { Perturbation::StrongAug } else { Perturbation::Dropout }, k));
            let rate = if matches!(perturb, Some((Perturbation::Dropout, _))) { dropout_rate } else { 0.0 };
            let rep = run::eval_checkpoint(&checkpoint, &dataset, perturb, rate, seed)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
            Ok(true)
        }
        Command::Suite { name, out, seeds, quick } => {
            let name: SuiteName = name.parse()?;
            let mut opts = if quick { SuiteOptions::quick() } else { SuiteOptions::desk() };
            if let Some(s) = seeds {
                opts.seeds = s;
            }
            let summary = run_suite(name, &opts, &out)?;
            eprintln!("{} rows written to {}", summary.rows.len(), out.join(report::SUMMARY).display());
            Ok(true)
        }
        Command::Selftest => {
            let checks = selftest::run_all()?;
            for c in &checks {
                println!("{c}");
            }
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::GenData { seed, n, n_test, ambiguity, size, labeled_ratio, out } => {
            let cfg = DataConfig { seed, n_train: n, n_test, height: size, width: size, ambiguity, labeled_ratio };
            let data = synthetic_dataset(&cfg)?;
            let m = manifest::export(&out, &data, 2)?;
            eprintln!("{} samples written to {}", m.samples.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
