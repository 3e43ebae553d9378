//! Experiment runner for part-descriptor mixing on the synthetic
//! two-modality benchmark.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure (including
//! failed gradcheck/oracle suites).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use partmix::error::Error;
use partmix::harness::{
    cmd_ablate, cmd_compare, cmd_eval, cmd_train, run_gradcheck, run_oracle, ExperimentConfig,
    Regularizer, SweepParam,
};

#[derive(Parser)]
#[command(name = "partmix", version, about = "Part-descriptor mixing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it under the default protocols.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write mixes.jsonl with the selected mixed samples per step.
        #[arg(long)]
        dump_mixes: bool,
    },
    /// Evaluate a parameter snapshot.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parameter snapshot; defaults to <out>/params.bin.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Sweep one hyper-parameter (b, m, or tau), one run per value.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Swept parameter: b, m, or tau.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Train several regularizers on identical data and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated regularizer names.
        #[arg(long, value_delimiter = ',')]
        regularizers: Vec<String>,
        /// Comma-separated run seeds (defaults to the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Finite-difference checks over every operation and the total loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Brute-force equivalence suites on seeded random instances.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_json(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train { common, dump_mixes } => {
            let config = load_config(&common)?;
            let record = cmd_train(&config, &common.out, dump_mixes)?;
            for report in &record.reports {
                println!(
                    "{} {}-shot: mAP {:.4}, CMC@1 {:.4}",
                    report.protocol_name,
                    report.shot_mode.name(),
                    report.map_score,
                    report.cmc_at(1).unwrap_or(f64::NAN)
                );
            }
            println!(
                "trained {} epochs in {:.1}s, artifacts in {}",
                record.epochs.len(),
                record.wall_clock_secs,
                common.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { common, params } => {
            let config = load_config(&common)?;
            let params = params.unwrap_or_else(|| common.out.join("params.bin"));
            let reports = cmd_eval(&config, &params, &common.out)?;
            for report in &reports {
                println!(
                    "{} {}-shot: mAP {:.4}, CMC@1 {:.4}",
                    report.protocol_name,
                    report.shot_mode.name(),
                    report.map_score,
                    report.cmc_at(1).unwrap_or(f64::NAN)
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { common, param, values } => {
            let config = load_config(&common)?;
            let param = SweepParam::parse(&param)?;
            if values.is_empty() {
                return Err(Error::Config {
                    field: "sweep.values".into(),
                    message: "at least one value required".into(),
                });
            }
            let rows = cmd_ablate(&config, param, &values, &common.out)?;
            println!("ablation over {} values, {} rows -> {}", values.len(), rows.len(), common.out.join("ablation.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { common, regularizers, seeds } => {
            let config = load_config(&common)?;
            let regs: Vec<Regularizer> = regularizers
                .iter()
                .map(|n| Regularizer::parse(n))
                .collect::<Result<_, _>>()?;
            if regs.is_empty() {
                return Err(Error::Config {
                    field: "compare.regularizers".into(),
                    message: "at least one regularizer required".into(),
                });
            }
            let seeds = if seeds.is_empty() { vec![config.seed] } else { seeds };
            let rows = cmd_compare(&config, &regs, &seeds, &common.out)?;
            println!(
                "compared {} regularizers x {} seeds, {} rows -> {}",
                regs.len(),
                seeds.len(),
                rows.len(),
                common.out.join("comparison.csv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { common, trials } => {
            let config = load_config(&common)?;
            let report = run_gradcheck(&config, trials)?;
            for e in &report.entries {
                println!(
                    "{}: max rel error {:.3e} -> {}",
                    e.op,
                    e.max_rel_error,
                    if e.passed { "pass" } else { "FAIL" }
                );
            }
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
            if report.all_passed() {
                println!("gradcheck: all {} ops passed over {} trials", report.entries.len(), report.trials);
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck: FAILURES present");
                Ok(ExitCode::from(2))
            }
        }
        Command::Oracle { common, cases } => {
            let config = load_config(&common)?;
            let report = run_oracle(&config, cases, config.seed)?;
            for e in &report.entries {
                println!(
                    "{}: {}/{} cases failed -> {}",
                    e.suite,
                    e.failures,
                    e.cases,
                    if e.failures == 0 { "pass" } else { "FAIL" }
                );
            }
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join("oracle.json"), serde_json::to_string_pretty(&report)?)?;
            if report.all_passed() {
                println!("oracle: all suites passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("oracle: FAILURES present");
                Ok(ExitCode::from(2))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
