// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! `eov-ledger` command line.
//!
//! Exit codes: 0 success, 1 ledger verification failure, 2 config or
//! argument error (and any other failure).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eov_ledger::bench::{self, BenchError};
use eov_ledger::config::{Config, ConfigError};
use eov_ledger::simnet::RunOptions;

#[derive(Debug, Parser)]
#[command(name = "eov-ledger", version, about = "Execute-order-validate ledger benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Network config file; the built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the workload seed.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Throughput and latency per maximum block size.
    BlocksizeSweep {
        #[command(flatten)]
        common: Common,
        /// Block sizes in MB, comma separated.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<f64>>,
    },
    /// Latency per transaction payload size.
    PayloadSweep {
        #[command(flatten)]
        common: Common,
        /// Payload sizes in KB, comma separated.
        #[arg(long = "payloads-kb", value_delimiter = ',')]
        payloads_kb: Option<Vec<u32>>,
    },
    /// Checks a ledger file's hash chain.
    Verify {
        ledger: PathBuf,
    },
    /// Honest throughput with and without unregistered attackers.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attackers: Option<u32>,
        /// Combined attacker proposals per second.
        #[arg(long = "attack-rate")]
        attack_rate: Option<f64>,
    },
    /// One run of the configured workload.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write the committed chain here.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Write per-transaction records here.
        #[arg(long = "tx-out")]
        tx_out: Option<PathBuf>,
    },
}

fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default_config()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), BenchError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(command: Command) -> Result<ExitCode, BenchError> {
    match command {
        Command::BlocksizeSweep { common, sizes } => {
            let config = load(common.config.as_deref())?;
            let sizes = sizes.unwrap_or_else(|| config.sweeps.block_sizes_mb.clone());
            let rows = bench::blocksize_sweep(&config, &sizes, common.seed)?;
            emit(common.out.as_deref(), &bench::sweep_csv(&rows)?)?;
            if let Some(peak) = bench::peak_throughput(&rows) {
                eprintln!(
                    "peak throughput {:.1} tx/s at {} MB, mean latency {:.1} ms",
                    peak.throughput_tps, peak.param_value, peak.mean_latency_ms
                );
            }
        }
        Command::PayloadSweep { common, payloads_kb } => {
            let config = load(common.config.as_deref())?;
            let payloads = payloads_kb.unwrap_or_else(|| config.sweeps.payloads_kb.clone());
            let rows = bench::payload_sweep(&config, &payloads, common.seed)?;
            emit(common.out.as_deref(), &bench::sweep_csv(&rows)?)?;
            eprintln!(
                "mean latency increase first to last point: {:.2}%",
                bench::relative_increase_pct(&rows)
            );
        }
        Command::Verify { ledger } => match bench::verify(&ledger) {
            Ok(blocks) => println!("ok: {blocks} blocks"),
            Err(err) => {
                match err.block() {
                    Some(block) => eprintln!("verification failed at block {block}: {err}"),
                    None => eprintln!("verification failed: {err}"),
                }
                return Ok(ExitCode::from(1));
            }
        },
        Command::Attack {
            common,
            attackers,
            attack_rate,
        } => {
            let config = load(common.config.as_deref())?;
            let attackers = attackers.unwrap_or(config.sweeps.attackers);
            let report = bench::attack(&config, attackers, attack_rate, common.seed)?;
            emit(common.out.as_deref(), &bench::sweep_csv(&report.rows())?)?;
            eprintln!(
                "honest throughput {:.1} -> {:.1} tx/s ({:.2}% loss); {} attacker proposals rejected, {} in blocks",
                report.baseline.throughput_tps(),
                report.attacked.throughput_tps(),
                report.throughput_loss_pct(),
                report.attacked.attacker_rejected,
                report.attacked.attacker_txs_in_blocks
            );
        }
        Command::Run { common, ledger, tx_out } => {
            let config = load(common.config.as_deref())?;
            let options = RunOptions {
                ledger_path: ledger,
                record_transactions: tx_out.is_some(),
            };
            let metrics = bench::run_once(&config, common.seed, &options)?;
            let seed = common.seed.unwrap_or(config.workload.seed);
            let row = bench::SweepRow::from_metrics("seed", seed as f64, &metrics);
            emit(common.out.as_deref(), &bench::sweep_csv(&[row])?)?;
            if let Some(path) = tx_out {
                std::fs::write(path, bench::tx_csv(&metrics.tx_records)?)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
