// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Experiment drivers behind the CLI: sweeps, attack comparison and CSV
//! output.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::ledger::{verify_chain, ChainError};
use crate::simnet::{self, Metrics, RunOptions, SimError, TxRecord};

/// First line of every CSV file written here.
pub const CSV_VERSION_LINE: &str = "# eov-ledger v1";

const BYTES_PER_MB: f64 = 1_048_576.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub sweep_param: String,
    pub param_value: f64,
    pub throughput_tps: f64,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub generated: u64,
    pub committed: u64,
    /// Turned away at endorsement, honest and attacker proposals alike.
    pub rejected: u64,
    pub invalid: u64,
    pub divergent: u64,
    pub ordering_rejected: u64,
    pub pending: u64,
    pub attacker_txs_in_blocks: u64,
    pub blocks: u64,
    pub mean_block_bytes: f64,
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

impl SweepRow {
    pub fn from_metrics(sweep_param: &str, param_value: f64, m: &Metrics) -> Self {
        SweepRow {
            sweep_param: sweep_param.to_owned(),
            param_value,
            throughput_tps: round3(m.throughput_tps()),
            mean_latency_ms: round3(m.mean_latency_ms()),
            median_latency_ms: round3(m.median_latency_ms()),
            p95_latency_ms: round3(m.p95_latency_ms()),
            generated: m.generated,
            committed: m.committed,
            rejected: m.rejected_at_endorsement + m.attacker_rejected,
            invalid: m.invalid_at_validation,
            divergent: m.divergent_at_collection,
            ordering_rejected: m.rejected_at_ordering,
            pending: m.pending,
            attacker_txs_in_blocks: m.attacker_txs_in_blocks,
            blocks: m.blocks,
            mean_block_bytes: round3(m.mean_block_bytes()),
        }
    }
}

fn with_seed(config: &Config, seed: Option<u64>) -> Config {
    let mut config = config.clone();
    if let Some(seed) = seed {
        config.workload.seed = seed;
    }
    config
}

/// One run per block size (in MB), everything else from `config`.
pub fn blocksize_sweep(config: &Config, sizes_mb: &[f64], seed: Option<u64>) -> Result<Vec<SweepRow>, BenchError> {
    if sizes_mb.is_empty() || sizes_mb.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(BenchError::InvalidArgument("block sizes must be a non-empty list of positive values".into()));
    }
    let config = with_seed(config, seed);
    let net = config.network()?;
    let workload = config.workload_spec();
    let model = config.network_model();
    let mut rows = Vec::with_capacity(sizes_mb.len());
    for &mb in sizes_mb {
        let mut ordering = config.ordering_config();
        ordering.max_block_bytes = (mb * BYTES_PER_MB).round() as u64;
        let metrics = simnet::run(&net, &workload, &model, &ordering, &RunOptions::default())?;
        rows.push(SweepRow::from_metrics("block_size_mb", mb, &metrics));
    }
    Ok(rows)
}

/// One run per payload size (in KB) with the `[payload_sweep]` overrides.
pub fn payload_sweep(config: &Config, payloads_kb: &[u32], seed: Option<u64>) -> Result<Vec<SweepRow>, BenchError> {
    if payloads_kb.is_empty() {
        return Err(BenchError::InvalidArgument("payload list is empty".into()));
    }
    let config = with_seed(config, seed);
    let net = config.network()?;
    let model = config.network_model();
    let mut rows = Vec::with_capacity(payloads_kb.len());
    for &kb in payloads_kb {
        let (workload, ordering) = config.payload_point(kb);
        let metrics = simnet::run(&net, &workload, &model, &ordering, &RunOptions::default())?;
        rows.push(SweepRow::from_metrics("payload_kb", f64::from(kb), &metrics));
    }
    Ok(rows)
}

/// Relative change of mean latency from the first row to the last, in
/// percent.
pub fn relative_increase_pct(rows: &[SweepRow]) -> f64 {
    match (rows.first(), rows.last()) {
        (Some(first), Some(last)) if first.mean_latency_ms > 0.0 => {
            (last.mean_latency_ms - first.mean_latency_ms) / first.mean_latency_ms * 100.0
        }
        _ => 0.0,
    }
}

/// The row with the highest throughput; the first one on ties.
pub fn peak_throughput(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter()
        .fold(None, |best: Option<&SweepRow>, r| match best {
            Some(b) if b.throughput_tps >= r.throughput_tps => Some(b),
            _ => Some(r),
        })
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub attackers: u32,
    pub attack_rate: f64,
    pub baseline: Metrics,
    pub attacked: Metrics,
}

impl AttackReport {
    /// Honest throughput lost to the attack, in percent of the baseline.
    pub fn throughput_loss_pct(&self) -> f64 {
        let base = self.baseline.throughput_tps();
        if base == 0.0 {
            return 0.0;
        }
        (base - self.attacked.throughput_tps()) / base * 100.0
    }

    pub fn rows(&self) -> Vec<SweepRow> {
        vec![
            SweepRow::from_metrics("attackers", 0.0, &self.baseline),
            SweepRow::from_metrics("attackers", f64::from(self.attackers), &self.attacked),
        ]
    }
}

/// Runs the default workload without and with `attackers` flooding store
/// proposals. `attack_rate` defaults to the configured multiple of the
/// honest rate.
pub fn attack(config: &Config, attackers: u32, attack_rate: Option<f64>, seed: Option<u64>) -> Result<AttackReport, BenchError> {
    let config = with_seed(config, seed);
    let net = config.network()?;
    let model = config.network_model();
    let ordering = config.ordering_config();
    let mut workload = config.workload_spec();
    workload.attacker_count = 0;
    workload.attack_rate = 0.0;
    let baseline = simnet::run(&net, &workload, &model, &ordering, &RunOptions::default())?;
    let rate = attack_rate.unwrap_or(config.sweeps.attack_rate_multiplier * workload.arrival_rate);
    workload.attacker_count = attackers;
    workload.attack_rate = if attackers == 0 { 0.0 } else { rate };
    let attacked = simnet::run(&net, &workload, &model, &ordering, &RunOptions::default())?;
    Ok(AttackReport {
        attackers,
        attack_rate: workload.attack_rate,
        baseline,
        attacked,
    })
}

/// A single run with the configured workload.
pub fn run_once(config: &Config, seed: Option<u64>, options: &RunOptions) -> Result<Metrics, BenchError> {
    let config = with_seed(config, seed);
    let net = config.network()?;
    Ok(simnet::run(
        &net,
        &config.workload_spec(),
        &config.network_model(),
        &config.ordering_config(),
        options,
    )?)
}

/// Checks a ledger file; returns its block count.
pub fn verify(path: &Path) -> Result<u64, ChainError> {
    verify_chain(&std::fs::read(path)?)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, BenchError> {
    let mut out = Vec::new();
    out.extend_from_slice(CSV_VERSION_LINE.as_bytes());
    out.push(b'\n');
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    writer.into_inner().map_err(|e| BenchError::Io(e.into_error()))
}

/// Sweep rows as CSV, header comment first.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, BenchError> {
    Ok(String::from_utf8(csv_bytes(rows)?).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct TxRow<'a> {
    tx_id: &'a str,
    #[serde(rename = "type")]
    tx_type: &'a str,
    created_at_ms: f64,
    committed_at_ms: f64,
    flag: &'a str,
}

/// Per-transaction records as CSV.
pub fn tx_csv(records: &[TxRecord]) -> Result<String, BenchError> {
    let rows: Vec<TxRow<'_>> = records
        .iter()
        .map(|r| TxRow {
            tx_id: &r.tx_id,
            tx_type: r.tx_type,
            created_at_ms: round3(r.created_at_ms),
            committed_at_ms: round3(r.committed_at_ms),
            flag: r.flag.as_str(),
        })
        .collect();
    Ok(String::from_utf8(csv_bytes(&rows)?).expect("csv output is utf-8"))
}
