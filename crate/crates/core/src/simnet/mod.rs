// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Discrete-event simulation of a smart-home network.
//!
//! Devices issue proposals, endorsers simulate and sign them, the client
//! collects and submits envelopes, the orderer cuts blocks and a committing
//! peer validates them. Every stage costs simulated time from a
//! [`NetworkModel`]; the cryptography and state transitions are real.

mod calibration;
mod engine;
mod workload;

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::chaincode::{ChaincodeError, DeviceRecord};
use crate::clock::SimDuration;
use crate::endorsement::EndorsementPolicy;
use crate::ledger::{LedgerError, ValidationFlag};
use crate::membership::{Membership, MembershipError, Role};
use crate::ordering::OrderingError;

pub use calibration::{calibrate_envelope_sizes, default_fixture, envelope_sizes, EnvelopeCalibration, Fixture, CALIBRATION_TARGETS};
pub use engine::run;
pub use workload::{plan_attack, plan_honest, PlannedTx};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    Chaincode(#[from] ChaincodeError),
    #[error(transparent)]
    Membership(#[from] MembershipError),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::ConfigInvalid(msg.into())
}

/// Fractions of store, access and monitor transactions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxMix {
    pub store: f64,
    pub access: f64,
    pub monitor: f64,
}

impl TxMix {
    pub fn validate(&self) -> Result<(), SimError> {
        let parts = [self.store, self.access, self.monitor];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("transaction mix fractions must be non-negative"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("transaction mix must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    /// Honest devices drawn from the front of the network's device list.
    pub device_count: u32,
    pub tx_mix: TxMix,
    /// Store payload size.
    pub payload_bytes: u32,
    /// Size of the reading each group hub holds from genesis; access
    /// transactions return it.
    pub access_item_bytes: u32,
    /// Honest arrivals per simulated second (Poisson).
    pub arrival_rate: f64,
    pub duration: SimDuration,
    /// How long the pipeline may keep draining after arrivals stop.
    pub drain_limit: SimDuration,
    pub rng_seed: u64,
    /// Identities enrolled with the membership service but absent from the
    /// device registry.
    pub attacker_count: u32,
    /// Combined proposal rate of all attackers, per simulated second.
    pub attack_rate: f64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        self.tx_mix.validate()?;
        if !self.arrival_rate.is_finite() || self.arrival_rate < 0.0 {
            return Err(invalid("arrival_rate must be non-negative"));
        }
        if !self.attack_rate.is_finite() || self.attack_rate < 0.0 {
            return Err(invalid("attack_rate must be non-negative"));
        }
        if self.duration == SimDuration::ZERO {
            return Err(invalid("duration must be positive"));
        }
        if self.device_count == 0 {
            return Err(invalid("device_count must be at least 1"));
        }
        Ok(())
    }
}

/// Costs of the simulated stages. Per-byte figures are seconds per byte.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub hop_latency: SimDuration,
    pub per_byte_secs: f64,
    pub endorse_base: SimDuration,
    /// Cost of turning a proposal away (unknown or unauthorized caller).
    pub endorse_reject: SimDuration,
    /// Per byte of device data handled (stored payload or returned value).
    pub endorse_per_byte_secs: f64,
    /// Proposals one endorser works on at the same time.
    pub endorser_workers: u32,
    pub ordering_per_block: SimDuration,
    pub ordering_per_byte_secs: f64,
    /// Envelopes are turned away while this many cut blocks wait for
    /// consensus. Zero disables the limit.
    pub ordering_backlog_limit: u32,
    pub validation_per_block: SimDuration,
    pub validation_per_tx: SimDuration,
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [self.per_byte_secs, self.endorse_per_byte_secs, self.ordering_per_byte_secs];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(invalid("per-byte costs must be non-negative"));
        }
        if self.endorser_workers == 0 {
            return Err(invalid("endorser_workers must be at least 1"));
        }
        Ok(())
    }

    /// Smallest possible latency of a committed transaction.
    pub fn path_lower_bound(&self) -> SimDuration {
        self.hop_latency + self.hop_latency + self.endorse_base + self.validation_per_tx
    }
}

/// Identities, registry and policies shared by every run.
#[derive(Debug, Clone)]
pub struct Network {
    pub channel_id: String,
    pub membership: Membership,
    pub devices: Vec<DeviceRecord>,
    pub policies: Vec<(String, EndorsementPolicy)>,
    /// The peer that validates and commits blocks.
    pub committer: String,
}

impl Network {
    pub fn new(
        channel_id: impl Into<String>,
        membership: Membership,
        devices: Vec<DeviceRecord>,
        policies: Vec<(String, EndorsementPolicy)>,
        committer: impl Into<String>,
    ) -> Result<Self, SimError> {
        let net = Network {
            channel_id: channel_id.into(),
            membership,
            devices,
            policies,
            committer: committer.into(),
        };
        net.check()?;
        Ok(net)
    }

    fn check(&self) -> Result<(), SimError> {
        for device in &self.devices {
            match self.membership.get(&device.device_id) {
                Some(id) if id.role() == Role::Device => {}
                _ => return Err(invalid(format!("device `{}` has no device identity", device.device_id))),
            }
        }
        let known: BTreeMap<&str, &EndorsementPolicy> =
            self.policies.iter().map(|(id, p)| (id.as_str(), p)).collect();
        for device in &self.devices {
            if !known.contains_key(device.policy_id.as_str()) {
                return Err(invalid(format!(
                    "device `{}` references unknown policy `{}`",
                    device.device_id, device.policy_id
                )));
            }
        }
        for (id, policy) in &self.policies {
            policy.validate().map_err(|e| invalid(format!("policy `{id}`: {e}")))?;
            for principal in policy.principals() {
                match self.membership.get(&principal) {
                    Some(who) if who.role() == Role::Endorser => {}
                    _ => return Err(invalid(format!("policy `{id}` names non-endorser `{principal}`"))),
                }
            }
        }
        if self.membership.get(&self.committer).is_none() {
            return Err(invalid(format!("committer `{}` is not an identity", self.committer)));
        }
        Ok(())
    }

    /// Endorser ids in id order.
    pub fn endorsers(&self) -> Vec<String> {
        self.membership
            .with_role(Role::Endorser)
            .map(|i| i.id().to_owned())
            .collect()
    }
}

pub fn attacker_id(index: u32) -> String {
    format!("attacker-{index:03}")
}

/// Outputs that are not plain counters.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write the committed chain to this file.
    pub ledger_path: Option<PathBuf>,
    /// Keep one [`TxRecord`] per transaction that reached validation.
    pub record_transactions: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxRecord {
    pub tx_id: String,
    pub tx_type: &'static str,
    pub created_at_ms: f64,
    pub committed_at_ms: f64,
    pub flag: ValidationFlag,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub generated: u64,
    pub committed: u64,
    pub rejected_at_endorsement: u64,
    pub divergent_at_collection: u64,
    pub rejected_at_ordering: u64,
    pub invalid_at_validation: u64,
    pub pending: u64,
    pub attacker_generated: u64,
    pub attacker_rejected: u64,
    pub attacker_txs_in_blocks: u64,
    pub blocks: u64,
    pub block_bytes_total: u64,
    pub block_txs_total: u64,
    pub duration_secs: f64,
    /// End-to-end latencies of committed honest transactions, in commit
    /// order.
    pub latencies_ms: Vec<f64>,
    pub tx_records: Vec<TxRecord>,
    /// Digest of the final world state.
    pub state_digest: String,
}

impl Metrics {
    pub fn throughput_tps(&self) -> f64 {
        if self.duration_secs > 0.0 {
            self.committed as f64 / self.duration_secs
        } else {
            0.0
        }
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.latencies_ms.is_empty() {
            return 0.0;
        }
        self.latencies_ms.iter().sum::<f64>() / self.latencies_ms.len() as f64
    }

    /// Nearest-rank percentile, `q` in [0, 1].
    pub fn latency_percentile_ms(&self, q: f64) -> f64 {
        if self.latencies_ms.is_empty() {
            return 0.0;
        }
        let mut sorted = self.latencies_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = (q.clamp(0.0, 1.0) * sorted.len() as f64).ceil().max(1.0) as usize;
        sorted[rank - 1]
    }

    pub fn median_latency_ms(&self) -> f64 {
        self.latency_percentile_ms(0.5)
    }

    pub fn p95_latency_ms(&self) -> f64 {
        self.latency_percentile_ms(0.95)
    }

    pub fn mean_block_bytes(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.block_bytes_total as f64 / self.blocks as f64
        }
    }

    pub fn mean_block_txs(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.block_txs_total as f64 / self.blocks as f64
        }
    }

    /// Honest transactions accounted for by some outcome.
    pub fn accounted(&self) -> u64 {
        self.committed
            + self.rejected_at_endorsement
            + self.divergent_at_collection
            + self.rejected_at_ordering
            + self.invalid_at_validation
            + self.pending
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_use_nearest_rank() {
        let m = Metrics {
            latencies_ms: (1..=20).map(f64::from).collect(),
            ..Metrics::default()
        };
        assert_eq!(m.median_latency_ms(), 10.0);
        assert_eq!(m.p95_latency_ms(), 19.0);
        assert_eq!(m.mean_latency_ms(), 10.5);
        assert_eq!(Metrics::default().p95_latency_ms(), 0.0);
    }

    #[test]
    fn mix_must_sum_to_one() {
        let ok = TxMix { store: 0.5, access: 0.5, monitor: 0.0 };
        assert!(ok.validate().is_ok());
        let bad = TxMix { store: 0.5, access: 0.4, monitor: 0.0 };
        assert!(bad.validate().is_err());
    }
}
