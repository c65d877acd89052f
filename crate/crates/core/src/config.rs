// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Network config files.
//!
//! A config declares identities, policies, devices (listed one by one or
//! generated by a `[fleet]` table), the ordering service, the cost model and
//! workload defaults. See `config/default.toml` for the shipped values.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode::DeviceRecord;
use crate::clock::SimDuration;
use crate::endorsement::{EndorsementPolicy, PolicyError};
use crate::membership::{seed_from_label, Membership, MembershipError, Role};
use crate::ordering::OrderingConfig;
use crate::simnet::{Network, NetworkModel, SimError, TxMix, WorkloadSpec};

/// The shipped default config.
pub const DEFAULT_CONFIG: &str = include_str!("../../../config/default.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("policy `{id}`: {source}")]
    Policy { id: String, source: PolicyError },
    #[error(transparent)]
    Membership(#[from] MembershipError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityEntry {
    pub id: String,
    pub role: Role,
    /// 32-byte hex seed. Derived from the id when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub id: String,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEntry {
    pub device_id: String,
    pub owner_id: String,
    pub device_type: String,
    pub policy_id: String,
    pub shared_key_id: String,
}

impl From<&DeviceEntry> for DeviceRecord {
    fn from(d: &DeviceEntry) -> Self {
        DeviceRecord {
            device_id: d.device_id.clone(),
            owner_id: d.owner_id.clone(),
            device_type: d.device_type.clone(),
            policy_id: d.policy_id.clone(),
            shared_key_id: d.shared_key_id.clone(),
        }
    }
}

/// Generated devices `{prefix}00000`, `{prefix}00001`, ... Consecutive runs
/// of `group_size` devices share a key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    pub count: u32,
    pub prefix: String,
    pub owner: String,
    pub device_types: Vec<String>,
    pub policy_id: String,
    pub group_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingSection {
    pub max_block_bytes: u64,
    pub max_block_txs: u32,
    pub batch_timeout_ms: f64,
    pub reader_acl: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub committer: String,
    pub hop_latency_ms: f64,
    pub per_byte_secs: f64,
    pub endorse_base_ms: f64,
    pub endorse_reject_ms: f64,
    pub endorse_per_byte_secs: f64,
    pub endorser_workers: u32,
    pub ordering_per_block_ms: f64,
    pub ordering_per_byte_secs: f64,
    pub ordering_backlog_limit: u32,
    pub validation_per_block_ms: f64,
    pub validation_per_tx_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub device_count: u32,
    pub store: f64,
    pub access: f64,
    pub monitor: f64,
    pub payload_bytes: u32,
    pub access_item_bytes: u32,
    pub arrival_rate: f64,
    pub duration_secs: f64,
    pub drain_limit_secs: f64,
    pub seed: u64,
    pub attacker_count: u32,
    pub attack_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub block_sizes_mb: Vec<f64>,
    pub payloads_kb: Vec<u32>,
    /// Attackers used by the `attack` command when none are given.
    pub attackers: u32,
    /// Combined attack rate as a multiple of the honest arrival rate.
    pub attack_rate_multiplier: f64,
}

/// Overrides applied to the workload and ordering service for the payload
/// sweep. Each point sets both the store payload and the access item to the
/// point's size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadSweepSection {
    pub device_count: u32,
    pub arrival_rate: f64,
    pub duration_secs: f64,
    pub max_block_bytes: u64,
    pub batch_timeout_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub channel_id: String,
    #[serde(default)]
    pub identities: Vec<IdentityEntry>,
    #[serde(default)]
    pub policies: Vec<PolicyEntry>,
    #[serde(default)]
    pub devices: Vec<DeviceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleet: Option<FleetSection>,
    pub ordering: OrderingSection,
    pub network: NetworkSection,
    pub workload: WorkloadSection,
    pub sweeps: SweepSection,
    pub payload_sweep: PayloadSweepSection,
}

fn ms(v: f64) -> SimDuration {
    SimDuration::from_secs_f64(v / 1000.0)
}

fn decode_seed(id: &str, hex_seed: &str) -> Result<[u8; 32], ConfigError> {
    let bytes = hex::decode(hex_seed).map_err(|e| ConfigError::Invalid(format!("seed of `{id}`: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| ConfigError::Invalid(format!("seed of `{id}` must be 32 bytes")))
}

impl Config {
    pub fn default_config() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("shipped config is valid")
    }

    /// Parses and checks cross references.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.network()?;
        config.validate_sections()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    fn validate_sections(&self) -> Result<(), ConfigError> {
        let n = &self.network;
        let times = [
            ("ordering.batch_timeout_ms", self.ordering.batch_timeout_ms),
            ("network.hop_latency_ms", n.hop_latency_ms),
            ("network.endorse_base_ms", n.endorse_base_ms),
            ("network.endorse_reject_ms", n.endorse_reject_ms),
            ("network.ordering_per_block_ms", n.ordering_per_block_ms),
            ("network.validation_per_block_ms", n.validation_per_block_ms),
            ("network.validation_per_tx_ms", n.validation_per_tx_ms),
            ("workload.duration_secs", self.workload.duration_secs),
            ("workload.drain_limit_secs", self.workload.drain_limit_secs),
            ("payload_sweep.duration_secs", self.payload_sweep.duration_secs),
            ("payload_sweep.batch_timeout_ms", self.payload_sweep.batch_timeout_ms),
        ];
        for (name, value) in times {
            if !value.is_finite() || value < 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be a non-negative number")));
            }
        }
        self.ordering_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.network_model().validate()?;
        self.workload_spec().validate()?;
        if self.sweeps.block_sizes_mb.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(ConfigError::Invalid("block sizes must be positive".into()));
        }
        let devices = self.device_records().len() as u32;
        for (what, count) in [("workload", self.workload.device_count), ("payload_sweep", self.payload_sweep.device_count)] {
            if count > devices {
                return Err(ConfigError::Invalid(format!("{what} uses {count} devices, config declares {devices}")));
            }
        }
        Ok(())
    }

    /// Explicit devices followed by the generated fleet.
    pub fn device_records(&self) -> Vec<DeviceRecord> {
        let mut out: Vec<DeviceRecord> = self.devices.iter().map(DeviceRecord::from).collect();
        if let Some(fleet) = &self.fleet {
            let group = fleet.group_size.max(1);
            for i in 0..fleet.count {
                let kind = &fleet.device_types[i as usize % fleet.device_types.len().max(1)];
                out.push(DeviceRecord {
                    device_id: format!("{}{i:05}", fleet.prefix),
                    owner_id: fleet.owner.clone(),
                    device_type: kind.clone(),
                    policy_id: fleet.policy_id.clone(),
                    shared_key_id: format!("{}key-{:05}", fleet.prefix, i / group),
                });
            }
        }
        out
    }

    pub fn policies(&self) -> Result<Vec<(String, EndorsementPolicy)>, ConfigError> {
        self.policies
            .iter()
            .map(|p| {
                let policy = p.expr.parse().map_err(|source| ConfigError::Policy {
                    id: p.id.clone(),
                    source,
                })?;
                Ok((p.id.clone(), policy))
            })
            .collect()
    }

    /// Builds identities, registry and policies. Fleet devices get seeds
    /// derived from their ids.
    pub fn network(&self) -> Result<Network, ConfigError> {
        if let Some(fleet) = &self.fleet {
            if fleet.device_types.is_empty() {
                return Err(ConfigError::Invalid("fleet.device_types is empty".into()));
            }
        }
        let mut membership = Membership::new();
        for entry in &self.identities {
            let seed = match &entry.seed {
                Some(hex_seed) => decode_seed(&entry.id, hex_seed)?,
                None => seed_from_label(&entry.id),
            };
            membership.create_identity(&entry.id, entry.role, seed)?;
        }
        let devices = self.device_records();
        let declared: BTreeSet<&str> = self.devices.iter().map(|d| d.device_id.as_str()).collect();
        for device in &devices {
            if !declared.contains(device.device_id.as_str()) {
                membership.create_identity(&device.device_id, Role::Device, seed_from_label(&device.device_id))?;
            }
        }
        Ok(Network::new(
            self.channel_id.clone(),
            membership,
            devices,
            self.policies()?,
            self.network.committer.clone(),
        )?)
    }

    pub fn ordering_config(&self) -> OrderingConfig {
        OrderingConfig {
            channel_id: self.channel_id.clone(),
            max_block_bytes: self.ordering.max_block_bytes,
            max_block_txs: self.ordering.max_block_txs,
            batch_timeout: ms(self.ordering.batch_timeout_ms),
            reader_acl: self.ordering.reader_acl.iter().cloned().collect(),
        }
    }

    pub fn network_model(&self) -> NetworkModel {
        let n = &self.network;
        NetworkModel {
            hop_latency: ms(n.hop_latency_ms),
            per_byte_secs: n.per_byte_secs,
            endorse_base: ms(n.endorse_base_ms),
            endorse_reject: ms(n.endorse_reject_ms),
            endorse_per_byte_secs: n.endorse_per_byte_secs,
            endorser_workers: n.endorser_workers,
            ordering_per_block: ms(n.ordering_per_block_ms),
            ordering_per_byte_secs: n.ordering_per_byte_secs,
            ordering_backlog_limit: n.ordering_backlog_limit,
            validation_per_block: ms(n.validation_per_block_ms),
            validation_per_tx: ms(n.validation_per_tx_ms),
        }
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        let w = &self.workload;
        WorkloadSpec {
            device_count: w.device_count,
            tx_mix: TxMix {
                store: w.store,
                access: w.access,
                monitor: w.monitor,
            },
            payload_bytes: w.payload_bytes,
            access_item_bytes: w.access_item_bytes,
            arrival_rate: w.arrival_rate,
            duration: SimDuration::from_secs_f64(w.duration_secs),
            drain_limit: SimDuration::from_secs_f64(w.drain_limit_secs),
            rng_seed: w.seed,
            attacker_count: w.attacker_count,
            attack_rate: w.attack_rate,
        }
    }

    /// Workload and ordering for one payload-sweep point.
    pub fn payload_point(&self, kb: u32) -> (WorkloadSpec, OrderingConfig) {
        let p = &self.payload_sweep;
        let mut workload = self.workload_spec();
        workload.device_count = p.device_count;
        workload.arrival_rate = p.arrival_rate;
        workload.duration = SimDuration::from_secs_f64(p.duration_secs);
        workload.payload_bytes = kb * 1024;
        workload.access_item_bytes = kb * 1024;
        let mut ordering = self.ordering_config();
        ordering.max_block_bytes = p.max_block_bytes;
        ordering.batch_timeout = ms(p.batch_timeout_ms);
        (workload, ordering)
    }
}
