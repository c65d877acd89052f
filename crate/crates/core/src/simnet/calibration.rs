// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Envelope size calibration against the target store/access sizes.

use crate::chaincode::{data_key, init_genesis, seq_key, ChaincodeArgs, DeviceRecord};
use crate::endorsement::{collect, endorse, EndorsementPolicy, Proposal, TransactionEnvelope};
use crate::ledger::{genesis_block, Ledger};
use crate::membership::{seed_from_label, Identity, Membership, Role};
use crate::rwset::{WriteSet, WriteValue};

/// Target wire sizes: (store, access).
pub const CALIBRATION_TARGETS: (u32, u32) = (3_072, 4_301);

const CHANNEL: &str = "home-1";

/// Small network for measuring envelopes: an admin, three endorsers, two
/// devices sharing a key and a 2-of-3 policy.
pub struct Fixture {
    pub membership: Membership,
    pub devices: Vec<DeviceRecord>,
    pub policy: EndorsementPolicy,
}

pub fn default_fixture() -> Fixture {
    let mut membership = Membership::new();
    let roles = [
        ("admin", Role::Admin),
        ("e1", Role::Endorser),
        ("e2", Role::Endorser),
        ("e3", Role::Endorser),
        ("dev-1", Role::Device),
        ("dev-2", Role::Device),
    ];
    for (id, role) in roles {
        membership
            .create_identity(id, role, seed_from_label(id))
            .expect("fixture ids are distinct");
    }
    let devices = ["dev-1", "dev-2"]
        .iter()
        .map(|id| DeviceRecord {
            device_id: (*id).to_owned(),
            owner_id: "owner-1".to_owned(),
            device_type: "sensor".to_owned(),
            policy_id: "p-home".to_owned(),
            shared_key_id: "k-home".to_owned(),
        })
        .collect();
    Fixture {
        membership,
        devices,
        policy: EndorsementPolicy::out_of(2, &["e1", "e2", "e3"]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvelopeCalibration {
    /// Store payload that brings the store envelope to its target.
    pub store_payload_bytes: u32,
    /// Reading size that brings the access envelope to its target.
    pub access_item_bytes: u32,
    pub store_envelope_bytes: u32,
    pub access_envelope_bytes: u32,
    /// Store envelope with an empty payload: fixed header and signature
    /// overhead.
    pub min_store_envelope_bytes: u32,
}

fn measure(fixture: &Fixture, args: ChaincodeArgs, item_bytes: u32) -> TransactionEnvelope {
    let mut writes: std::collections::BTreeMap<String, WriteValue> =
        init_genesis(&fixture.devices, &[("p-home".to_owned(), fixture.policy.clone())])
            .expect("fixture registry is valid")
            .entries()
            .iter()
            .cloned()
            .collect();
    writes.insert(data_key("dev-1", 0), WriteValue::put(vec![0xA5; item_bytes as usize]));
    writes.insert(seq_key("dev-1"), WriteValue::put(1u64.to_be_bytes().to_vec()));
    let directory = fixture.membership.directory();
    let mut ledger = Ledger::new(directory.clone());
    ledger
        .process(genesis_block(&WriteSet::from_map(writes)))
        .expect("genesis commits");

    let client: &Identity = fixture.membership.get("dev-2").expect("fixture device");
    let proposal = Proposal::new(CHANNEL, args, client, 1);
    let snapshot = ledger.snapshot();
    let endorsements: Vec<_> = ["e1", "e2"]
        .iter()
        .map(|id| {
            let endorser = fixture.membership.get(id).expect("fixture endorser");
            endorse(&proposal, &snapshot, endorser, &directory).expect("fixture proposal endorses")
        })
        .collect();
    collect(&proposal, &endorsements, &fixture.policy, client, &directory).expect("fixture endorsements collect")
}

fn store_size(fixture: &Fixture, payload: u32) -> u32 {
    measure(fixture, ChaincodeArgs::store("dev-2", vec![0x5A; payload as usize]), 0).wire_size_bytes()
}

fn access_size(fixture: &Fixture, item: u32) -> u32 {
    measure(fixture, ChaincodeArgs::access("dev-1", 0), item).wire_size_bytes()
}

/// Measures the fixture's envelopes and solves for the payload and item
/// sizes that hit [`CALIBRATION_TARGETS`]. Store payloads appear twice in
/// the envelope (arguments and write set); access items once (response).
pub fn calibrate_envelope_sizes() -> EnvelopeCalibration {
    let fixture = default_fixture();
    let (store_target, access_target) = CALIBRATION_TARGETS;
    let store_base = store_size(&fixture, 0);
    let store_slope = store_size(&fixture, 1) - store_base;
    let store_payload_bytes = store_target.saturating_sub(store_base) / store_slope;
    let access_base = access_size(&fixture, 0);
    let access_item_bytes = access_target.saturating_sub(access_base);
    EnvelopeCalibration {
        store_payload_bytes,
        access_item_bytes,
        store_envelope_bytes: store_size(&fixture, store_payload_bytes),
        access_envelope_bytes: access_size(&fixture, access_item_bytes),
        min_store_envelope_bytes: store_base,
    }
}

/// Wire sizes of the fixture's envelopes for given payload and item sizes.
pub fn envelope_sizes(store_payload_bytes: u32, access_item_bytes: u32) -> (u32, u32) {
    let fixture = default_fixture();
    (store_size(&fixture, store_payload_bytes), access_size(&fixture, access_item_bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_hits_targets() {
        let c = calibrate_envelope_sizes();
        assert!(c.store_envelope_bytes.abs_diff(CALIBRATION_TARGETS.0) <= 2, "{c:?}");
        assert_eq!(c.access_envelope_bytes, CALIBRATION_TARGETS.1, "{c:?}");
        assert!(c.min_store_envelope_bytes > 5 * 64, "{c:?}");
    }

    #[test]
    fn store_envelope_grows_two_bytes_per_payload_byte() {
        let f = default_fixture();
        assert_eq!(store_size(&f, 100) - store_size(&f, 0), 200);
        assert_eq!(access_size(&f, 100) - access_size(&f, 0), 100);
    }
}
