// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Harnesses and independent oracles shared by the integration tests and the
//! acceptance suite.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use eov_ledger::chaincode::{data_key, init_genesis, seq_key, ChaincodeArgs, DeviceRecord, TxType};
use eov_ledger::endorsement::{check_proposal, collect_verified, sign_result, simulate, EndorsementPolicy, Proposal};
use eov_ledger::ledger::{genesis_block, Ledger, StateSnapshot, ValidationFlag};
use eov_ledger::membership::{seed_from_label, Identity, Membership, Role};
use eov_ledger::ordering::{Block, Transaction};
use eov_ledger::{Digest, Version, WriteSet, WriteValue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CHANNEL: &str = "home-1";
pub const ENDORSERS: [&str; 3] = ["e1", "e2", "e3"];

/// A small channel: three endorsers, `devices` devices in two key groups,
/// a 2-of-3 policy and one genesis reading per device.
pub struct Home {
    pub membership: Membership,
    pub devices: Vec<DeviceRecord>,
    pub policy: EndorsementPolicy,
    pub genesis: WriteSet,
}

pub fn device_name(i: usize) -> String {
    format!("d{i:02}")
}

impl Home {
    pub fn new(devices: usize) -> Self {
        let mut membership = Membership::new();
        for e in ENDORSERS {
            membership.create_identity(e, Role::Endorser, seed_from_label(e)).unwrap();
        }
        let records: Vec<DeviceRecord> = (0..devices)
            .map(|i| {
                let id = device_name(i);
                membership.create_identity(&id, Role::Device, seed_from_label(&id)).unwrap();
                DeviceRecord {
                    device_id: id,
                    owner_id: "owner".into(),
                    device_type: "sensor".into(),
                    policy_id: "p".into(),
                    shared_key_id: format!("k{}", i % 2),
                }
            })
            .collect();
        let policy = EndorsementPolicy::out_of(2, &ENDORSERS);
        let mut writes: BTreeMap<String, WriteValue> = init_genesis(&records, &[("p".into(), policy.clone())])
            .unwrap()
            .entries()
            .iter()
            .cloned()
            .collect();
        for d in &records {
            writes.insert(data_key(&d.device_id, 0), WriteValue::put(d.device_id.as_bytes().to_vec()));
            writes.insert(seq_key(&d.device_id), WriteValue::put(1u64.to_be_bytes().to_vec()));
        }
        Home {
            membership,
            devices: records,
            policy,
            genesis: WriteSet::from_map(writes),
        }
    }

    pub fn identity(&self, id: &str) -> &Identity {
        self.membership.get(id).unwrap()
    }

    pub fn ledger(&self) -> Ledger {
        let mut ledger = Ledger::new(self.membership.directory());
        ledger.process(genesis_block(&self.genesis)).unwrap();
        ledger
    }

    /// Client side of one transaction: propose, endorse at two endorsers
    /// against `snapshot`, collect. `None` when endorsement rejects it.
    pub fn transact(&self, args: ChaincodeArgs, client: &str, nonce: u64, snapshot: &StateSnapshot) -> Option<Transaction> {
        let client = self.identity(client);
        let proposal = Proposal::new(CHANNEL, args, client, nonce);
        let directory = self.membership.directory();
        let role = check_proposal(&proposal, &directory).ok()?;
        let result = simulate(&proposal, role, snapshot).ok()?;
        let endorsements: Vec<_> = ["e1", "e2"]
            .iter()
            .map(|e| sign_result(proposal.tx_id, Arc::clone(&result), self.identity(e)))
            .collect();
        let envelope = collect_verified(&proposal, &endorsements, &self.policy, client).ok()?;
        Some(Transaction::Endorsed(Arc::new(envelope)))
    }
}

pub fn next_block(ledger: &Ledger, txs: Vec<Transaction>) -> Block {
    let prev = ledger.tip().map_or(Digest::ZERO, |h| h.digest());
    Block::new(ledger.height(), prev, txs)
}

/// Result of one randomized MVCC workload.
pub struct MvccRun {
    pub home: Home,
    pub ledger: Ledger,
    pub blocks: Vec<Block>,
    pub generated: usize,
    pub rejected_at_endorsement: usize,
    pub flags: Vec<ValidationFlag>,
}

/// Shape of a randomized workload.
#[derive(Debug, Clone, Copy)]
pub struct MvccShape {
    pub max_txs: usize,
    pub max_devices: usize,
    pub store_fraction: f64,
    /// Transactions may be endorsed against a snapshot up to this many
    /// blocks old.
    pub max_lag: usize,
    pub max_block_txs: usize,
}

pub const MVCC_SHAPE: MvccShape = MvccShape {
    max_txs: 200,
    max_devices: 20,
    store_fraction: 0.6,
    max_lag: 3,
    max_block_txs: 25,
};

/// Random stores and accesses endorsed against stale snapshots, cut into
/// blocks and committed through the ledger.
pub fn run_mvcc_workload(seed: u64, shape: MvccShape) -> MvccRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_devices = rng.gen_range(1..=shape.max_devices);
    let n_txs = rng.gen_range(1..=shape.max_txs);
    let home = Home::new(n_devices);
    let mut ledger = home.ledger();
    let mut blocks = vec![];
    let mut snapshots = vec![ledger.snapshot()];
    let mut generated = 0;
    let mut rejected = 0;
    let mut flags = vec![];
    let mut nonce = 0u64;
    while generated < n_txs {
        let size = rng.gen_range(1..=shape.max_block_txs.min(n_txs - generated));
        let mut txs = vec![];
        for _ in 0..size {
            generated += 1;
            nonce += 1;
            let lag = rng.gen_range(0..=shape.max_lag.min(snapshots.len() - 1));
            let snapshot = &snapshots[snapshots.len() - 1 - lag];
            let caller = device_name(rng.gen_range(0..n_devices));
            let args = if rng.gen_bool(shape.store_fraction) {
                let len = rng.gen_range(1..=16);
                ChaincodeArgs::store(&caller, (0..len).map(|_| rng.gen()).collect())
            } else {
                let target = device_name(rng.gen_range(0..n_devices));
                ChaincodeArgs::access(&target, rng.gen_range(0..3))
            };
            match home.transact(args, &caller, nonce, snapshot) {
                Some(tx) => txs.push(tx),
                None => rejected += 1,
            }
        }
        if txs.is_empty() {
            continue;
        }
        let mut block = next_block(&ledger, txs);
        block.flags = ledger.process(block.clone()).unwrap();
        flags.extend(block.flags.iter().copied());
        blocks.push(block);
        snapshots.push(ledger.snapshot());
    }
    MvccRun {
        home,
        ledger,
        blocks,
        generated,
        rejected_at_endorsement: rejected,
        flags,
    }
}

pub type StateModel = BTreeMap<String, (Vec<u8>, Version)>;

/// Serial-execution oracle: replays the valid transactions, one at a time in
/// commit order, against a plain map with the contract's store semantics.
pub fn serial_oracle(genesis: &WriteSet, blocks: &[Block]) -> StateModel {
    let mut model = StateModel::new();
    for (i, (key, value)) in genesis.entries().iter().enumerate() {
        if let WriteValue::Put(v) = value {
            model.insert(key.clone(), (v.to_vec(), Version::new(0, i as u32)));
        }
    }
    for block in blocks {
        for (i, (tx, flag)) in block.transactions.iter().zip(&block.flags).enumerate() {
            if !flag.is_valid() {
                continue;
            }
            let env = tx.envelope().unwrap();
            let args = &env.proposal.args;
            if args.tx_type != TxType::Store {
                continue;
            }
            let version = Version::new(block.header.number, i as u32);
            let device = &env.proposal.client_id;
            let seq = model
                .get(&seq_key(device))
                .map_or(0, |(v, _)| u64::from_be_bytes(v.as_slice().try_into().unwrap()));
            model.insert(data_key(device, seq), (args.payload.clone(), version));
            model.insert(seq_key(device), ((seq + 1).to_be_bytes().to_vec(), version));
        }
    }
    model
}

pub fn ledger_state(ledger: &Ledger) -> StateModel {
    ledger
        .state()
        .iter()
        .map(|(k, v, ver)| (k.to_owned(), (v.to_vec(), ver)))
        .collect()
}

/// Every policy of depth at most `max_depth` built from `principals`, with
/// operators over up to `max_children` distinct children.
pub fn enumerate_policies(principals: &[&str], max_depth: usize, max_children: usize) -> Vec<EndorsementPolicy> {
    let mut by_depth: Vec<Vec<EndorsementPolicy>> = vec![principals.iter().map(|p| EndorsementPolicy::principal(*p)).collect()];
    for depth in 2..=max_depth {
        let pool: Vec<&EndorsementPolicy> = by_depth.iter().flatten().collect();
        let mut level = vec![];
        for size in 1..=max_children {
            for combo in combinations(pool.len(), size) {
                if !combo.iter().any(|&i| pool[i].depth() == depth - 1) {
                    continue;
                }
                let children: Vec<EndorsementPolicy> = combo.iter().map(|&i| pool[i].clone()).collect();
                level.push(EndorsementPolicy::And(children.clone()));
                level.push(EndorsementPolicy::Or(children.clone()));
                for n in 1..=size as u32 {
                    level.push(EndorsementPolicy::OutOf(n, children.clone()));
                }
            }
        }
        by_depth.push(level);
    }
    by_depth.into_iter().flatten().collect()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = vec![];
    go(0, n, k, &mut vec![], &mut out);
    out
}

/// Truth table of a policy over `principals`: bit `s` is set when the signer
/// subset with membership mask `s` satisfies it. Computed with bit masks,
/// independently of `EndorsementPolicy::evaluate`.
pub fn truth_table(policy: &EndorsementPolicy, principals: &[&str]) -> u32 {
    let subsets = 1u32 << principals.len();
    let full: u32 = if subsets == 32 { u32::MAX } else { (1u32 << subsets) - 1 };
    match policy {
        EndorsementPolicy::Principal(id) => {
            let bit = principals.iter().position(|p| p == id).expect("known principal");
            (0..subsets).filter(|s| s & (1 << bit) != 0).fold(0, |m, s| m | (1 << s))
        }
        EndorsementPolicy::And(c) => c.iter().fold(full, |m, child| m & truth_table(child, principals)),
        EndorsementPolicy::Or(c) => c.iter().fold(0, |m, child| m | truth_table(child, principals)),
        EndorsementPolicy::OutOf(n, c) => {
            let tables: Vec<u32> = c.iter().map(|child| truth_table(child, principals)).collect();
            (0..subsets)
                .filter(|s| tables.iter().filter(|t| *t & (1 << s) != 0).count() >= *n as usize)
                .fold(0, |m, s| m | (1 << s))
        }
    }
}

pub fn subset(principals: &[&str], mask: u32) -> BTreeSet<String> {
    principals
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, p)| (*p).to_owned())
        .collect()
}

/// A ten-block chain (genesis plus nine) with small transactions.
pub fn ten_block_chain() -> Vec<Block> {
    let home = Home::new(4);
    let mut ledger = Ledger::new(home.membership.directory());
    let mut genesis = genesis_block(&home.genesis);
    genesis.flags = ledger.process(genesis.clone()).unwrap();
    let mut blocks = vec![genesis];
    let mut nonce = 0;
    for b in 1..10u64 {
        let snapshot = ledger.snapshot();
        let txs: Vec<Transaction> = (0..2)
            .filter_map(|i| {
                nonce += 1;
                let dev = device_name((b as usize + i) % 4);
                home.transact(ChaincodeArgs::store(&dev, vec![b as u8; 8]), &dev, nonce, &snapshot)
            })
            .collect();
        let mut block = next_block(&ledger, txs);
        block.flags = ledger.process(block.clone()).unwrap();
        blocks.push(block);
    }
    blocks
}
