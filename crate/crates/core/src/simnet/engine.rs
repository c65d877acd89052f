// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! The event loop.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use crate::chaincode::{data_key, seq_key, ChaincodeArgs, ChaincodeError, TxType};
use crate::clock::{SimDuration, SimTime};
use crate::codec::Encode;
use crate::endorsement::{
    check_proposal, collect_verified, sign_result, simulate, EndorseError, Endorsement, EndorsementPolicy,
    Proposal, SimulationResult, TransactionEnvelope,
};
use crate::ledger::{genesis_block, Ledger};
use crate::membership::{seed_from_label, Identity, Role};
use crate::ordering::{deliver, Block, Orderer, OrderingConfig};
use crate::rwset::{WriteSet, WriteValue};

use super::workload::{plan_attack, plan_honest, PlannedTx};
use super::{
    attacker_id, invalid, Metrics, Network, NetworkModel, RunOptions, SimError, TxRecord, WorkloadSpec,
};

#[derive(Debug)]
enum Event {
    Arrive(usize),
    AtEndorser { tx: usize, endorser: usize },
    EndorserDone { tx: usize, endorser: usize },
    Response { tx: usize, slot: usize },
    AtOrderer(usize),
    BatchTimer,
    ConsensusDone,
    AtPeer(Block),
    ValidationDone,
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.heap.push(Scheduled { at, seq: self.seq, event });
    }

    fn pop(&mut self) -> Option<(SimTime, Event)> {
        self.heap.pop().map(|s| (s.at, s.event))
    }
}

/// Outcome of one endorser for one proposal.
type EndorserOutcome = Result<Endorsement, EndorseError>;

struct TxState {
    proposal: Arc<Proposal>,
    created: SimTime,
    kind: TxType,
    client: usize,
    attacker: bool,
    endorsers: Vec<usize>,
    outcomes: Vec<Option<EndorserOutcome>>,
    outstanding: usize,
    client_check: Option<Result<Role, EndorseError>>,
    simulated: Option<(u64, Result<Arc<SimulationResult>, ChaincodeError>)>,
    envelope: Option<Arc<TransactionEnvelope>>,
}

struct EndorserNode<'n> {
    identity: &'n Identity,
    waiting: VecDeque<usize>,
    busy: u32,
}

struct Fifo<T> {
    waiting: VecDeque<T>,
    in_service: Option<T>,
}

impl<T> Default for Fifo<T> {
    fn default() -> Self {
        Fifo {
            waiting: VecDeque::new(),
            in_service: None,
        }
    }
}

/// Runs one simulation. Deterministic in its inputs.
pub fn run(
    net: &Network,
    workload: &WorkloadSpec,
    model: &NetworkModel,
    ordering: &OrderingConfig,
    options: &RunOptions,
) -> Result<Metrics, SimError> {
    workload.validate()?;
    model.validate()?;
    ordering.validate()?;
    if workload.device_count as usize > net.devices.len() {
        return Err(invalid(format!(
            "workload wants {} devices, network has {}",
            workload.device_count,
            net.devices.len()
        )));
    }
    if ordering.channel_id != net.channel_id {
        return Err(invalid("ordering channel differs from network channel"));
    }
    if !ordering.reader_acl.contains(&net.committer) {
        return Err(invalid(format!("committer `{}` is not in the reader ACL", net.committer)));
    }
    Sim::new(net, workload, model, ordering, options)?.run()
}

struct Sim<'n> {
    net: &'n Network,
    workload: &'n WorkloadSpec,
    model: &'n NetworkModel,
    ordering_config: &'n OrderingConfig,
    options: &'n RunOptions,
    attackers: Vec<Identity>,
    devices: Vec<&'n Identity>,
    hubs: Vec<usize>,
    device_policy: Vec<Arc<EndorsementPolicy>>,
    endorser_ids: Vec<String>,
    endorsers: Vec<EndorserNode<'n>>,
    directory: crate::membership::Directory,
    plan: Vec<(PlannedTx, bool)>,
    txs: Vec<Option<TxState>>,
    queue: Queue,
    orderer: Orderer,
    timer_at: Option<SimTime>,
    consensus: Fifo<Block>,
    validation: Fifo<Block>,
    ledger: Ledger,
    item: Vec<u8>,
    metrics: Metrics,
    end_of_arrivals: SimTime,
}

fn payload_for(tx: usize, len: u32) -> Vec<u8> {
    let seed = (tx as u64).to_be_bytes();
    (0..len as usize).map(|i| seed[i % 8] ^ (i as u8)).collect()
}

impl<'n> Sim<'n> {
    fn new(
        net: &'n Network,
        workload: &'n WorkloadSpec,
        model: &'n NetworkModel,
        ordering_config: &'n OrderingConfig,
        options: &'n RunOptions,
    ) -> Result<Self, SimError> {
        let devices: Vec<&Identity> = net.devices[..workload.device_count as usize]
            .iter()
            .map(|d| net.membership.get(&d.device_id).expect("checked by Network"))
            .collect();

        let mut hub_by_key: BTreeMap<&str, usize> = BTreeMap::new();
        let hubs: Vec<usize> = net.devices[..workload.device_count as usize]
            .iter()
            .enumerate()
            .map(|(i, d)| *hub_by_key.entry(d.shared_key_id.as_str()).or_insert(i))
            .collect();

        let policies: HashMap<&str, Arc<EndorsementPolicy>> = net
            .policies
            .iter()
            .map(|(id, p)| (id.as_str(), Arc::new(p.clone())))
            .collect();
        let device_policy = net.devices[..workload.device_count as usize]
            .iter()
            .map(|d| Arc::clone(&policies[d.policy_id.as_str()]))
            .collect();

        let mut membership = net.membership.clone();
        let mut attackers = Vec::new();
        for i in 0..workload.attacker_count {
            let id = attacker_id(i);
            attackers.push(membership.create_identity(&id, Role::Device, seed_from_label(&id))?.clone());
        }
        let directory = membership.directory();

        let endorser_ids = net.endorsers();
        let endorsers = endorser_ids
            .iter()
            .map(|id| EndorserNode {
                identity: net.membership.get(id).expect("listed from membership"),
                waiting: VecDeque::new(),
                busy: 0,
            })
            .collect();

        let mut plan: Vec<(PlannedTx, bool)> = plan_honest(workload).into_iter().map(|p| (p, false)).collect();
        plan.extend(plan_attack(workload).into_iter().map(|p| (p, true)));
        plan.sort_by_key(|(p, attacker)| (p.at, *attacker));

        let ledger = match &options.ledger_path {
            Some(path) => Ledger::with_file(directory.clone(), path)?,
            None => Ledger::new(directory.clone()),
        };

        let item = payload_for(usize::MAX, workload.access_item_bytes);
        let mut sim = Sim {
            net,
            workload,
            model,
            ordering_config,
            options,
            attackers,
            devices,
            hubs,
            device_policy,
            endorser_ids,
            endorsers,
            directory,
            txs: Vec::with_capacity(plan.len()),
            plan,
            queue: Queue::default(),
            orderer: Orderer::new(ordering_config.clone(), &Block::new(0, Default::default(), vec![]).header)?,
            timer_at: None,
            consensus: Fifo::default(),
            validation: Fifo::default(),
            ledger,
            item,
            metrics: Metrics::default(),
            end_of_arrivals: SimTime(workload.duration.as_nanos()),
        };
        sim.commit_genesis()?;
        Ok(sim)
    }

    /// Registry, policies and one reading per group hub.
    fn commit_genesis(&mut self) -> Result<(), SimError> {
        let base = crate::chaincode::init_genesis(&self.net.devices, &self.net.policies)?;
        let mut writes: BTreeMap<String, WriteValue> = base.entries().iter().cloned().collect();
        let item: Arc<[u8]> = self.item.clone().into();
        let mut hubs = self.hubs.clone();
        hubs.sort_unstable();
        hubs.dedup();
        for hub in hubs {
            let id = &self.net.devices[hub].device_id;
            writes.insert(data_key(id, 0), WriteValue::Put(Arc::clone(&item)));
            writes.insert(seq_key(id), WriteValue::put(1u64.to_be_bytes().to_vec()));
        }
        let genesis = genesis_block(&WriteSet::from_map(writes));
        self.orderer = Orderer::new(self.ordering_config.clone(), &genesis.header)?;
        self.ledger.process(genesis)?;
        Ok(())
    }

    fn run(mut self) -> Result<Metrics, SimError> {
        for i in 0..self.plan.len() {
            let at = self.plan[i].0.at;
            self.queue.push(at, Event::Arrive(i));
            self.txs.push(None);
        }
        let horizon = self.end_of_arrivals + self.workload.drain_limit;
        while let Some((now, event)) = self.queue.pop() {
            if now > horizon {
                break;
            }
            self.handle(now, event)?;
        }
        self.ledger.flush()?;
        self.metrics.duration_secs = self.workload.duration.as_secs_f64();
        self.metrics.pending = self.metrics.generated - self.metrics.accounted();
        self.metrics.state_digest = self.ledger.state().digest().to_hex();
        Ok(self.metrics)
    }

    fn handle(&mut self, now: SimTime, event: Event) -> Result<(), SimError> {
        match event {
            Event::Arrive(i) => self.arrive(now, i),
            Event::AtEndorser { tx, endorser } => {
                self.endorsers[endorser].waiting.push_back(tx);
                self.start_endorsements(now, endorser);
            }
            Event::EndorserDone { tx, endorser } => {
                self.endorsers[endorser].busy -= 1;
                self.finish_endorsement(now, tx, endorser);
                self.start_endorsements(now, endorser);
            }
            Event::Response { tx, slot } => self.response(now, tx, slot),
            Event::AtOrderer(tx) => self.at_orderer(now, tx),
            Event::BatchTimer => {
                self.timer_at = None;
                self.cut_blocks(now);
            }
            Event::ConsensusDone => self.consensus_done(now)?,
            Event::AtPeer(block) => {
                self.validation.waiting.push_back(block);
                self.start_validation(now);
            }
            Event::ValidationDone => self.validation_done(now)?,
        }
        Ok(())
    }

    fn arrive(&mut self, now: SimTime, i: usize) {
        let (planned, attacker) = self.plan[i];
        let (client, args) = if attacker {
            let id = self.attackers[planned.actor as usize].id().to_owned();
            (planned.actor as usize, ChaincodeArgs::store(&id, payload_for(i, self.workload.payload_bytes)))
        } else {
            let d = planned.actor as usize;
            let me = self.devices[d].id();
            let hub = self.devices[self.hubs[d]].id();
            let args = match planned.kind {
                TxType::Store => ChaincodeArgs::store(me, payload_for(i, self.workload.payload_bytes)),
                TxType::Access => ChaincodeArgs::access(hub, 0),
                TxType::Monitor => ChaincodeArgs::monitor(hub),
                TxType::Register => unreachable!("workloads never register"),
            };
            (d, args)
        };
        let identity = if attacker { &self.attackers[client] } else { self.devices[client] };
        let proposal = Arc::new(Proposal::new(&self.net.channel_id, args, identity, i as u64));
        let policy = if attacker {
            Arc::clone(&self.device_policy[0])
        } else {
            Arc::clone(&self.device_policy[client])
        };
        let endorsers = self.pick_endorsers(&policy, i);
        if attacker {
            self.metrics.attacker_generated += 1;
        } else {
            self.metrics.generated += 1;
        }
        let hop = self.hop(proposal.canonical_len());
        for &e in &endorsers {
            self.queue.push(now + hop, Event::AtEndorser { tx: i, endorser: e });
        }
        self.txs[i] = Some(TxState {
            proposal,
            created: now,
            kind: planned.kind,
            client,
            attacker,
            outstanding: endorsers.len(),
            outcomes: vec![None; endorsers.len()],
            endorsers,
            client_check: None,
            simulated: None,
            envelope: None,
        });
    }

    /// Rotates the preferred endorser order with the transaction index so
    /// load spreads evenly.
    fn pick_endorsers(&self, policy: &EndorsementPolicy, i: usize) -> Vec<usize> {
        let n = self.endorser_ids.len();
        let preference: Vec<String> = (0..n).map(|k| self.endorser_ids[(i + k) % n].clone()).collect();
        let chosen = policy.minimal_signers(&preference).unwrap_or_default();
        chosen
            .iter()
            .map(|id| self.endorser_ids.iter().position(|e| e == id).expect("known endorser"))
            .collect()
    }

    fn hop(&self, bytes: usize) -> SimDuration {
        self.model.hop_latency + SimDuration::per_byte(self.model.per_byte_secs, bytes)
    }

    fn start_endorsements(&mut self, now: SimTime, e: usize) {
        while self.endorsers[e].busy < self.model.endorser_workers {
            let Some(tx) = self.endorsers[e].waiting.pop_front() else {
                break;
            };
            self.endorsers[e].busy += 1;
            let cost = self.execute_for(tx);
            self.queue.push(now + cost, Event::EndorserDone { tx, endorser: e });
        }
    }

    /// Verifies and simulates against the state committed right now, memoized
    /// per snapshot height. Returns the service time.
    fn execute_for(&mut self, tx: usize) -> SimDuration {
        let height = self.ledger.height();
        let state = self.txs[tx].as_mut().expect("live transaction");
        if state.client_check.is_none() {
            state.client_check = Some(check_proposal(&state.proposal, &self.directory));
        }
        let role = match state.client_check.clone().expect("just set") {
            Ok(role) => role,
            Err(_) => return self.model.endorse_reject,
        };
        let fresh = !matches!(&state.simulated, Some((h, _)) if *h == height);
        if fresh {
            let snapshot = self.ledger.snapshot();
            state.simulated = Some((height, simulate(&state.proposal, role, &snapshot)));
        }
        match &state.simulated.as_ref().expect("just set").1 {
            Ok(result) => {
                let data = state.proposal.args.payload.len() + response_data_len(&result.response);
                self.model.endorse_base + SimDuration::per_byte(self.model.endorse_per_byte_secs, data)
            }
            Err(_) => self.model.endorse_reject,
        }
    }

    fn finish_endorsement(&mut self, now: SimTime, tx: usize, e: usize) {
        let state = self.txs[tx].as_mut().expect("live transaction");
        let outcome = match state.client_check.clone().expect("checked at start") {
            Err(err) => Err(err),
            Ok(_) => match &state.simulated.as_ref().expect("simulated at start").1 {
                Err(err) => Err(EndorseError::ChaincodeRejection(err.clone())),
                Ok(result) => Ok(sign_result(state.proposal.tx_id, Arc::clone(result), self.endorsers[e].identity)),
            },
        };
        let bytes = match &outcome {
            Ok(endorsement) => endorsement.result.canonical_len() + endorsement.endorser_sig.canonical_len() + 32,
            Err(_) => 64,
        };
        let slot = state.endorsers.iter().position(|x| *x == e).expect("endorser was asked");
        state.outcomes[slot] = Some(outcome);
        let hop = self.hop(bytes);
        self.queue.push(now + hop, Event::Response { tx, slot });
    }

    fn response(&mut self, now: SimTime, tx: usize, _slot: usize) {
        let state = self.txs[tx].as_mut().expect("live transaction");
        state.outstanding -= 1;
        if state.outstanding > 0 {
            return;
        }
        let outcomes: Vec<EndorserOutcome> = state.outcomes.iter_mut().map(|o| o.take().expect("responded")).collect();
        let attacker = state.attacker;
        if outcomes.iter().any(Result::is_err) {
            if attacker {
                self.metrics.attacker_rejected += 1;
            } else {
                self.metrics.rejected_at_endorsement += 1;
            }
            self.txs[tx] = None;
            return;
        }
        let endorsements: Vec<Endorsement> = outcomes.into_iter().map(Result::unwrap).collect();
        let client = if attacker { &self.attackers[state.client] } else { self.devices[state.client] };
        let policy = if attacker {
            Arc::clone(&self.device_policy[0])
        } else {
            Arc::clone(&self.device_policy[state.client])
        };
        match collect_verified(&state.proposal, &endorsements, &policy, client) {
            Ok(envelope) => {
                let envelope = Arc::new(envelope);
                let bytes = envelope.wire_size_bytes() as usize;
                state.envelope = Some(envelope);
                state.simulated = None;
                let hop = self.hop(bytes);
                self.queue.push(now + hop, Event::AtOrderer(tx));
            }
            Err(_) => {
                self.metrics.divergent_at_collection += 1;
                self.txs[tx] = None;
            }
        }
    }

    fn at_orderer(&mut self, now: SimTime, tx: usize) {
        let limit = self.model.ordering_backlog_limit as usize;
        if limit > 0 && self.consensus.waiting.len() >= limit {
            self.metrics.rejected_at_ordering += 1;
            self.txs[tx] = None;
            return;
        }
        let envelope = Arc::clone(self.txs[tx].as_ref().and_then(|s| s.envelope.as_ref()).expect("assembled"));
        if self.orderer.submit(envelope, now).is_err() {
            self.metrics.rejected_at_ordering += 1;
            self.txs[tx] = None;
            return;
        }
        self.cut_blocks(now);
    }

    fn cut_blocks(&mut self, now: SimTime) {
        while let Some(block) = self.orderer.cut_block(now) {
            self.consensus.waiting.push_back(block);
            self.start_consensus(now);
        }
        if let Some(deadline) = self.orderer.next_deadline() {
            if self.timer_at.is_none_or(|t| t > deadline) {
                self.timer_at = Some(deadline);
                self.queue.push(deadline.max(now), Event::BatchTimer);
            }
        }
    }

    fn start_consensus(&mut self, now: SimTime) {
        if self.consensus.in_service.is_some() {
            return;
        }
        let Some(block) = self.consensus.waiting.pop_front() else {
            return;
        };
        let cost = self.model.ordering_per_block
            + SimDuration::per_byte(self.model.ordering_per_byte_secs, block.payload_bytes() as usize);
        self.consensus.in_service = Some(block);
        self.queue.push(now + cost, Event::ConsensusDone);
    }

    fn consensus_done(&mut self, now: SimTime) -> Result<(), SimError> {
        let block = self.consensus.in_service.take().expect("block in consensus");
        let delivered = deliver(&block, &self.net.committer, self.ordering_config)?;
        let hop = self.hop(delivered.payload_bytes() as usize);
        self.queue.push(now + hop, Event::AtPeer(block));
        self.start_consensus(now);
        Ok(())
    }

    fn start_validation(&mut self, now: SimTime) {
        if self.validation.in_service.is_some() {
            return;
        }
        let Some(block) = self.validation.waiting.pop_front() else {
            return;
        };
        let cost = self.model.validation_per_block
            + SimDuration::from_nanos(self.model.validation_per_tx.as_nanos() * block.len() as u64);
        self.validation.in_service = Some(block);
        self.queue.push(now + cost, Event::ValidationDone);
    }

    fn validation_done(&mut self, now: SimTime) -> Result<(), SimError> {
        let block = self.validation.in_service.take().expect("block in validation");
        self.metrics.blocks += 1;
        self.metrics.block_bytes_total += block.payload_bytes();
        self.metrics.block_txs_total += block.len() as u64;
        let nonces: Vec<usize> = block
            .transactions
            .iter()
            .map(|t| t.envelope().expect("endorsed").proposal.nonce as usize)
            .collect();
        let flags = self.ledger.process(block)?;
        for (tx, flag) in nonces.into_iter().zip(flags) {
            let state = self.txs[tx].take().expect("ordered transaction");
            if state.attacker {
                self.metrics.attacker_txs_in_blocks += 1;
                continue;
            }
            if flag.is_valid() {
                self.metrics.committed += 1;
                self.metrics.latencies_ms.push((now - state.created).as_millis_f64());
            } else {
                self.metrics.invalid_at_validation += 1;
            }
            if self.options.record_transactions {
                self.metrics.tx_records.push(TxRecord {
                    tx_id: state.proposal.tx_id.to_hex(),
                    tx_type: state.kind.as_str(),
                    created_at_ms: state.created.as_millis_f64(),
                    committed_at_ms: now.as_millis_f64(),
                    flag,
                });
            }
        }
        self.start_validation(now);
        Ok(())
    }
}

fn response_data_len(response: &crate::chaincode::Response) -> usize {
    use crate::chaincode::Response;
    match response {
        Response::Value(v) => v.len(),
        Response::Items(items) => items.iter().map(|(_, v)| v.len()).sum(),
        Response::Registered | Response::Stored { .. } => 0,
    }
}
