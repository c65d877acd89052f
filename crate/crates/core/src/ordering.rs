// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Ordering phase: total order per channel and block cutting.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::sync::Arc;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::clock::{SimDuration, SimTime};
use crate::codec::{Decode, DecodeError, Decoder, Digest, Encode, Encoder};
use crate::endorsement::TransactionEnvelope;
use crate::ledger::ValidationFlag;
use crate::rwset::WriteSet;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrderingError {
    #[error("envelope for channel `{got}` submitted to `{expected}`")]
    WrongChannel { expected: String, got: String },
    #[error("transaction {0} already submitted")]
    DuplicateTxId(Digest),
    #[error("`{0}` may not read blocks from this channel")]
    DeliveryDenied(String),
    #[error("invalid ordering config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingConfig {
    pub channel_id: String,
    pub max_block_bytes: u64,
    pub max_block_txs: u32,
    pub batch_timeout: SimDuration,
    pub reader_acl: BTreeSet<String>,
}

impl OrderingConfig {
    pub fn validate(&self) -> Result<(), OrderingError> {
        let bad = |m: &str| Err(OrderingError::InvalidConfig(m.to_owned()));
        if self.max_block_bytes == 0 {
            return bad("max_block_bytes must be positive");
        }
        if self.max_block_txs == 0 {
            return bad("max_block_txs must be at least 1");
        }
        if self.batch_timeout == SimDuration::ZERO {
            return bad("batch_timeout must be positive");
        }
        Ok(())
    }
}

/// An entry of a block. Config transactions only appear in the genesis
/// block, one key each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transaction {
    Config(WriteSet),
    Endorsed(Arc<TransactionEnvelope>),
}

impl Transaction {
    pub fn wire_size(&self) -> usize {
        match self {
            Transaction::Config(ws) => 1 + ws.canonical_len(),
            Transaction::Endorsed(env) => 1 + env.wire_size_bytes() as usize,
        }
    }

    /// The Merkle leaf.
    pub fn digest(&self) -> Digest {
        match self {
            Transaction::Config(ws) => Digest::of_parts(&[b"eov-config", &ws.to_canonical_bytes()]),
            Transaction::Endorsed(env) => env.digest(),
        }
    }

    pub fn envelope(&self) -> Option<&Arc<TransactionEnvelope>> {
        match self {
            Transaction::Endorsed(env) => Some(env),
            Transaction::Config(_) => None,
        }
    }
}

impl Encode for Transaction {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Transaction::Config(ws) => {
                enc.u8(0);
                ws.encode(enc);
            }
            Transaction::Endorsed(env) => {
                enc.u8(1);
                env.encode(enc);
            }
        }
    }
}

impl Decode for Transaction {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(Transaction::Config(WriteSet::decode(dec)?)),
            1 => Ok(Transaction::Endorsed(Arc::new(TransactionEnvelope::decode(dec)?))),
            tag => Err(DecodeError::InvalidTag { what: "transaction", tag }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHeader {
    pub number: u64,
    pub prev_hash: Digest,
    pub data_hash: Digest,
}

impl BlockHeader {
    pub fn digest(&self) -> Digest {
        self.canonical_digest()
    }
}

impl Encode for BlockHeader {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.number);
        enc.digest(&self.prev_hash);
        enc.digest(&self.data_hash);
    }
}

impl Decode for BlockHeader {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(BlockHeader {
            number: dec.u64()?,
            prev_hash: dec.digest()?,
            data_hash: dec.digest()?,
        })
    }
}

/// Merkle root over `leaves`, duplicating the last node of odd levels.
/// Interior node = SHA-256(0x01 || left || right). The root of a single leaf
/// is the leaf; the root of no leaves is all zeros.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return Digest::ZERO;
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let left = &pair[0];
                let right = pair.get(1).unwrap_or(left);
                let mut h = Sha256::new();
                h.update([0x01]);
                h.update(left.as_bytes());
                h.update(right.as_bytes());
                Digest(h.finalize().into())
            })
            .collect();
    }
    level[0]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub transactions: Vec<Transaction>,
    /// Filled in by validation, one per transaction.
    pub flags: Vec<ValidationFlag>,
}

impl Block {
    pub fn new(number: u64, prev_hash: Digest, transactions: Vec<Transaction>) -> Self {
        let data_hash = Self::compute_data_hash(&transactions);
        Block {
            header: BlockHeader {
                number,
                prev_hash,
                data_hash,
            },
            transactions,
            flags: Vec::new(),
        }
    }

    pub fn compute_data_hash(transactions: &[Transaction]) -> Digest {
        let leaves: Vec<Digest> = transactions.iter().map(Transaction::digest).collect();
        merkle_root(&leaves)
    }

    pub fn number(&self) -> u64 {
        self.header.number
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    /// Sum of transaction wire sizes.
    pub fn payload_bytes(&self) -> u64 {
        self.transactions.iter().map(|t| t.wire_size() as u64).sum()
    }
}

impl Encode for Block {
    fn encode(&self, enc: &mut Encoder) {
        self.header.encode(enc);
        enc.seq(&self.transactions, |enc, tx| tx.encode(enc));
        enc.seq(&self.flags, |enc, flag| enc.u8(flag.code()));
    }
}

impl Decode for Block {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let header = BlockHeader::decode(dec)?;
        let transactions = dec.seq(Transaction::decode)?;
        let flags = dec.seq(|dec| {
            let code = dec.u8()?;
            ValidationFlag::from_code(code).ok_or(DecodeError::InvalidTag { what: "flag", tag: code })
        })?;
        Ok(Block {
            header,
            transactions,
            flags,
        })
    }
}

/// Single-node sequencer. `submit` is the linearization point: the order of
/// accepted submissions is the order of transactions across blocks.
#[derive(Debug)]
pub struct Orderer {
    config: OrderingConfig,
    pending: VecDeque<(Arc<TransactionEnvelope>, SimTime)>,
    pending_bytes: u64,
    seen: HashSet<Digest>,
    next_number: u64,
    prev_hash: Digest,
}

impl Orderer {
    /// An orderer whose first block follows `tip`.
    pub fn new(config: OrderingConfig, tip: &BlockHeader) -> Result<Self, OrderingError> {
        config.validate()?;
        Ok(Orderer {
            config,
            pending: VecDeque::new(),
            pending_bytes: 0,
            seen: HashSet::new(),
            next_number: tip.number + 1,
            prev_hash: tip.digest(),
        })
    }

    pub fn config(&self) -> &OrderingConfig {
        &self.config
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_bytes(&self) -> u64 {
        self.pending_bytes
    }

    /// Marks transaction ids as already committed so they cannot be ordered
    /// again.
    pub fn mark_committed(&mut self, ids: impl IntoIterator<Item = Digest>) {
        self.seen.extend(ids);
    }

    pub fn submit(&mut self, envelope: Arc<TransactionEnvelope>, now: SimTime) -> Result<(), OrderingError> {
        if envelope.channel_id() != self.config.channel_id {
            return Err(OrderingError::WrongChannel {
                expected: self.config.channel_id.clone(),
                got: envelope.channel_id().to_owned(),
            });
        }
        if !self.seen.insert(envelope.tx_id()) {
            return Err(OrderingError::DuplicateTxId(envelope.tx_id()));
        }
        self.pending_bytes += envelope_cost(&envelope);
        self.pending.push_back((envelope, now));
        Ok(())
    }

    /// When the oldest pending envelope times out, if any are pending.
    pub fn next_deadline(&self) -> Option<SimTime> {
        self.pending.front().map(|(_, at)| *at + self.config.batch_timeout)
    }

    /// Cuts one block if a cut condition holds at `now`:
    /// the pending bytes exceed `max_block_bytes` (the block takes the
    /// longest prefix that fits, or a single oversized envelope), the pending
    /// count reached `max_block_txs`, or the oldest envelope waited
    /// `batch_timeout`.
    pub fn cut_block(&mut self, now: SimTime) -> Option<Block> {
        let timed_out = self.next_deadline().is_some_and(|deadline| now >= deadline);
        let full = self.pending_bytes > self.config.max_block_bytes
            || self.pending.len() >= self.config.max_block_txs as usize;
        if !(timed_out || full) {
            return None;
        }
        let mut bytes = 0u64;
        let mut take = 0usize;
        for (env, _) in &self.pending {
            let cost = envelope_cost(env);
            if take > 0 && bytes + cost > self.config.max_block_bytes {
                break;
            }
            if take == self.config.max_block_txs as usize {
                break;
            }
            bytes += cost;
            take += 1;
        }
        let txs: Vec<Transaction> = self
            .pending
            .drain(..take)
            .map(|(env, _)| Transaction::Endorsed(env))
            .collect();
        self.pending_bytes -= bytes;
        let block = Block::new(self.next_number, self.prev_hash, txs);
        self.next_number += 1;
        self.prev_hash = block.header.digest();
        Some(block)
    }
}

fn envelope_cost(env: &TransactionEnvelope) -> u64 {
    env.wire_size_bytes() as u64
}

/// Releases `block` to `reader` if the channel ACL allows it.
pub fn deliver<'b>(block: &'b Block, reader: &str, config: &OrderingConfig) -> Result<&'b Block, OrderingError> {
    if config.reader_acl.contains(reader) {
        Ok(block)
    } else {
        Err(OrderingError::DeliveryDenied(reader.to_owned()))
    }
}
