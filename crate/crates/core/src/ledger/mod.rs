// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Validation phase, world state and the append-only block file.

pub mod file;
pub mod state;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::chaincode::{self, TxType};
use crate::codec::Digest;
use crate::endorsement::{EndorsementPolicy, TransactionEnvelope};
use crate::membership::{verify_batch, Directory, PublicKey, Role, Signature};
use crate::ordering::{Block, BlockHeader, Transaction};
use crate::rwset::{Version, WriteSet, WriteValue};

pub use file::{verify_chain, ChainError, LedgerReader, LedgerWriter};
pub use state::{StateSnapshot, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValidationFlag {
    Valid,
    InvalidPolicy,
    InvalidMvccConflict,
    InvalidBadSignature,
    InvalidDuplicate,
}

impl ValidationFlag {
    pub fn code(self) -> u8 {
        match self {
            ValidationFlag::Valid => 0,
            ValidationFlag::InvalidPolicy => 1,
            ValidationFlag::InvalidMvccConflict => 2,
            ValidationFlag::InvalidBadSignature => 3,
            ValidationFlag::InvalidDuplicate => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ValidationFlag::Valid,
            1 => ValidationFlag::InvalidPolicy,
            2 => ValidationFlag::InvalidMvccConflict,
            3 => ValidationFlag::InvalidBadSignature,
            4 => ValidationFlag::InvalidDuplicate,
            _ => return None,
        })
    }

    pub fn is_valid(self) -> bool {
        self == ValidationFlag::Valid
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValidationFlag::Valid => "valid",
            ValidationFlag::InvalidPolicy => "invalid_policy",
            ValidationFlag::InvalidMvccConflict => "invalid_mvcc_conflict",
            ValidationFlag::InvalidBadSignature => "invalid_bad_signature",
            ValidationFlag::InvalidDuplicate => "invalid_duplicate",
        }
    }
}

impl fmt::Display for ValidationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("block {got} does not extend the tip (expected number {expected})")]
    BrokenChain { expected: u64, got: u64 },
    #[error("block {0} has {1} flags for {2} transactions")]
    FlagCount(u64, usize, usize),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("replayed flags of block {0} differ from the recorded ones")]
    FlagMismatch(u64),
}

/// Writes of earlier valid transactions of the block being validated.
type BlockWrites = HashMap<String, Option<Version>>;

fn record_writes(written: &mut BlockWrites, writes: &WriteSet, version: Version) {
    for (key, value) in writes.entries() {
        let v = match value {
            WriteValue::Put(_) => Some(version),
            WriteValue::Delete => None,
        };
        written.insert(key.clone(), v);
    }
}

type SigItem<'a> = (&'a [u8], &'a Signature, PublicKey);

fn as_refs<'a>(items: &'a [SigItem<'a>]) -> Vec<(&'a [u8], &'a Signature, &'a PublicKey)> {
    items.iter().map(|(m, s, k)| (*m, *s, k)).collect()
}

/// A peer's committed chain: world state, tip and seen transaction ids.
#[derive(Debug)]
pub struct Ledger {
    state: WorldState,
    tip: Option<BlockHeader>,
    tx_ids: HashSet<Digest>,
    directory: Directory,
    policies: HashMap<String, Option<Arc<EndorsementPolicy>>>,
    writer: Option<LedgerWriter>,
}

impl Ledger {
    pub fn new(directory: Directory) -> Self {
        Ledger {
            state: WorldState::new(),
            tip: None,
            tx_ids: HashSet::new(),
            directory,
            policies: HashMap::new(),
            writer: None,
        }
    }

    /// A ledger that appends every committed block to a new file at `path`.
    pub fn with_file(directory: Directory, path: &Path) -> Result<Self, LedgerError> {
        let mut ledger = Self::new(directory);
        ledger.writer = Some(LedgerWriter::create(path)?);
        Ok(ledger)
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn snapshot(&self) -> StateSnapshot {
        self.state.snapshot()
    }

    pub fn tip(&self) -> Option<&BlockHeader> {
        self.tip.as_ref()
    }

    pub fn height(&self) -> u64 {
        self.state.height()
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn is_committed(&self, tx_id: &Digest) -> bool {
        self.tx_ids.contains(tx_id)
    }

    fn check_extends_tip(&self, header: &BlockHeader) -> Result<(), LedgerError> {
        let expected = self.height();
        let prev = self.tip.map_or(Digest::ZERO, |t| t.digest());
        if header.number != expected || header.prev_hash != prev {
            return Err(LedgerError::BrokenChain {
                expected,
                got: header.number,
            });
        }
        Ok(())
    }

    fn policy(&mut self, text: Option<String>) -> Option<Arc<EndorsementPolicy>> {
        let text = text?;
        self.policies
            .entry(text)
            .or_insert_with_key(|t| t.parse().ok().map(Arc::new))
            .clone()
    }

    /// The policy an envelope has to satisfy: the target device's, or for a
    /// registration the one named by the new record.
    fn governing_policy(&mut self, env: &TransactionEnvelope) -> Option<Arc<EndorsementPolicy>> {
        let args = &env.proposal.args;
        let text = match (args.tx_type, &args.registration) {
            (TxType::Register, Some(record)) => chaincode::policy_text(&self.state, &record.policy_id),
            _ => chaincode::device_policy(&self.state, &args.target_device),
        };
        self.policy(text)
    }

    fn signature_items<'e>(
        &self,
        env: &'e TransactionEnvelope,
        endorsement_msg: &'e [u8],
        messages: &'e [Vec<u8>; 2],
    ) -> Option<Vec<SigItem<'e>>> {
        let key = |sig: &Signature| self.directory.get(&sig.signer_id).map(|p| p.public_key);
        let p = &env.proposal;
        if p.client_sig.signer_id != p.client_id
            || env.assembled_sig.signer_id != p.client_id
            || !p.tx_id_is_consistent()
        {
            return None;
        }
        let mut items = vec![
            (messages[0].as_slice(), &p.client_sig, key(&p.client_sig)?),
            (messages[1].as_slice(), &env.assembled_sig, key(&env.assembled_sig)?),
        ];
        for sig in &env.endorsements {
            items.push((endorsement_msg, sig, key(sig)?));
        }
        Some(items)
    }

    /// Signature validity of every transaction, verified as one batch when
    /// possible.
    fn check_signatures(&self, envs: &[&TransactionEnvelope]) -> Vec<bool> {
        let endorsement_msgs: Vec<Vec<u8>> = envs.iter().map(|e| e.endorsement_message()).collect();
        let messages: Vec<[Vec<u8>; 2]> = envs
            .iter()
            .map(|e| [e.proposal.signed_message(), e.assembly_message()])
            .collect();
        let per_tx: Vec<Option<Vec<SigItem<'_>>>> = envs
            .iter()
            .zip(&endorsement_msgs)
            .zip(&messages)
            .map(|((e, em), m)| self.signature_items(e, em, m))
            .collect();
        let mut ok: Vec<bool> = per_tx.iter().map(Option::is_some).collect();
        let all: Vec<(&[u8], &Signature, &PublicKey)> =
            per_tx.iter().flatten().flat_map(|items| as_refs(items)).collect();
        if all.is_empty() || verify_batch(&all) {
            return ok;
        }
        for (flag, items) in ok.iter_mut().zip(&per_tx) {
            if let Some(items) = items {
                *flag = verify_batch(&as_refs(items));
            }
        }
        ok
    }

    /// Flags for every transaction of `block` against the current state.
    /// Does not modify the ledger apart from caching parsed policies.
    pub fn validate_block(&mut self, block: &Block) -> Result<Vec<ValidationFlag>, LedgerError> {
        self.check_extends_tip(&block.header)?;
        let genesis = block.number() == 0;
        let envs: Vec<&TransactionEnvelope> = block
            .transactions
            .iter()
            .filter_map(|t| t.envelope().map(|e| &**e))
            .collect();
        let mut sig_ok = self.check_signatures(&envs).into_iter();

        let mut flags = Vec::with_capacity(block.len());
        let mut in_block: HashSet<Digest> = HashSet::new();
        let mut written = BlockWrites::new();
        for (index, tx) in block.transactions.iter().enumerate() {
            let version = Version::new(block.number(), index as u32);
            let flag = match tx {
                Transaction::Config(ws) => {
                    if genesis {
                        for (key, _) in ws.entries() {
                            written.insert(key.clone(), Some(version));
                        }
                        ValidationFlag::Valid
                    } else {
                        ValidationFlag::InvalidPolicy
                    }
                }
                Transaction::Endorsed(env) => {
                    let sigs_ok = sig_ok.next().expect("one result per envelope");
                    let flag = self.validate_envelope(env, sigs_ok, &written, &in_block);
                    in_block.insert(env.tx_id());
                    if flag.is_valid() {
                        record_writes(&mut written, &env.result.write_set, version);
                    }
                    flag
                }
            };
            flags.push(flag);
        }
        Ok(flags)
    }

    fn validate_envelope(
        &mut self,
        env: &TransactionEnvelope,
        sigs_ok: bool,
        written: &BlockWrites,
        in_block: &HashSet<Digest>,
    ) -> ValidationFlag {
        if !sigs_ok {
            return ValidationFlag::InvalidBadSignature;
        }
        let endorsers: BTreeSet<String> = env
            .endorser_ids()
            .into_iter()
            .filter(|id| self.directory.get(id).is_some_and(|p| p.role == Role::Endorser))
            .collect();
        match self.governing_policy(env) {
            Some(policy) if policy.evaluate(&endorsers) => {}
            _ => return ValidationFlag::InvalidPolicy,
        }
        let current = |key: &str| match written.get(key) {
            Some(v) => *v,
            None => self.state.version_of(key),
        };
        if env
            .result
            .read_set
            .entries()
            .iter()
            .any(|(key, seen)| current(key) != *seen)
        {
            return ValidationFlag::InvalidMvccConflict;
        }
        if self.tx_ids.contains(&env.tx_id()) || in_block.contains(&env.tx_id()) {
            return ValidationFlag::InvalidDuplicate;
        }
        ValidationFlag::Valid
    }

    /// Applies the valid transactions of `block`, appends it (with flags) to
    /// the file and advances the height. Returns the new height.
    pub fn commit(&mut self, mut block: Block, flags: Vec<ValidationFlag>) -> Result<u64, LedgerError> {
        self.check_extends_tip(&block.header)?;
        if flags.len() != block.len() {
            return Err(LedgerError::FlagCount(block.number(), flags.len(), block.len()));
        }
        block.flags = flags;
        if let Some(writer) = &mut self.writer {
            writer.append(&block)?;
        }
        let number = block.number();
        for (index, (tx, flag)) in block.transactions.iter().zip(&block.flags).enumerate() {
            let version = Version::new(number, index as u32);
            match tx {
                Transaction::Config(ws) if flag.is_valid() => self.state.apply(ws, version),
                Transaction::Endorsed(env) => {
                    self.tx_ids.insert(env.tx_id());
                    if flag.is_valid() {
                        self.state.apply(&env.result.write_set, version);
                    }
                }
                Transaction::Config(_) => {}
            }
        }
        self.state.advance_height();
        self.tip = Some(block.header);
        Ok(self.height())
    }

    /// Validates and commits; returns the flags.
    pub fn process(&mut self, block: Block) -> Result<Vec<ValidationFlag>, LedgerError> {
        let flags = self.validate_block(&block)?;
        self.commit(block, flags.clone())?;
        Ok(flags)
    }

    pub fn flush(&mut self) -> Result<(), LedgerError> {
        if let Some(writer) = &mut self.writer {
            writer.flush()?;
        }
        Ok(())
    }

    /// Rebuilds a ledger from a block file, re-validating every block and
    /// checking the result against the recorded flags.
    pub fn replay(directory: Directory, path: &Path) -> Result<Self, LedgerError> {
        let reader = LedgerReader::open(path)?;
        let mut ledger = Self::new(directory);
        for block in reader {
            let block = block?;
            let recorded = block.flags.clone();
            let flags = ledger.validate_block(&block)?;
            if flags != recorded {
                return Err(LedgerError::FlagMismatch(block.number()));
            }
            ledger.commit(block, flags)?;
        }
        Ok(ledger)
    }
}

/// The genesis block: one config transaction per key of `writes`, so the
/// i-th key lands at version (0, i).
pub fn genesis_block(writes: &WriteSet) -> Block {
    let txs = writes.split_per_key().into_iter().map(Transaction::Config).collect();
    Block::new(0, Digest::ZERO, txs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaincode::{init_genesis, ChaincodeArgs, DeviceRecord, StateView};
    use crate::endorsement::{collect, endorse, Proposal};
    use crate::membership::{Identity, Membership};
    use crate::rwset::Version;
    use crate::ordering::Block;

    struct Net {
        msp: Membership,
        ledger: Ledger,
    }

    fn net() -> Net {
        let mut msp = Membership::new();
        for (i, id) in ["e1", "e2", "e3"].iter().enumerate() {
            msp.create_identity(id, Role::Endorser, [i as u8 + 1; 32]).unwrap();
        }
        for (i, id) in ["dev-1", "dev-2"].iter().enumerate() {
            msp.create_identity(id, Role::Device, [i as u8 + 10; 32]).unwrap();
        }
        let records: Vec<DeviceRecord> = ["dev-1", "dev-2"]
            .iter()
            .map(|id| DeviceRecord {
                device_id: id.to_string(),
                owner_id: "alice".into(),
                device_type: "sensor".into(),
                policy_id: "p1".into(),
                shared_key_id: "k1".into(),
            })
            .collect();
        let policy = EndorsementPolicy::out_of(2, &["e1", "e2", "e3"]);
        let ws = init_genesis(&records, &[("p1".into(), policy)]).unwrap();
        let mut ledger = Ledger::new(msp.directory());
        ledger.process(genesis_block(&ws)).unwrap();
        Net { msp, ledger }
    }

    fn envelope(n: &Net, dev: &str, nonce: u64, endorsers: &[&str]) -> Arc<TransactionEnvelope> {
        let dir = n.msp.directory();
        let client = n.msp.get(dev).unwrap();
        let p = Proposal::new("home-1", ChaincodeArgs::store(dev, vec![nonce as u8; 8]), client, nonce);
        let snap = n.ledger.snapshot();
        let es: Vec<_> = endorsers
            .iter()
            .map(|e| endorse(&p, &snap, n.msp.get(e).unwrap(), &dir).unwrap())
            .collect();
        let any = EndorsementPolicy::Or(endorsers.iter().map(|e| EndorsementPolicy::principal(*e)).collect());
        Arc::new(collect(&p, &es, &any, client, &dir).unwrap())
    }

    fn block(n: &Net, envs: Vec<Arc<TransactionEnvelope>>) -> Block {
        let tip = n.ledger.tip().unwrap();
        Block::new(tip.number + 1, tip.digest(), envs.into_iter().map(Transaction::Endorsed).collect())
    }

    #[test]
    fn genesis_keys_at_block_zero() {
        let n = net();
        assert_eq!(n.ledger.state().version_of("policy/p1"), Some(Version::new(0, 0)));
        assert_eq!(n.ledger.state().version_of("registry/dev-1"), Some(Version::new(0, 1)));
        assert_eq!(n.ledger.height(), 1);
    }

    #[test]
    fn same_device_stores_conflict_in_one_block() {
        let mut n = net();
        let a = envelope(&n, "dev-1", 1, &["e1", "e2"]);
        let b = envelope(&n, "dev-1", 2, &["e1", "e3"]);
        let blk = block(&n, vec![a, b]);
        let flags = n.ledger.process(blk).unwrap();
        assert_eq!(flags, [ValidationFlag::Valid, ValidationFlag::InvalidMvccConflict]);
        assert_eq!(&*n.ledger.state().get("data/dev-1/0").unwrap().0, &[1u8; 8]);
        assert!(n.ledger.state().get("data/dev-1/1").is_none());
    }

    #[test]
    fn insufficient_endorsements_fail_policy() {
        let mut n = net();
        let env = envelope(&n, "dev-2", 1, &["e2"]);
        let blk = block(&n, vec![env]);
        assert_eq!(n.ledger.process(blk).unwrap(), [ValidationFlag::InvalidPolicy]);
    }

    #[test]
    fn tampered_and_duplicate_transactions() {
        let mut n = net();
        let good = envelope(&n, "dev-1", 1, &["e1", "e2"]);
        let mut forged = (*envelope(&n, "dev-2", 1, &["e1", "e2"])).clone();
        forged.endorsements[0].bytes[0] ^= 1;
        let blk = block(&n, vec![Arc::clone(&good), Arc::new(forged)]);
        assert_eq!(
            n.ledger.process(blk).unwrap(),
            [ValidationFlag::Valid, ValidationFlag::InvalidBadSignature]
        );
        let again = block(&n, vec![good]);
        assert_eq!(n.ledger.process(again).unwrap(), [ValidationFlag::InvalidMvccConflict]);
    }

    #[test]
    fn replayed_read_only_transaction_is_duplicate() {
        let mut n = net();
        let dir = n.msp.directory();
        let client = n.msp.get("dev-2").unwrap();
        let p = Proposal::new("home-1", ChaincodeArgs::monitor("dev-1"), client, 7);
        let snap = n.ledger.snapshot();
        let es: Vec<_> = ["e1", "e2"]
            .iter()
            .map(|e| endorse(&p, &snap, n.msp.get(e).unwrap(), &dir).unwrap())
            .collect();
        let policy = EndorsementPolicy::out_of(2, &["e1", "e2"]);
        let env = Arc::new(collect(&p, &es, &policy, client, &dir).unwrap());
        let blk = block(&n, vec![Arc::clone(&env), Arc::clone(&env)]);
        assert_eq!(
            n.ledger.process(blk).unwrap(),
            [ValidationFlag::Valid, ValidationFlag::InvalidDuplicate]
        );
        let later = block(&n, vec![env]);
        assert_eq!(n.ledger.process(later).unwrap(), [ValidationFlag::InvalidDuplicate]);
    }

    #[test]
    fn all_invalid_block_still_advances() {
        let mut n = net();
        let before = n.ledger.state().digest();
        let env = envelope(&n, "dev-2", 1, &["e3"]);
        let blk = block(&n, vec![env]);
        let entries_before = n.ledger.state().len();
        n.ledger.process(blk).unwrap();
        assert_eq!(n.ledger.height(), 2);
        assert_eq!(n.ledger.state().len(), entries_before);
        assert!(n.ledger.state().get("seq/dev-2").is_none());
        assert_ne!(before, n.ledger.state().digest(), "height is part of the digest");
    }

    #[test]
    fn broken_chain_is_refused() {
        let mut n = net();
        let env = envelope(&n, "dev-1", 1, &["e1", "e2"]);
        let bad = Block::new(5, Digest::ZERO, vec![Transaction::Endorsed(env)]);
        assert!(matches!(n.ledger.validate_block(&bad), Err(LedgerError::BrokenChain { .. })));
    }

    #[test]
    fn unknown_signer_is_bad_signature() {
        let mut n = net();
        let stranger = Identity::from_seed("e9", Role::Endorser, [99; 32]);
        let mut env = (*envelope(&n, "dev-1", 1, &["e1", "e2"])).clone();
        env.endorsements[1] = stranger.sign(&env.endorsement_message());
        let blk = block(&n, vec![Arc::new(env)]);
        assert_eq!(n.ledger.process(blk).unwrap(), [ValidationFlag::InvalidBadSignature]);
    }
}
