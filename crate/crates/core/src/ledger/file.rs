// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! On-disk block file.
//!
//! ```text
//! file   := "EOVL" version:u16 record*
//! record := len:u32 block:[u8; len] digest:[u8; 32]
//! ```
//!
//! All integers are big-endian. `block` is the canonical block encoding
//! (header, transactions, flags) and `digest` is SHA-256 over it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::codec::{Decode, Digest, Encode};
use crate::ordering::{Block, BlockHeader};

pub const MAGIC: &[u8; 4] = b"EOVL";
pub const FORMAT_VERSION: u16 = 1;
const PREAMBLE_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptReason {
    DigestMismatch,
    Malformed,
    Numbering,
    PrevHash,
    DataHash,
    FlagCount,
}

impl std::fmt::Display for CorruptReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorruptReason::DigestMismatch => "stored digest does not match block bytes",
            CorruptReason::Malformed => "block bytes do not decode",
            CorruptReason::Numbering => "block number out of sequence",
            CorruptReason::PrevHash => "previous-hash link broken",
            CorruptReason::DataHash => "data hash does not match transactions",
            CorruptReason::FlagCount => "flag count differs from transaction count",
        })
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("file too short to hold a ledger header")]
    TruncatedFile,
    #[error("not a ledger file")]
    BadMagic,
    #[error("unsupported ledger format version {0}")]
    UnsupportedVersion(u16),
    #[error("block {block} is truncated")]
    Truncated { block: u64 },
    #[error("block {block} is corrupt: {reason}")]
    Corrupt { block: u64, reason: CorruptReason },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ChainError {
    /// The first block found bad, if the failure is tied to one.
    pub fn block(&self) -> Option<u64> {
        match self {
            ChainError::Truncated { block } | ChainError::Corrupt { block, .. } => Some(*block),
            _ => None,
        }
    }
}

/// Appends blocks to a file.
#[derive(Debug)]
pub struct LedgerWriter {
    out: BufWriter<File>,
}

impl LedgerWriter {
    /// Creates (or truncates) `path` and writes the preamble.
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_be_bytes())?;
        Ok(LedgerWriter { out })
    }

    pub fn append(&mut self, block: &Block) -> std::io::Result<()> {
        let bytes = block.to_canonical_bytes();
        self.out.write_all(&(bytes.len() as u32).to_be_bytes())?;
        self.out.write_all(&bytes)?;
        self.out.write_all(Digest::of(&bytes).as_bytes())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Serializes a whole chain into file bytes.
pub fn encode_file(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_be_bytes());
    for block in blocks {
        let bytes = block.to_canonical_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&bytes);
        out.extend_from_slice(Digest::of(&bytes).as_bytes());
    }
    out
}

/// Iterates over the blocks of an in-memory file, checking each record's
/// digest and the header chain as it goes. Stops after the first error.
#[derive(Debug)]
pub struct LedgerReader {
    bytes: Vec<u8>,
    pos: usize,
    next_number: u64,
    prev: Option<BlockHeader>,
    failed: bool,
}

impl LedgerReader {
    pub fn open(path: &Path) -> Result<Self, ChainError> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ChainError> {
        if bytes.len() < PREAMBLE_LEN {
            return Err(ChainError::TruncatedFile);
        }
        if &bytes[..4] != MAGIC {
            return Err(ChainError::BadMagic);
        }
        let version = u16::from_be_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(ChainError::UnsupportedVersion(version));
        }
        Ok(LedgerReader {
            bytes,
            pos: PREAMBLE_LEN,
            next_number: 0,
            prev: None,
            failed: false,
        })
    }

    fn read_record(&mut self) -> Result<Block, ChainError> {
        let block_no = self.next_number;
        let corrupt = |reason| ChainError::Corrupt { block: block_no, reason };
        let rest = &self.bytes[self.pos..];
        if rest.len() < 4 {
            return Err(ChainError::Truncated { block: block_no });
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if rest.len() - 4 < len + 32 {
            return Err(ChainError::Truncated { block: block_no });
        }
        let body = &rest[4..4 + len];
        let stored = &rest[4 + len..4 + len + 32];
        if Digest::of(body).as_bytes() != stored {
            return Err(corrupt(CorruptReason::DigestMismatch));
        }
        let block = Block::from_canonical_bytes(body).map_err(|_| corrupt(CorruptReason::Malformed))?;
        if block.header.number != block_no {
            return Err(corrupt(CorruptReason::Numbering));
        }
        let expected_prev = self.prev.map_or(Digest::ZERO, |h| h.digest());
        if block.header.prev_hash != expected_prev {
            return Err(corrupt(CorruptReason::PrevHash));
        }
        if Block::compute_data_hash(&block.transactions) != block.header.data_hash {
            return Err(corrupt(CorruptReason::DataHash));
        }
        if block.flags.len() != block.transactions.len() {
            return Err(corrupt(CorruptReason::FlagCount));
        }
        self.pos += 4 + len + 32;
        self.next_number += 1;
        self.prev = Some(block.header);
        Ok(block)
    }
}

impl Iterator for LedgerReader {
    type Item = Result<Block, ChainError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.pos == self.bytes.len() {
            return None;
        }
        let item = self.read_record();
        self.failed = item.is_err();
        Some(item)
    }
}

/// Checks every record digest, block number, previous-hash link and data
/// hash. Returns the number of blocks, or the first failure.
pub fn verify_chain(bytes: &[u8]) -> Result<u64, ChainError> {
    let reader = LedgerReader::from_bytes(bytes.to_vec())?;
    let mut count = 0;
    for block in reader {
        block?;
        count += 1;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::ValidationFlag;
    use crate::ordering::Transaction;
    use crate::rwset::{WriteSet, WriteValue};

    fn chain(n: u64) -> Vec<Block> {
        let mut blocks: Vec<Block> = Vec::new();
        for number in 0..n {
            let prev = blocks.last().map_or(Digest::ZERO, |b| b.header.digest());
            let ws = WriteSet::from_map([(format!("k{number}"), WriteValue::put(vec![number as u8; 4]))].into());
            let mut b = Block::new(number, prev, vec![Transaction::Config(ws)]);
            b.flags = vec![ValidationFlag::Valid];
            blocks.push(b);
        }
        blocks
    }

    #[test]
    fn untampered_file_verifies() {
        assert_eq!(verify_chain(&encode_file(&chain(10))).unwrap(), 10);
    }

    #[test]
    fn empty_file_is_truncated() {
        assert!(matches!(verify_chain(&[]), Err(ChainError::TruncatedFile)));
        assert_eq!(verify_chain(&encode_file(&[])).unwrap(), 0);
    }

    #[test]
    fn flipped_payload_byte_names_its_block() {
        let blocks = chain(10);
        let before = encode_file(&blocks[..4]).len();
        let mut bytes = encode_file(&blocks);
        bytes[before + 4 + 100] ^= 0x01;
        assert_eq!(verify_chain(&bytes).unwrap_err().block(), Some(4));
    }

    #[test]
    fn cut_file_is_truncated() {
        let bytes = encode_file(&chain(3));
        assert!(matches!(
            verify_chain(&bytes[..bytes.len() - 1]),
            Err(ChainError::Truncated { block: 2 })
        ));
    }

    #[test]
    fn relinked_block_is_caught_by_prev_hash() {
        let mut blocks = chain(3);
        blocks[1].header.prev_hash = Digest::of(b"elsewhere");
        assert!(matches!(
            verify_chain(&encode_file(&blocks)),
            Err(ChainError::Corrupt { block: 1, reason: CorruptReason::PrevHash })
        ));
    }

    #[test]
    fn writer_matches_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.eovl");
        let blocks = chain(4);
        let mut w = LedgerWriter::create(&path).unwrap();
        for b in &blocks {
            w.append(b).unwrap();
        }
        w.flush().unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), encode_file(&blocks));
    }
}
