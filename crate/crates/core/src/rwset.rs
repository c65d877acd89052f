// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Read sets, write sets and key versions.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::codec::{Decode, DecodeError, Decoder, Encode, Encoder};

/// Position of the transaction that last wrote a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Version {
    pub block_no: u64,
    pub tx_index: u32,
}

impl Version {
    pub const fn new(block_no: u64, tx_index: u32) -> Self {
        Version { block_no, tx_index }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.block_no, self.tx_index)
    }
}

fn encode_opt_version(enc: &mut Encoder, v: &Option<Version>) {
    match v {
        None => enc.u8(0),
        Some(v) => {
            enc.u8(1);
            enc.u64(v.block_no);
            enc.u32(v.tx_index);
        }
    }
}

fn decode_opt_version(dec: &mut Decoder<'_>) -> Result<Option<Version>, DecodeError> {
    match dec.u8()? {
        0 => Ok(None),
        1 => Ok(Some(Version::new(dec.u64()?, dec.u32()?))),
        tag => Err(DecodeError::InvalidTag { what: "version", tag }),
    }
}

fn check_strictly_increasing<'a, I>(keys: I) -> Result<(), DecodeError>
where
    I: Iterator<Item = &'a String>,
{
    let mut prev: Option<&String> = None;
    for key in keys {
        if prev.is_some_and(|p| p >= key) {
            return Err(DecodeError::Invalid(format!("key `{key}` out of canonical order")));
        }
        prev = Some(key);
    }
    Ok(())
}

/// Keys observed during simulation with the version seen (`None` = absent).
/// Keys are strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReadSet {
    entries: Vec<(String, Option<Version>)>,
}

impl ReadSet {
    pub fn from_map(map: BTreeMap<String, Option<Version>>) -> Self {
        ReadSet {
            entries: map.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[(String, Option<Version>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn get(&self, key: &str) -> Option<Option<Version>> {
        self.entries
            .binary_search_by(|(k, _)| k.as_str().cmp(key))
            .ok()
            .map(|i| self.entries[i].1)
    }
}

impl Encode for ReadSet {
    fn encode(&self, enc: &mut Encoder) {
        enc.seq(&self.entries, |enc, (key, version)| {
            enc.str(key);
            encode_opt_version(enc, version);
        });
    }
}

impl Decode for ReadSet {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let entries = dec.seq(|dec| Ok((dec.string()?, decode_opt_version(dec)?)))?;
        check_strictly_increasing(entries.iter().map(|(k, _)| k))?;
        Ok(ReadSet { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteValue {
    Put(Arc<[u8]>),
    Delete,
}

impl WriteValue {
    pub fn put(bytes: impl Into<Arc<[u8]>>) -> Self {
        WriteValue::Put(bytes.into())
    }
}

/// Keys written by a transaction, strictly increasing, each written once.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WriteSet {
    entries: Vec<(String, WriteValue)>,
}

impl WriteSet {
    pub fn from_map(map: BTreeMap<String, WriteValue>) -> Self {
        WriteSet {
            entries: map.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[(String, WriteValue)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&WriteValue> {
        self.entries
            .binary_search_by(|(k, _)| k.as_str().cmp(key))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    /// Splits into one single-key write set per entry, in key order.
    pub fn split_per_key(&self) -> Vec<WriteSet> {
        self.entries
            .iter()
            .map(|entry| WriteSet {
                entries: vec![entry.clone()],
            })
            .collect()
    }
}

impl Encode for WriteSet {
    fn encode(&self, enc: &mut Encoder) {
        enc.seq(&self.entries, |enc, (key, value)| {
            enc.str(key);
            match value {
                WriteValue::Put(bytes) => {
                    enc.u8(1);
                    enc.bytes(bytes);
                }
                WriteValue::Delete => enc.u8(0),
            }
        });
    }
}

impl Decode for WriteSet {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let entries = dec.seq(|dec| {
            let key = dec.string()?;
            let value = match dec.u8()? {
                0 => WriteValue::Delete,
                1 => WriteValue::put(dec.bytes()?),
                tag => return Err(DecodeError::InvalidTag { what: "write value", tag }),
            };
            Ok((key, value))
        })?;
        check_strictly_increasing(entries.iter().map(|(k, _)| k))?;
        Ok(WriteSet { entries })
    }
}
