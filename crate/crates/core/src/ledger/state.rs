// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::ops::Bound;
use std::sync::Arc;

use crate::chaincode::StateView;
use crate::codec::{Digest, Encoder};
use crate::rwset::{Version, WriteSet, WriteValue};

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: Arc<[u8]>,
    version: Version,
}

type Entries = BTreeMap<String, Entry>;

/// The committed key-value state.
///
/// The map sits behind an `Arc`: a snapshot is a pointer copy, and a commit
/// only clones the map when some snapshot still references the old one.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorldState {
    entries: Arc<Entries>,
    height: u64,
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of committed blocks; the next block number.
    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version_of(&self, key: &str) -> Option<Version> {
        self.entries.get(key).map(|e| e.version)
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            entries: Arc::clone(&self.entries),
            height: self.height,
        }
    }

    pub(crate) fn apply(&mut self, writes: &WriteSet, version: Version) {
        if writes.is_empty() {
            return;
        }
        let entries = Arc::make_mut(&mut self.entries);
        for (key, value) in writes.entries() {
            match value {
                WriteValue::Put(bytes) => {
                    entries.insert(
                        key.clone(),
                        Entry {
                            value: Arc::clone(bytes),
                            version,
                        },
                    );
                }
                WriteValue::Delete => {
                    entries.remove(key);
                }
            }
        }
    }

    pub(crate) fn advance_height(&mut self) {
        self.height += 1;
    }

    /// Digest over every (key, value, version) in key order plus the height.
    pub fn digest(&self) -> Digest {
        let mut enc = Encoder::new();
        enc.u64(self.height);
        enc.u32(self.entries.len() as u32);
        for (key, entry) in self.entries.iter() {
            enc.str(key);
            enc.bytes(&entry.value);
            enc.u64(entry.version.block_no);
            enc.u32(entry.version.tx_index);
        }
        Digest::of(&enc.into_bytes())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8], Version)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &*e.value, e.version))
    }
}

impl StateView for WorldState {
    fn get(&self, key: &str) -> Option<(Arc<[u8]>, Version)> {
        lookup(&self.entries, key)
    }

    fn range(&self, prefix: &str) -> Vec<(String, Arc<[u8]>, Version)> {
        prefix_scan(&self.entries, prefix)
    }
}

/// An immutable view of the state at one height.
#[derive(Debug, Clone)]
pub struct StateSnapshot {
    entries: Arc<Entries>,
    height: u64,
}

impl StateSnapshot {
    pub fn height(&self) -> u64 {
        self.height
    }
}

impl StateView for StateSnapshot {
    fn get(&self, key: &str) -> Option<(Arc<[u8]>, Version)> {
        lookup(&self.entries, key)
    }

    fn range(&self, prefix: &str) -> Vec<(String, Arc<[u8]>, Version)> {
        prefix_scan(&self.entries, prefix)
    }
}

fn lookup(entries: &Entries, key: &str) -> Option<(Arc<[u8]>, Version)> {
    entries
        .get(key)
        .map(|e| (Arc::clone(&e.value), e.version))
}

fn prefix_scan(entries: &Entries, prefix: &str) -> Vec<(String, Arc<[u8]>, Version)> {
    entries
        .range::<str, _>((Bound::Included(prefix), Bound::Unbounded))
        .take_while(|(k, _)| k.starts_with(prefix))
        .map(|(k, e)| (k.clone(), Arc::clone(&e.value), e.version))
        .collect()
}
