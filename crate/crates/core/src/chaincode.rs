// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! The built-in smart-home contract.
//!
//! State layout (keys are `/`-separated ASCII, ranges use byte order):
//!
//! | key                    | value                                  |
//! |------------------------|----------------------------------------|
//! | `registry/<device>`    | canonical [`DeviceRecord`]             |
//! | `policy/<policy>`      | policy expression text                 |
//! | `seq/<device>`         | next store sequence number, `u64` BE   |
//! | `data/<device>/<seq>`  | stored payload                         |
//!
//! Sequence numbers are written in plain decimal, so a monitor scan returns
//! items in lexicographic rather than numeric order. Range reads record each
//! key they return; keys inserted after the snapshot (phantoms) are not
//! detected at validation.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Decoder, Encode, Encoder};
use crate::endorsement::policy::EndorsementPolicy;
use crate::membership::Role;
use crate::rwset::{ReadSet, Version, WriteSet, WriteValue};

pub const REGISTRY_PREFIX: &str = "registry/";
pub const POLICY_PREFIX: &str = "policy/";
pub const SEQ_PREFIX: &str = "seq/";
pub const DATA_PREFIX: &str = "data/";

pub fn registry_key(device_id: &str) -> String {
    format!("{REGISTRY_PREFIX}{device_id}")
}

pub fn policy_key(policy_id: &str) -> String {
    format!("{POLICY_PREFIX}{policy_id}")
}

pub fn seq_key(device_id: &str) -> String {
    format!("{SEQ_PREFIX}{device_id}")
}

pub fn data_key(device_id: &str, seq: u64) -> String {
    format!("{DATA_PREFIX}{device_id}/{seq}")
}

pub fn data_prefix(device_id: &str) -> String {
    format!("{DATA_PREFIX}{device_id}/")
}

/// Read-only access to committed state.
pub trait StateView {
    fn get(&self, key: &str) -> Option<(Arc<[u8]>, Version)>;
    /// Every entry whose key starts with `prefix`, in key order.
    fn range(&self, prefix: &str) -> Vec<(String, Arc<[u8]>, Version)>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChaincodeError {
    #[error("caller `{0}` is not a registered device")]
    UnknownCaller(String),
    #[error("`{caller}` does not share a key with `{target}`")]
    SharedKeyMismatch { caller: String, target: String },
    #[error("no value under `{0}`")]
    UnknownKey(String),
    #[error("`{0}` is not an admin")]
    NotAdmin(String),
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("device `{0}` is already registered")]
    DeviceExists(String),
    #[error("device `{device}` references unknown policy `{policy}`")]
    DanglingPolicyRef { device: String, policy: String },
    #[error("device `{0}` listed twice")]
    DuplicateDevice(String),
    #[error("registry must contain at least one device")]
    EmptyRegistry,
    #[error("stored record under `{0}` is corrupt")]
    CorruptRecord(String),
}

/// One registry entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRecord {
    pub device_id: String,
    pub owner_id: String,
    pub device_type: String,
    pub policy_id: String,
    pub shared_key_id: String,
}

impl Encode for DeviceRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.device_id);
        enc.str(&self.owner_id);
        enc.str(&self.device_type);
        enc.str(&self.policy_id);
        enc.str(&self.shared_key_id);
    }
}

impl Decode for DeviceRecord {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(DeviceRecord {
            device_id: dec.string()?,
            owner_id: dec.string()?,
            device_type: dec.string()?,
            policy_id: dec.string()?,
            shared_key_id: dec.string()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxType {
    Register,
    Store,
    Access,
    Monitor,
}

impl TxType {
    pub fn tag(self) -> u8 {
        match self {
            TxType::Register => 0,
            TxType::Store => 1,
            TxType::Access => 2,
            TxType::Monitor => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => TxType::Register,
            1 => TxType::Store,
            2 => TxType::Access,
            3 => TxType::Monitor,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TxType::Register => "register",
            TxType::Store => "store",
            TxType::Access => "access",
            TxType::Monitor => "monitor",
        }
    }
}

impl fmt::Display for TxType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Arguments of one contract invocation.
///
/// `registration` carries the new record for `register` and must be `None`
/// otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChaincodeArgs {
    pub tx_type: TxType,
    pub target_device: String,
    pub payload: Vec<u8>,
    pub key_selector: String,
    pub registration: Option<DeviceRecord>,
}

impl ChaincodeArgs {
    pub fn store(device: &str, payload: Vec<u8>) -> Self {
        ChaincodeArgs {
            tx_type: TxType::Store,
            target_device: device.to_owned(),
            payload,
            key_selector: String::new(),
            registration: None,
        }
    }

    pub fn access(target: &str, seq: u64) -> Self {
        ChaincodeArgs {
            tx_type: TxType::Access,
            target_device: target.to_owned(),
            payload: Vec::new(),
            key_selector: seq.to_string(),
            registration: None,
        }
    }

    pub fn monitor(target: &str) -> Self {
        ChaincodeArgs {
            tx_type: TxType::Monitor,
            target_device: target.to_owned(),
            payload: Vec::new(),
            key_selector: String::new(),
            registration: None,
        }
    }

    pub fn register(record: DeviceRecord) -> Self {
        ChaincodeArgs {
            tx_type: TxType::Register,
            target_device: record.device_id.clone(),
            payload: Vec::new(),
            key_selector: String::new(),
            registration: Some(record),
        }
    }

    fn check_shape(&self) -> Result<(), ChaincodeError> {
        let bad = |msg: &str| Err(ChaincodeError::InvalidArgs(msg.to_owned()));
        if self.target_device.is_empty() {
            return bad("target device is empty");
        }
        if self.tx_type != TxType::Store && !self.payload.is_empty() {
            return bad("payload is only allowed on store");
        }
        if matches!(self.tx_type, TxType::Register | TxType::Store) && !self.key_selector.is_empty() {
            return bad("key selector is only allowed on access and monitor");
        }
        match (self.tx_type, &self.registration) {
            (TxType::Register, None) => bad("register requires a device record"),
            (TxType::Register, Some(r)) if r.device_id != self.target_device => {
                bad("record id differs from target device")
            }
            (TxType::Register, Some(_)) => Ok(()),
            (_, Some(_)) => bad("device record is only allowed on register"),
            (_, None) => Ok(()),
        }
    }
}

impl Encode for ChaincodeArgs {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.tx_type.tag());
        enc.str(&self.target_device);
        enc.bytes(&self.payload);
        enc.str(&self.key_selector);
        match &self.registration {
            None => enc.u8(0),
            Some(record) => {
                enc.u8(1);
                record.encode(enc);
            }
        }
    }
}

impl Decode for ChaincodeArgs {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tag = dec.u8()?;
        let tx_type = TxType::from_tag(tag).ok_or(DecodeError::InvalidTag { what: "tx type", tag })?;
        let target_device = dec.string()?;
        let payload = dec.bytes()?.to_vec();
        let key_selector = dec.string()?;
        let registration = match dec.u8()? {
            0 => None,
            1 => Some(DeviceRecord::decode(dec)?),
            tag => return Err(DecodeError::InvalidTag { what: "registration", tag }),
        };
        Ok(ChaincodeArgs {
            tx_type,
            target_device,
            payload,
            key_selector,
            registration,
        })
    }
}

/// What the client gets back. Never written to state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Registered,
    Stored { seq: u64 },
    Value(Arc<[u8]>),
    Items(Vec<(String, Arc<[u8]>)>),
}

impl Encode for Response {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Response::Registered => enc.u8(0),
            Response::Stored { seq } => {
                enc.u8(1);
                enc.u64(*seq);
            }
            Response::Value(v) => {
                enc.u8(2);
                enc.bytes(v);
            }
            Response::Items(items) => {
                enc.u8(3);
                enc.seq(items, |enc, (k, v)| {
                    enc.str(k);
                    enc.bytes(v);
                });
            }
        }
    }
}

impl Decode for Response {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match dec.u8()? {
            0 => Response::Registered,
            1 => Response::Stored { seq: dec.u64()? },
            2 => Response::Value(dec.bytes()?.into()),
            3 => Response::Items(dec.seq(|dec| Ok((dec.string()?, dec.bytes()?.into())))?),
            tag => return Err(DecodeError::InvalidTag { what: "response", tag }),
        })
    }
}

/// The invoking identity as known to the membership service.
#[derive(Debug, Clone, Copy)]
pub struct Caller<'a> {
    pub id: &'a str,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub read_set: ReadSet,
    pub write_set: WriteSet,
    pub response: Response,
}

/// A failed execution with the reads it made before failing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub error: ChaincodeError,
    pub read_set: ReadSet,
}

struct Recorder<'v, V: StateView + ?Sized> {
    view: &'v V,
    reads: RefCell<BTreeMap<String, Option<Version>>>,
}

impl<'v, V: StateView + ?Sized> Recorder<'v, V> {
    fn get(&self, key: &str) -> Option<Arc<[u8]>> {
        let found = self.view.get(key);
        self.reads
            .borrow_mut()
            .entry(key.to_owned())
            .or_insert(found.as_ref().map(|(_, v)| *v));
        found.map(|(value, _)| value)
    }

    fn range(&self, prefix: &str) -> Vec<(String, Arc<[u8]>)> {
        let rows = self.view.range(prefix);
        let mut reads = self.reads.borrow_mut();
        rows.into_iter()
            .map(|(key, value, version)| {
                reads.entry(key.clone()).or_insert(Some(version));
                (key, value)
            })
            .collect()
    }

    fn device(&self, id: &str) -> Result<Option<DeviceRecord>, ChaincodeError> {
        let key = registry_key(id);
        match self.get(&key) {
            None => Ok(None),
            Some(bytes) => DeviceRecord::from_canonical_bytes(&bytes)
                .map(Some)
                .map_err(|_| ChaincodeError::CorruptRecord(key)),
        }
    }

    fn into_read_set(self) -> ReadSet {
        ReadSet::from_map(self.reads.into_inner())
    }
}

/// Runs the contract. Pure in `(args, caller, view)`.
pub fn execute<V: StateView + ?Sized>(
    args: &ChaincodeArgs,
    caller: Caller<'_>,
    view: &V,
) -> Result<Execution, Rejection> {
    let rec = Recorder {
        view,
        reads: RefCell::new(BTreeMap::new()),
    };
    match run(args, caller, &rec) {
        Ok((writes, response)) => Ok(Execution {
            read_set: rec.into_read_set(),
            write_set: WriteSet::from_map(writes),
            response,
        }),
        Err(error) => Err(Rejection {
            error,
            read_set: rec.into_read_set(),
        }),
    }
}

type Outcome = (BTreeMap<String, WriteValue>, Response);

fn run<V: StateView + ?Sized>(
    args: &ChaincodeArgs,
    caller: Caller<'_>,
    rec: &Recorder<'_, V>,
) -> Result<Outcome, ChaincodeError> {
    args.check_shape()?;
    match args.tx_type {
        TxType::Register => register(args, caller, rec),
        TxType::Store => store(args, caller, rec),
        TxType::Access | TxType::Monitor => read_only(args, caller, rec),
    }
}

fn register<V: StateView + ?Sized>(
    args: &ChaincodeArgs,
    caller: Caller<'_>,
    rec: &Recorder<'_, V>,
) -> Result<Outcome, ChaincodeError> {
    if caller.role != Role::Admin {
        return Err(ChaincodeError::NotAdmin(caller.id.to_owned()));
    }
    let record = args.registration.as_ref().expect("shape checked");
    if rec.get(&registry_key(&record.device_id)).is_some() {
        return Err(ChaincodeError::DeviceExists(record.device_id.clone()));
    }
    if rec.get(&policy_key(&record.policy_id)).is_none() {
        return Err(ChaincodeError::DanglingPolicyRef {
            device: record.device_id.clone(),
            policy: record.policy_id.clone(),
        });
    }
    let mut writes = BTreeMap::new();
    writes.insert(
        registry_key(&record.device_id),
        WriteValue::put(record.to_canonical_bytes()),
    );
    Ok((writes, Response::Registered))
}

fn store<V: StateView + ?Sized>(
    args: &ChaincodeArgs,
    caller: Caller<'_>,
    rec: &Recorder<'_, V>,
) -> Result<Outcome, ChaincodeError> {
    if rec.device(caller.id)?.is_none() {
        return Err(ChaincodeError::UnknownCaller(caller.id.to_owned()));
    }
    if args.target_device != caller.id {
        return Err(ChaincodeError::InvalidArgs(format!(
            "`{}` cannot store on behalf of `{}`",
            caller.id, args.target_device
        )));
    }
    let seq_key = seq_key(caller.id);
    let seq = match rec.get(&seq_key) {
        None => 0,
        Some(bytes) => {
            let raw: [u8; 8] = (*bytes)
                .try_into()
                .map_err(|_| ChaincodeError::CorruptRecord(seq_key.clone()))?;
            u64::from_be_bytes(raw)
        }
    };
    let mut writes = BTreeMap::new();
    writes.insert(data_key(caller.id, seq), WriteValue::put(args.payload.clone()));
    writes.insert(seq_key, WriteValue::put((seq + 1).to_be_bytes().to_vec()));
    Ok((writes, Response::Stored { seq }))
}

fn read_only<V: StateView + ?Sized>(
    args: &ChaincodeArgs,
    caller: Caller<'_>,
    rec: &Recorder<'_, V>,
) -> Result<Outcome, ChaincodeError> {
    let Some(me) = rec.device(caller.id)? else {
        return Err(ChaincodeError::UnknownCaller(caller.id.to_owned()));
    };
    let Some(target) = rec.device(&args.target_device)? else {
        return Err(ChaincodeError::UnknownKey(registry_key(&args.target_device)));
    };
    if me.shared_key_id != target.shared_key_id {
        return Err(ChaincodeError::SharedKeyMismatch {
            caller: caller.id.to_owned(),
            target: target.device_id,
        });
    }
    let response = if args.tx_type == TxType::Access {
        let seq: u64 = args
            .key_selector
            .parse()
            .map_err(|_| ChaincodeError::InvalidArgs(format!("bad item selector `{}`", args.key_selector)))?;
        let key = data_key(&args.target_device, seq);
        Response::Value(rec.get(&key).ok_or(ChaincodeError::UnknownKey(key))?)
    } else {
        let prefix = format!("{}{}", data_prefix(&args.target_device), args.key_selector);
        Response::Items(rec.range(&prefix))
    };
    Ok((BTreeMap::new(), response))
}

/// The genesis write set: one registry key per device and one policy key per
/// policy.
pub fn init_genesis(
    devices: &[DeviceRecord],
    policies: &[(String, EndorsementPolicy)],
) -> Result<WriteSet, ChaincodeError> {
    if devices.is_empty() {
        return Err(ChaincodeError::EmptyRegistry);
    }
    let mut writes = BTreeMap::new();
    for (id, policy) in policies {
        writes.insert(policy_key(id), WriteValue::put(policy.to_string().into_bytes()));
    }
    for device in devices {
        if !writes.contains_key(&policy_key(&device.policy_id)) {
            return Err(ChaincodeError::DanglingPolicyRef {
                device: device.device_id.clone(),
                policy: device.policy_id.clone(),
            });
        }
        let key = registry_key(&device.device_id);
        if writes.contains_key(&key) {
            return Err(ChaincodeError::DuplicateDevice(device.device_id.clone()));
        }
        writes.insert(key, WriteValue::put(device.to_canonical_bytes()));
    }
    Ok(WriteSet::from_map(writes))
}

/// Reads the endorsement policy governing `device_id` from state.
pub fn device_policy<V: StateView + ?Sized>(view: &V, device_id: &str) -> Option<String> {
    let (bytes, _) = view.get(&registry_key(device_id))?;
    let record = DeviceRecord::from_canonical_bytes(&bytes).ok()?;
    policy_text(view, &record.policy_id)
}

pub fn policy_text<V: StateView + ?Sized>(view: &V, policy_id: &str) -> Option<String> {
    let (bytes, _) = view.get(&policy_key(policy_id))?;
    String::from_utf8(bytes.to_vec()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::state::WorldState;

    pub(crate) fn device(id: &str, key: &str) -> DeviceRecord {
        DeviceRecord {
            device_id: id.into(),
            owner_id: "alice".into(),
            device_type: "thermostat".into(),
            policy_id: "p1".into(),
            shared_key_id: key.into(),
        }
    }

    fn fixture() -> WorldState {
        let policies = vec![("p1".to_string(), EndorsementPolicy::out_of(2, &["e1", "e2", "e3"]))];
        let ws = init_genesis(&[device("dev-1", "k1"), device("dev-2", "k1"), device("dev-3", "k2")], &policies)
            .unwrap();
        let mut state = WorldState::new();
        state.apply(&ws, Version::new(0, 0));
        state.advance_height();
        state
    }

    fn dev(id: &str) -> Caller<'_> {
        Caller { id, role: Role::Device }
    }

    #[test]
    fn genesis_has_one_key_per_record() {
        let policies = vec![("p1".to_string(), EndorsementPolicy::principal("e1"))];
        let ws = init_genesis(&[device("a", "k"), device("b", "k")], &policies).unwrap();
        assert_eq!(ws.len(), 3);
    }

    #[test]
    fn genesis_preconditions() {
        let policies = vec![("p1".to_string(), EndorsementPolicy::principal("e1"))];
        let mut orphan = device("a", "k");
        orphan.policy_id = "p9".into();
        assert!(matches!(
            init_genesis(&[orphan], &policies),
            Err(ChaincodeError::DanglingPolicyRef { .. })
        ));
        assert_eq!(init_genesis(&[], &policies), Err(ChaincodeError::EmptyRegistry));
        assert_eq!(
            init_genesis(&[device("a", "k"), device("a", "k")], &policies),
            Err(ChaincodeError::DuplicateDevice("a".into()))
        );
    }

    #[test]
    fn unknown_caller_is_rejected_before_data_reads() {
        let state = fixture();
        let err = execute(&ChaincodeArgs::store("intruder-7", b"x".to_vec()), dev("intruder-7"), &state)
            .unwrap_err();
        assert_eq!(err.error, ChaincodeError::UnknownCaller("intruder-7".into()));
        assert!(err.read_set.keys().all(|k| k.starts_with(REGISTRY_PREFIX)));
    }

    #[test]
    fn first_store_writes_seq_zero() {
        let state = fixture();
        let out = execute(&ChaincodeArgs::store("dev-1", b"21.5C".to_vec()), dev("dev-1"), &state).unwrap();
        let keys: Vec<&str> = out.write_set.entries().iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["data/dev-1/0", "seq/dev-1"]);
        assert_eq!(out.write_set.get("seq/dev-1"), Some(&WriteValue::put(1u64.to_be_bytes().to_vec())));
        assert_eq!(
            out.read_set.entries(),
            &[
                ("registry/dev-1".to_string(), Some(Version::new(0, 0))),
                ("seq/dev-1".to_string(), None)
            ]
        );
        assert_eq!(out.response, Response::Stored { seq: 0 });
    }

    #[test]
    fn access_requires_shared_key() {
        let state = fixture();
        let err = execute(&ChaincodeArgs::access("dev-1", 0), dev("dev-3"), &state).unwrap_err();
        assert!(matches!(err.error, ChaincodeError::SharedKeyMismatch { .. }));
        let err = execute(&ChaincodeArgs::access("dev-1", 0), dev("dev-2"), &state).unwrap_err();
        assert_eq!(err.error, ChaincodeError::UnknownKey("data/dev-1/0".into()));
    }

    #[test]
    fn monitor_reads_every_item() {
        let mut state = fixture();
        for block in 1..=3u64 {
            let out = execute(&ChaincodeArgs::store("dev-1", vec![block as u8]), dev("dev-1"), &state).unwrap();
            state.apply(&out.write_set, Version::new(block, 0));
            state.advance_height();
        }
        let out = execute(&ChaincodeArgs::monitor("dev-1"), dev("dev-2"), &state).unwrap();
        let Response::Items(items) = &out.response else {
            panic!("expected items")
        };
        assert_eq!(items.len(), 3);
        assert!(out.write_set.is_empty());
        assert_eq!(out.read_set.keys().filter(|k| k.starts_with(DATA_PREFIX)).count(), 3);
        assert_eq!(out.read_set.keys().filter(|k| k.starts_with(REGISTRY_PREFIX)).count(), 2);
    }

    #[test]
    fn register_needs_admin_and_fresh_id() {
        let state = fixture();
        let args = ChaincodeArgs::register(device("dev-9", "k1"));
        let err = execute(&args, dev("dev-1"), &state).unwrap_err();
        assert_eq!(err.error, ChaincodeError::NotAdmin("dev-1".into()));
        let admin = Caller { id: "admin", role: Role::Admin };
        let out = execute(&args, admin, &state).unwrap();
        assert_eq!(out.write_set.len(), 1);
        let dup = execute(&ChaincodeArgs::register(device("dev-1", "k1")), admin, &state).unwrap_err();
        assert_eq!(dup.error, ChaincodeError::DeviceExists("dev-1".into()));
    }

    #[test]
    fn execution_is_deterministic() {
        let state = fixture();
        let args = ChaincodeArgs::store("dev-2", vec![7; 64]);
        let a = execute(&args, dev("dev-2"), &state).unwrap();
        let b = execute(&args, dev("dev-2"), &state.snapshot()).unwrap();
        assert_eq!(a.read_set.to_canonical_bytes(), b.read_set.to_canonical_bytes());
        assert_eq!(a.write_set.to_canonical_bytes(), b.write_set.to_canonical_bytes());
        assert_eq!(a.response.to_canonical_bytes(), b.response.to_canonical_bytes());
    }

    #[test]
    fn args_roundtrip() {
        for args in [
            ChaincodeArgs::store("d", vec![1, 2]),
            ChaincodeArgs::access("d", 4),
            ChaincodeArgs::monitor("d"),
            ChaincodeArgs::register(device("d", "k")),
        ] {
            assert_eq!(ChaincodeArgs::from_canonical_bytes(&args.to_canonical_bytes()).unwrap(), args);
        }
    }
}
