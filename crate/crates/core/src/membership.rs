// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Membership service: identities, keys and signatures.
//!
//! Credentials are raw Ed25519 keypairs derived from a 32-byte seed, so a
//! network built from the same configuration always has the same keys.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Decoder, Encode, Encoder};

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error("identity `{0}` is already registered")]
    DuplicateId(String),
    #[error("unknown identity `{0}`")]
    UnknownIdentity(String),
    #[error("malformed signature: expected {SIGNATURE_LEN} bytes, got {0}")]
    MalformedSignature(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Device,
    Endorser,
    Orderer,
    Admin,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Device => 0,
            Role::Endorser => 1,
            Role::Orderer => 2,
            Role::Admin => 3,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Device => "device",
            Role::Endorser => "endorser",
            Role::Orderer => "orderer",
            Role::Admin => "admin",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "device" => Ok(Role::Device),
            "endorser" => Ok(Role::Endorser),
            "orderer" => Ok(Role::Orderer),
            "admin" => Ok(Role::Admin),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &hex::encode(self.0)[..16])
    }
}

/// A signature together with the id of the identity that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub signer_id: String,
    pub bytes: Vec<u8>,
}

impl Encode for Signature {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.signer_id);
        enc.bytes(&self.bytes);
    }
}

impl Decode for Signature {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Signature {
            signer_id: dec.string()?,
            bytes: dec.bytes()?.to_vec(),
        })
    }
}

/// A named principal holding signing material.
#[derive(Clone)]
pub struct Identity {
    id: String,
    role: Role,
    signing_key: SigningKey,
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Identity")
            .field("id", &self.id)
            .field("role", &self.role)
            .field("public_key", &self.public_key())
            .finish_non_exhaustive()
    }
}

impl Identity {
    /// Derives the keypair from `seed`. Same inputs, same identity.
    pub fn from_seed(id: impl Into<String>, role: Role, seed: [u8; 32]) -> Self {
        Identity {
            id: id.into(),
            role,
            signing_key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn generate<R: rand::RngCore + rand::CryptoRng>(
        id: impl Into<String>,
        role: Role,
        rng: &mut R,
    ) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(id, role, seed)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing_key.verifying_key().to_bytes())
    }

    pub fn public(&self) -> PublicIdentity {
        PublicIdentity {
            id: self.id.clone(),
            role: self.role,
            public_key: self.public_key(),
        }
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature {
            signer_id: self.id.clone(),
            bytes: self.signing_key.sign(message).to_bytes().to_vec(),
        }
    }
}

/// The shareable half of an [`Identity`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicIdentity {
    pub id: String,
    pub role: Role,
    pub public_key: PublicKey,
}

impl Encode for PublicIdentity {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.id);
        enc.u8(self.role.tag());
        enc.raw(&self.public_key.0);
    }
}

pub fn sign(identity: &Identity, message: &[u8]) -> Signature {
    identity.sign(message)
}

/// Checks `sig` over `message` against `public_key`.
///
/// A signature of the wrong length is an error rather than `false`; a
/// well-formed signature that does not verify (or a key that is not a valid
/// curve point) is `false`.
pub fn verify(public_key: &PublicKey, message: &[u8], sig: &Signature) -> Result<bool, MembershipError> {
    let bytes: [u8; SIGNATURE_LEN] = sig
        .bytes
        .as_slice()
        .try_into()
        .map_err(|_| MembershipError::MalformedSignature(sig.bytes.len()))?;
    let Ok(key) = VerifyingKey::from_bytes(&public_key.0) else {
        return Ok(false);
    };
    let signature = ed25519_dalek::Signature::from_bytes(&bytes);
    Ok(key.verify(message, &signature).is_ok())
}

/// Verifies many `(message, signature, key)` triples at once. `true` only if
/// every signature is well formed and valid; on `false` the caller has to
/// check them one by one to find the culprit.
pub fn verify_batch(items: &[(&[u8], &Signature, &PublicKey)]) -> bool {
    let mut messages = Vec::with_capacity(items.len());
    let mut signatures = Vec::with_capacity(items.len());
    let mut keys = Vec::with_capacity(items.len());
    for (msg, sig, pk) in items {
        let Ok(bytes) = <[u8; SIGNATURE_LEN]>::try_from(sig.bytes.as_slice()) else {
            return false;
        };
        let Ok(key) = VerifyingKey::from_bytes(&pk.0) else {
            return false;
        };
        messages.push(*msg);
        signatures.push(ed25519_dalek::Signature::from_bytes(&bytes));
        keys.push(key);
    }
    ed25519_dalek::verify_batch(&messages, &signatures, &keys).is_ok()
}

/// Read-only lookup of public identities, shared by endorsers, the
/// collector and the validator.
#[derive(Debug, Clone, Default)]
pub struct Directory {
    entries: Arc<BTreeMap<String, PublicIdentity>>,
}

impl Directory {
    pub fn get(&self, id: &str) -> Option<&PublicIdentity> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PublicIdentity> {
        self.entries.values()
    }

    /// Verifies a signature claimed by `sig.signer_id`. Unknown signers and
    /// malformed signatures both count as a failed verification.
    pub fn verify_signature(&self, message: &[u8], sig: &Signature) -> bool {
        self.get(&sig.signer_id)
            .is_some_and(|who| verify(&who.public_key, message, sig).unwrap_or(false))
    }
}

/// The identity registry. Single writer while a network is being set up,
/// read-only (through [`Directory`]) afterwards.
#[derive(Debug, Clone, Default)]
pub struct Membership {
    identities: BTreeMap<String, Identity>,
}

impl Membership {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_identity(
        &mut self,
        id: &str,
        role: Role,
        seed: [u8; 32],
    ) -> Result<&Identity, MembershipError> {
        if self.identities.contains_key(id) {
            return Err(MembershipError::DuplicateId(id.to_owned()));
        }
        let identity = Identity::from_seed(id, role, seed);
        Ok(self.identities.entry(id.to_owned()).or_insert(identity))
    }

    pub fn get(&self, id: &str) -> Option<&Identity> {
        self.identities.get(id)
    }

    pub fn identity(&self, id: &str) -> Result<&Identity, MembershipError> {
        self.get(id)
            .ok_or_else(|| MembershipError::UnknownIdentity(id.to_owned()))
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Identity> {
        self.identities.values().filter(move |i| i.role() == role)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn directory(&self) -> Directory {
        Directory {
            entries: Arc::new(
                self.identities
                    .iter()
                    .map(|(id, identity)| (id.clone(), identity.public()))
                    .collect(),
            ),
        }
    }
}

/// Expands a short label into a 32-byte seed. Used to give generated
/// fleet members stable keys.
pub fn seed_from_label(label: &str) -> [u8; 32] {
    *crate::codec::Digest::of_parts(&[b"eov-seed", label.as_bytes()]).as_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use std::collections::HashSet;

    #[test]
    fn seeded_identity_is_stable() {
        let a = Identity::from_seed("dev-1", Role::Device, [0u8; 32]);
        let b = Identity::from_seed("dev-1", Role::Device, [0u8; 32]);
        assert_eq!(a.public_key(), b.public_key());
        assert_eq!(
            hex::encode(a.public_key().0),
            "3b6a27bcceb6a42d62a3a8d02a6f0d73653215771de243a63ac048a18b59da29"
        );
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut msp = Membership::new();
        msp.create_identity("dev-1", Role::Device, [1; 32]).unwrap();
        assert_eq!(
            msp.create_identity("dev-1", Role::Endorser, [2; 32]).unwrap_err(),
            MembershipError::DuplicateId("dev-1".into())
        );
        assert_eq!(msp.get("dev-1").unwrap().role(), Role::Device);
    }

    #[test]
    fn distinct_seeds_never_collide() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut keys = HashSet::new();
        for i in 0..1000 {
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            let id = Identity::from_seed(format!("d{i}"), Role::Device, seed);
            assert!(keys.insert(id.public_key()), "collision at {i}");
        }
    }

    #[test]
    fn sign_verify_roundtrip_and_tamper() {
        let id = Identity::from_seed("dev-1", Role::Device, [9; 32]);
        let sig = sign(&id, b"reading=21.5");
        assert!(verify(&id.public_key(), b"reading=21.5", &sig).unwrap());
        assert!(!verify(&id.public_key(), b"reading=21.6", &sig).unwrap());
    }

    #[test]
    fn cross_identity_verification_fails() {
        let ids: Vec<Identity> = (0..5u8)
            .map(|i| Identity::from_seed(format!("id-{i}"), Role::Endorser, [i + 1; 32]))
            .collect();
        let msg = b"proposal";
        for signer in &ids {
            let sig = signer.sign(msg);
            for other in &ids {
                let ok = verify(&other.public_key(), msg, &sig).unwrap();
                assert_eq!(ok, signer.id() == other.id(), "{} vs {}", signer.id(), other.id());
            }
        }
    }

    #[test]
    fn wrong_length_signature_is_malformed() {
        let id = Identity::from_seed("dev-1", Role::Device, [9; 32]);
        let mut sig = id.sign(b"m");
        sig.bytes.pop();
        assert_eq!(
            verify(&id.public_key(), b"m", &sig),
            Err(MembershipError::MalformedSignature(63))
        );
    }

    #[test]
    fn batch_verification_agrees_with_single() {
        let ids: Vec<Identity> = (0..4u8)
            .map(|i| Identity::from_seed(format!("id-{i}"), Role::Endorser, [i + 20; 32]))
            .collect();
        let sigs: Vec<Signature> = ids.iter().map(|i| i.sign(i.id().as_bytes())).collect();
        let keys: Vec<PublicKey> = ids.iter().map(Identity::public_key).collect();
        let items: Vec<(&[u8], &Signature, &PublicKey)> = ids
            .iter()
            .zip(&sigs)
            .zip(&keys)
            .map(|((i, s), k)| (i.id().as_bytes(), s, k))
            .collect();
        assert!(verify_batch(&items));
        let mut bad = items.clone();
        bad[2].0 = b"other";
        assert!(!verify_batch(&bad));
    }

    #[test]
    fn directory_rejects_unknown_signer() {
        let mut msp = Membership::new();
        msp.create_identity("e1", Role::Endorser, [3; 32]).unwrap();
        let stranger = Identity::from_seed("e9", Role::Endorser, [4; 32]);
        let dir = msp.directory();
        assert!(!dir.verify_signature(b"m", &stranger.sign(b"m")));
        assert!(dir.verify_signature(b"m", &msp.get("e1").unwrap().sign(b"m")));
    }
}
