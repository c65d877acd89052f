// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Execution phase: proposals, endorsements and envelope assembly.

pub mod policy;

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::chaincode::{self, Caller, ChaincodeArgs, ChaincodeError, Response, StateView};
use crate::codec::{Decode, DecodeError, Decoder, Digest, Encode, Encoder};
use crate::membership::{Directory, Identity, Role, Signature};
use crate::rwset::{ReadSet, WriteSet};

pub use policy::{EndorsementPolicy, PolicyError};

const PROPOSAL_TAG: &[u8] = b"eov-proposal";
const TX_ID_TAG: &[u8] = b"eov-txid";
const RWSET_TAG: &[u8] = b"eov-rwset";
const ENDORSEMENT_TAG: &[u8] = b"eov-endorsement";
const ENVELOPE_TAG: &[u8] = b"eov-envelope";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndorseError {
    #[error("`{0}` is not an endorser")]
    NotEndorser(String),
    #[error("client signature on proposal does not verify")]
    BadClientSignature,
    #[error("proposal transaction id does not match its contents")]
    TxIdMismatch,
    #[error("chaincode rejected the proposal: {0}")]
    ChaincodeRejection(ChaincodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CollectError {
    #[error("no endorsements to collect")]
    NoEndorsements,
    #[error("endorsement from `{0}` does not verify")]
    BadEndorserSignature(String),
    #[error("endorsers produced different results")]
    DivergentResults,
    #[error("endorsement policy not satisfied")]
    PolicyUnsatisfied,
}

pub fn compute_tx_id(client_id: &str, nonce: u64, args: &ChaincodeArgs) -> Digest {
    Digest::of_parts(&[
        TX_ID_TAG,
        client_id.as_bytes(),
        &nonce.to_be_bytes(),
        &args.to_canonical_bytes(),
    ])
}

fn proposal_message(channel_id: &str, args: &ChaincodeArgs, client_id: &str, nonce: u64) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(PROPOSAL_TAG);
    enc.str(channel_id);
    args.encode(&mut enc);
    enc.str(client_id);
    enc.u64(nonce);
    enc.into_bytes()
}

/// A signed request to run the contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub tx_id: Digest,
    pub channel_id: String,
    pub args: ChaincodeArgs,
    pub client_id: String,
    pub nonce: u64,
    pub client_sig: Signature,
}

impl Proposal {
    pub fn new(channel_id: &str, args: ChaincodeArgs, client: &Identity, nonce: u64) -> Self {
        let msg = proposal_message(channel_id, &args, client.id(), nonce);
        Proposal {
            tx_id: compute_tx_id(client.id(), nonce, &args),
            channel_id: channel_id.to_owned(),
            client_id: client.id().to_owned(),
            client_sig: client.sign(&msg),
            args,
            nonce,
        }
    }

    pub fn signed_message(&self) -> Vec<u8> {
        proposal_message(&self.channel_id, &self.args, &self.client_id, self.nonce)
    }

    pub fn tx_id_is_consistent(&self) -> bool {
        self.tx_id == compute_tx_id(&self.client_id, self.nonce, &self.args)
    }
}

impl Encode for Proposal {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.tx_id);
        enc.str(&self.channel_id);
        self.args.encode(enc);
        enc.str(&self.client_id);
        enc.u64(self.nonce);
        self.client_sig.encode(enc);
    }
}

impl Decode for Proposal {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Proposal {
            tx_id: dec.digest()?,
            channel_id: dec.string()?,
            args: ChaincodeArgs::decode(dec)?,
            client_id: dec.string()?,
            nonce: dec.u64()?,
            client_sig: Signature::decode(dec)?,
        })
    }
}

/// Read set, write set and response of one simulation, with their digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulationResult {
    pub read_set: ReadSet,
    pub write_set: WriteSet,
    pub response: Response,
    digest: Digest,
}

impl SimulationResult {
    pub fn new(read_set: ReadSet, write_set: WriteSet, response: Response) -> Self {
        let digest = Digest::of_parts(&[
            RWSET_TAG,
            &read_set.to_canonical_bytes(),
            &write_set.to_canonical_bytes(),
            &response.to_canonical_bytes(),
        ]);
        SimulationResult {
            read_set,
            write_set,
            response,
            digest,
        }
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }
}

impl Encode for SimulationResult {
    fn encode(&self, enc: &mut Encoder) {
        self.read_set.encode(enc);
        self.write_set.encode(enc);
        self.response.encode(enc);
    }
}

impl Decode for SimulationResult {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(SimulationResult::new(
            ReadSet::decode(dec)?,
            WriteSet::decode(dec)?,
            Response::decode(dec)?,
        ))
    }
}

pub fn endorsement_message(tx_id: &Digest, rwset_digest: &Digest) -> Vec<u8> {
    let mut msg = Vec::with_capacity(ENDORSEMENT_TAG.len() + 64);
    msg.extend_from_slice(ENDORSEMENT_TAG);
    msg.extend_from_slice(tx_id.as_bytes());
    msg.extend_from_slice(rwset_digest.as_bytes());
    msg
}

/// An endorser's signed attestation over a simulation result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endorsement {
    pub tx_id: Digest,
    pub result: Arc<SimulationResult>,
    pub endorser_id: String,
    pub endorser_sig: Signature,
}

impl Endorsement {
    pub fn rwset_digest(&self) -> Digest {
        self.result.digest()
    }

    pub fn verify(&self, directory: &Directory) -> bool {
        self.endorser_sig.signer_id == self.endorser_id
            && directory.verify_signature(
                &endorsement_message(&self.tx_id, &self.rwset_digest()),
                &self.endorser_sig,
            )
    }
}

/// Verifies the proposal and checks the caller's identity. Returns the
/// caller's role.
pub fn check_proposal(proposal: &Proposal, directory: &Directory) -> Result<Role, EndorseError> {
    if !proposal.tx_id_is_consistent() {
        return Err(EndorseError::TxIdMismatch);
    }
    if proposal.client_sig.signer_id != proposal.client_id
        || !directory.verify_signature(&proposal.signed_message(), &proposal.client_sig)
    {
        return Err(EndorseError::BadClientSignature);
    }
    Ok(directory
        .get(&proposal.client_id)
        .map(|who| who.role)
        .expect("signature verified against a known identity"))
}

/// Simulates `proposal` against `state` and signs the result.
pub fn endorse<V: StateView + ?Sized>(
    proposal: &Proposal,
    state: &V,
    endorser: &Identity,
    directory: &Directory,
) -> Result<Endorsement, EndorseError> {
    if endorser.role() != Role::Endorser {
        return Err(EndorseError::NotEndorser(endorser.id().to_owned()));
    }
    let role = check_proposal(proposal, directory)?;
    let result = simulate(proposal, role, state).map_err(EndorseError::ChaincodeRejection)?;
    Ok(sign_result(proposal.tx_id, result, endorser))
}

/// Runs the contract for an already checked proposal.
pub fn simulate<V: StateView + ?Sized>(
    proposal: &Proposal,
    role: Role,
    state: &V,
) -> Result<Arc<SimulationResult>, ChaincodeError> {
    let caller = Caller {
        id: &proposal.client_id,
        role,
    };
    let out = chaincode::execute(&proposal.args, caller, state).map_err(|rejection| rejection.error)?;
    Ok(Arc::new(SimulationResult::new(out.read_set, out.write_set, out.response)))
}

/// Signs an already computed result. Endorsers that simulate against the same
/// snapshot can share one result.
pub fn sign_result(tx_id: Digest, result: Arc<SimulationResult>, endorser: &Identity) -> Endorsement {
    let endorser_sig = endorser.sign(&endorsement_message(&tx_id, &result.digest()));
    Endorsement {
        tx_id,
        result,
        endorser_id: endorser.id().to_owned(),
        endorser_sig,
    }
}

/// The unit submitted for ordering.
///
/// Wire form: proposal, the shared simulation result (once), the endorser
/// signatures, then the client's assembly signature over everything before
/// it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionEnvelope {
    pub proposal: Proposal,
    pub result: Arc<SimulationResult>,
    pub endorsements: Vec<Signature>,
    pub assembled_sig: Signature,
    wire_size: u32,
    digest: Digest,
}

fn envelope_body(proposal: &Proposal, result: &SimulationResult, endorsements: &[Signature]) -> Vec<u8> {
    let mut enc = Encoder::new();
    proposal.encode(&mut enc);
    result.encode(&mut enc);
    enc.seq(endorsements, |enc, sig| sig.encode(enc));
    enc.into_bytes()
}

fn assembly_message(body: &[u8]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(ENVELOPE_TAG.len() + 32);
    msg.extend_from_slice(ENVELOPE_TAG);
    msg.extend_from_slice(Digest::of(body).as_bytes());
    msg
}

impl TransactionEnvelope {
    /// Builds and client-signs an envelope without any checks.
    pub fn assemble(
        proposal: Proposal,
        result: Arc<SimulationResult>,
        endorsements: Vec<Signature>,
        client: &Identity,
    ) -> Self {
        let body = envelope_body(&proposal, &result, &endorsements);
        let assembled_sig = client.sign(&assembly_message(&body));
        Self::finish(proposal, result, endorsements, assembled_sig, body)
    }

    fn finish(
        proposal: Proposal,
        result: Arc<SimulationResult>,
        endorsements: Vec<Signature>,
        assembled_sig: Signature,
        mut body: Vec<u8>,
    ) -> Self {
        let mut enc = Encoder::new();
        assembled_sig.encode(&mut enc);
        body.extend_from_slice(&enc.into_bytes());
        TransactionEnvelope {
            proposal,
            result,
            endorsements,
            assembled_sig,
            wire_size: body.len() as u32,
            digest: Digest::of(&body),
        }
    }

    pub fn tx_id(&self) -> Digest {
        self.proposal.tx_id
    }

    pub fn channel_id(&self) -> &str {
        &self.proposal.channel_id
    }

    pub fn wire_size_bytes(&self) -> u32 {
        self.wire_size
    }

    /// Digest of the canonical bytes; the Merkle leaf.
    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn rwset_digest(&self) -> Digest {
        self.result.digest()
    }

    pub fn endorser_ids(&self) -> BTreeSet<String> {
        self.endorsements.iter().map(|s| s.signer_id.clone()).collect()
    }

    /// Message covered by each endorser signature.
    pub fn endorsement_message(&self) -> Vec<u8> {
        endorsement_message(&self.tx_id(), &self.rwset_digest())
    }

    /// Message covered by the assembly signature.
    pub fn assembly_message(&self) -> Vec<u8> {
        assembly_message(&envelope_body(&self.proposal, &self.result, &self.endorsements))
    }
}

impl Encode for TransactionEnvelope {
    fn encode(&self, enc: &mut Encoder) {
        self.proposal.encode(enc);
        self.result.encode(enc);
        enc.seq(&self.endorsements, |enc, sig| sig.encode(enc));
        self.assembled_sig.encode(enc);
    }

    fn canonical_len(&self) -> usize {
        self.wire_size as usize
    }
}

impl Decode for TransactionEnvelope {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let proposal = Proposal::decode(dec)?;
        let result = Arc::new(SimulationResult::decode(dec)?);
        let endorsements = dec.seq(Signature::decode)?;
        if endorsements.is_empty() {
            return Err(DecodeError::Invalid("envelope without endorsements".into()));
        }
        let assembled_sig = Signature::decode(dec)?;
        let body = envelope_body(&proposal, &result, &endorsements);
        Ok(Self::finish(proposal, result, endorsements, assembled_sig, body))
    }
}

/// Checks endorsements against each other and the policy, then assembles and
/// client-signs the envelope.
pub fn collect(
    proposal: &Proposal,
    endorsements: &[Endorsement],
    policy: &EndorsementPolicy,
    client: &Identity,
    directory: &Directory,
) -> Result<TransactionEnvelope, CollectError> {
    if endorsements.is_empty() {
        return Err(CollectError::NoEndorsements);
    }
    for e in endorsements {
        if e.tx_id != proposal.tx_id || !e.verify(directory) {
            return Err(CollectError::BadEndorserSignature(e.endorser_id.clone()));
        }
    }
    collect_verified(proposal, endorsements, policy, client)
}

/// [`collect`] without re-checking endorser signatures, for endorsements the
/// caller produced or verified itself.
pub fn collect_verified(
    proposal: &Proposal,
    endorsements: &[Endorsement],
    policy: &EndorsementPolicy,
    client: &Identity,
) -> Result<TransactionEnvelope, CollectError> {
    let first = endorsements.first().ok_or(CollectError::NoEndorsements)?;
    if endorsements.iter().any(|e| e.rwset_digest() != first.rwset_digest()) {
        return Err(CollectError::DivergentResults);
    }
    let signers: BTreeSet<String> = endorsements.iter().map(|e| e.endorser_id.clone()).collect();
    if !policy.evaluate(&signers) {
        return Err(CollectError::PolicyUnsatisfied);
    }
    let mut sigs: Vec<Signature> = Vec::with_capacity(endorsements.len());
    for e in endorsements {
        if !sigs.iter().any(|s| s.signer_id == e.endorser_id) {
            sigs.push(e.endorser_sig.clone());
        }
    }
    Ok(TransactionEnvelope::assemble(
        proposal.clone(),
        Arc::clone(&first.result),
        sigs,
        client,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaincode::{init_genesis, DeviceRecord};
    use crate::ledger::state::WorldState;
    use crate::membership::Membership;
    use crate::rwset::{Version, WriteValue};

    struct Fixture {
        msp: Membership,
        state: WorldState,
    }

    fn fixture() -> Fixture {
        let mut msp = Membership::new();
        for (i, id) in ["e1", "e2", "e3"].iter().enumerate() {
            msp.create_identity(id, Role::Endorser, [i as u8 + 1; 32]).unwrap();
        }
        msp.create_identity("dev-1", Role::Device, [10; 32]).unwrap();
        msp.create_identity("intruder-7", Role::Device, [11; 32]).unwrap();
        let record = DeviceRecord {
            device_id: "dev-1".into(),
            owner_id: "alice".into(),
            device_type: "camera".into(),
            policy_id: "p1".into(),
            shared_key_id: "k1".into(),
        };
        let ws = init_genesis(&[record], &[("p1".into(), EndorsementPolicy::out_of(2, &["e1", "e2", "e3"]))])
            .unwrap();
        let mut state = WorldState::new();
        state.apply(&ws, Version::new(0, 0));
        state.advance_height();
        Fixture { msp, state }
    }

    fn proposal(f: &Fixture, who: &str) -> Proposal {
        Proposal::new("home-1", ChaincodeArgs::store(who, b"22.1".to_vec()), f.msp.get(who).unwrap(), 1)
    }

    #[test]
    fn happy_path_store() {
        let f = fixture();
        let dir = f.msp.directory();
        let p = proposal(&f, "dev-1");
        let e = endorse(&p, &f.state, f.msp.get("e1").unwrap(), &dir).unwrap();
        assert!(!e.result.write_set.is_empty());
        assert!(e.verify(&dir));
    }

    #[test]
    fn unregistered_device_is_rejected() {
        let f = fixture();
        let p = proposal(&f, "intruder-7");
        assert_eq!(
            endorse(&p, &f.state, f.msp.get("e1").unwrap(), &f.msp.directory()).unwrap_err(),
            EndorseError::ChaincodeRejection(ChaincodeError::UnknownCaller("intruder-7".into()))
        );
    }

    #[test]
    fn tampered_client_signature() {
        let f = fixture();
        let mut p = proposal(&f, "dev-1");
        p.client_sig.bytes[0] ^= 1;
        assert_eq!(
            endorse(&p, &f.state, f.msp.get("e1").unwrap(), &f.msp.directory()).unwrap_err(),
            EndorseError::BadClientSignature
        );
        let mut q = proposal(&f, "dev-1");
        q.nonce = 2;
        assert_eq!(
            endorse(&q, &f.state, f.msp.get("e1").unwrap(), &f.msp.directory()).unwrap_err(),
            EndorseError::TxIdMismatch
        );
    }

    #[test]
    fn non_endorser_cannot_endorse() {
        let f = fixture();
        let p = proposal(&f, "dev-1");
        assert!(matches!(
            endorse(&p, &f.state, f.msp.get("dev-1").unwrap(), &f.msp.directory()),
            Err(EndorseError::NotEndorser(_))
        ));
    }

    #[test]
    fn collect_checks_policy_and_agreement() {
        let f = fixture();
        let dir = f.msp.directory();
        let p = proposal(&f, "dev-1");
        let client = f.msp.get("dev-1").unwrap();
        let e1 = endorse(&p, &f.state, f.msp.get("e1").unwrap(), &dir).unwrap();
        let e2 = endorse(&p, &f.state, f.msp.get("e2").unwrap(), &dir).unwrap();
        assert_eq!(e1.rwset_digest(), e2.rwset_digest());

        let two_of_two = EndorsementPolicy::out_of(2, &["e1", "e2"]);
        let env = collect(&p, &[e1.clone(), e2.clone()], &two_of_two, client, &dir).unwrap();
        assert_eq!(env.wire_size_bytes() as usize, env.to_canonical_bytes().len());

        let two_of_three = EndorsementPolicy::out_of(2, &["e1", "e2", "e3"]);
        assert_eq!(
            collect(&p, std::slice::from_ref(&e1), &two_of_three, client, &dir).unwrap_err(),
            CollectError::PolicyUnsatisfied
        );

        let mut ws = e2.result.write_set.entries().to_vec();
        ws[0].1 = WriteValue::put(b"forged".to_vec());
        let other = SimulationResult::new(
            e2.result.read_set.clone(),
            WriteSet::from_map(ws.into_iter().collect()),
            e2.result.response.clone(),
        );
        let divergent = sign_result(p.tx_id, Arc::new(other), f.msp.get("e2").unwrap());
        assert_eq!(
            collect(&p, &[e1.clone(), divergent], &two_of_two, client, &dir).unwrap_err(),
            CollectError::DivergentResults
        );

        let mut forged = e2;
        forged.endorser_sig.bytes[5] ^= 0x40;
        assert_eq!(
            collect(&p, &[e1, forged], &two_of_two, client, &dir).unwrap_err(),
            CollectError::BadEndorserSignature("e2".into())
        );
    }

    #[test]
    fn envelope_roundtrip_preserves_digest() {
        let f = fixture();
        let dir = f.msp.directory();
        let p = proposal(&f, "dev-1");
        let e1 = endorse(&p, &f.state, f.msp.get("e1").unwrap(), &dir).unwrap();
        let e3 = endorse(&p, &f.state, f.msp.get("e3").unwrap(), &dir).unwrap();
        let policy = EndorsementPolicy::out_of(2, &["e1", "e2", "e3"]);
        let env = collect(&p, &[e1, e3], &policy, f.msp.get("dev-1").unwrap(), &dir).unwrap();
        let bytes = env.to_canonical_bytes();
        let back = TransactionEnvelope::from_canonical_bytes(&bytes).unwrap();
        assert_eq!(back, env);
        assert_eq!(back.digest(), Digest::of(&bytes));
        assert!(dir.verify_signature(&back.assembly_message(), &back.assembled_sig));
    }
}
