// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! An execute-order-validate permissioned ledger for smart-home IoT devices.
//!
//! Transactions are simulated by endorsers against a committed snapshot
//! ([`endorsement`]), totally ordered and batched into hash-chained blocks
//! ([`ordering`]), then validated and committed by peers ([`ledger`]).
//! [`simnet`] drives the whole pipeline on a simulated clock and [`bench`]
//! runs the sweep experiments behind the command-line tool.

pub mod bench;
pub mod chaincode;
pub mod clock;
pub mod codec;
pub mod config;
pub mod endorsement;
pub mod ledger;
pub mod membership;
pub mod ordering;
pub mod rwset;
pub mod simnet;

pub use codec::{Decode, Digest, Encode};
pub use rwset::{ReadSet, Version, WriteSet, WriteValue};
