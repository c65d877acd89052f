// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Arrival schedules. Honest and attack traffic come from separate random
//! streams, so adding attackers never perturbs the honest schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::chaincode::TxType;
use crate::clock::{SimDuration, SimTime};

use super::WorkloadSpec;

const ATTACK_STREAM: u64 = 0xA77A_C4ED_5EED_0001;

/// One scheduled proposal. `actor` indexes the honest device list or the
/// attacker list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedTx {
    pub at: SimTime,
    pub actor: u32,
    pub kind: TxType,
}

fn poisson_times(rng: &mut ChaCha8Rng, rate: f64, duration: SimDuration, mut per_arrival: impl FnMut(&mut ChaCha8Rng, SimTime)) {
    if rate <= 0.0 {
        return;
    }
    let gap = Exp::new(rate).expect("positive rate");
    let mut t = 0.0f64;
    let end = duration.as_secs_f64();
    loop {
        t += gap.sample(rng);
        if t >= end {
            break;
        }
        per_arrival(rng, SimTime(SimDuration::from_secs_f64(t).as_nanos()));
    }
}

/// Honest arrivals over `[0, duration)`. Every arrival draws its gap, device
/// and type in that order.
pub fn plan_honest(spec: &WorkloadSpec) -> Vec<PlannedTx> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut out = Vec::with_capacity((spec.arrival_rate * spec.duration.as_secs_f64() * 1.1) as usize);
    let mix = spec.tx_mix;
    poisson_times(&mut rng, spec.arrival_rate, spec.duration, |rng, at| {
        let actor = rng.gen_range(0..spec.device_count);
        let u: f64 = rng.gen();
        let kind = if u < mix.store {
            TxType::Store
        } else if u < mix.store + mix.access {
            TxType::Access
        } else {
            TxType::Monitor
        };
        out.push(PlannedTx { at, actor, kind });
    });
    out
}

/// Attack arrivals: store proposals from random attackers.
pub fn plan_attack(spec: &WorkloadSpec) -> Vec<PlannedTx> {
    if spec.attacker_count == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ ATTACK_STREAM);
    let mut out = Vec::new();
    poisson_times(&mut rng, spec.attack_rate, spec.duration, |rng, at| {
        let actor = rng.gen_range(0..spec.attacker_count);
        out.push(PlannedTx {
            at,
            actor,
            kind: TxType::Store,
        });
    });
    out
}
