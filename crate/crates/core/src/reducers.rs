//! Atomic-update policies applied to one [`WarpRecord`] at a time.
//!
//! Every policy returns the atomic requests it sends to the L2 (ROP) path plus
//! the warp instructions and floating-point adds it spends on the SM. Float
//! summation order is fixed per policy: the serialized reduction folds group
//! members into the leader in ascending lane order, the butterfly reduction
//! uses a shuffle-down tree with offsets 16, 8, 4, 2, 1.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simt::{ffs, popc, LaneMask, WarpState, WARP_SIZE};
use crate::workload::{Slot, Trace, WarpRecord};

/// Shuffle-down offsets of the butterfly tree, in application order.
pub const BUTTERFLY_OFFSETS: [usize; 5] = [16, 8, 4, 2, 1];

/// Warp-instruction cost of each primitive operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstructionCosts {
    pub match_any: u64,
    pub ballot: u64,
    pub popc: u64,
    pub ffs: u64,
    pub branch: u64,
    /// One shuffle plus the dependent add, per parameter.
    pub shuffle_add: u64,
    /// One atomic issue per request.
    pub atomic: u64,
}

pub const COSTS: InstructionCosts = InstructionCosts {
    match_any: 1,
    ballot: 1,
    popc: 1,
    ffs: 1,
    branch: 1,
    shuffle_add: 1,
    atomic: 1,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Address {
    pub primitive: u32,
    pub param: u16,
}

impl Address {
    pub fn new(primitive: u32, param: usize) -> Self {
        Address {
            primitive,
            param: param as u16,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub sm: u32,
    pub subcore: u32,
    pub warp: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicRequest {
    pub address: Address,
    pub value: f64,
    pub source: Origin,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyOutput {
    pub requests: Vec<AtomicRequest>,
    /// Warp instructions, atomic issues included.
    pub core_instructions: u64,
    pub core_fp_adds: u64,
    /// Shuffle-add instructions, a subset of `core_instructions`.
    pub shuffle_instructions: u64,
    /// Length of the dependent shuffle-add chain: each step needs the
    /// previous step's sum before it can issue.
    pub shuffle_steps: u64,
}

impl PolicyOutput {
    fn push(&mut self, primitive: u32, param: usize, value: f64, warp: u32) {
        self.requests.push(AtomicRequest {
            address: Address::new(primitive, param),
            value,
            source: Origin {
                warp,
                ..Origin::default()
            },
        });
        self.core_instructions += COSTS.atomic;
    }

    /// Instructions that are neither shuffles nor atomic issues.
    pub fn overhead_instructions(&self) -> u64 {
        self.core_instructions - self.shuffle_instructions - self.requests.len() as u64 * COSTS.atomic
    }

    pub fn with_slot(mut self, slot: Slot) -> Self {
        for req in &mut self.requests {
            req.source.sm = slot.sm;
            req.source.subcore = slot.subcore;
        }
        self
    }
}

/// Minimum group size for which the reduction happens on the SM.
/// Groups reduce when `size >= threshold`; 0 always reduces, 33 never does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BalancingThreshold(u8);

impl BalancingThreshold {
    pub const ALWAYS: BalancingThreshold = BalancingThreshold(0);
    pub const NEVER: BalancingThreshold = BalancingThreshold(33);

    pub fn new(value: u32) -> Result<Self> {
        if value <= 33 {
            Ok(BalancingThreshold(value as u8))
        } else {
            Err(Error::InvalidThreshold(value))
        }
    }

    pub fn value(self) -> u32 {
        self.0 as u32
    }

    /// The tuner's sweep range, 0..=32.
    pub fn sweep() -> impl Iterator<Item = BalancingThreshold> {
        (0..=32).map(BalancingThreshold)
    }

    #[inline]
    fn admits(self, count: u32) -> bool {
        count >= self.0 as u32
    }
}

impl TryFrom<u32> for BalancingThreshold {
    type Error = Error;
    fn try_from(value: u32) -> Result<Self> {
        BalancingThreshold::new(value)
    }
}

impl From<BalancingThreshold> for u32 {
    fn from(t: BalancingThreshold) -> u32 {
        t.value()
    }
}

impl fmt::Display for BalancingThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-lane atomics: one request per active lane and parameter.
pub fn native_atomics(record: &WarpRecord) -> PolicyOutput {
    let mut out = PolicyOutput::default();
    for lane in record.active.lanes() {
        for (param, &value) in record.grads(lane).iter().enumerate() {
            out.push(record.lane_primitive[lane], param, value, record.warp_id);
        }
    }
    out
}

/// Per-parameter register file of a warp: `regs[param][lane]`.
fn registers(record: &WarpRecord, zero_fill: bool) -> Vec<[f64; WARP_SIZE]> {
    (0..record.params())
        .map(|p| {
            std::array::from_fn(|lane| {
                if zero_fill && !record.active.contains(lane) {
                    0.0
                } else {
                    record.grads(lane)[p]
                }
            })
        })
        .collect()
}

/// Serialized warp-level reduction.
///
/// Lanes are grouped by primitive with `match_any`. A group of at least
/// `threshold` lanes elects its lowest lane as leader, which pulls every other
/// member's `N` values with shuffles in ascending lane order and issues `N`
/// atomics; smaller groups issue their per-lane atomics unchanged.
pub fn reduce_serial(record: &WarpRecord, threshold: BalancingThreshold) -> PolicyOutput {
    let n = record.params();
    let warp = WarpState::with_active(record.active);
    let groups = warp.match_any(&record.lane_primitive);
    let mut regs = registers(record, false);
    let mut out = PolicyOutput::default();
    let mut done = LaneMask::EMPTY;
    // (issuing lane, primitive, param, value); the atomic is one warp
    // instruction, so requests leave in lane order
    let mut issued: Vec<(usize, u32, usize, f64)> = Vec::new();

    for lane in record.active.lanes() {
        if done.contains(lane) {
            continue;
        }
        let group = groups[lane];
        done |= group;
        let same_ct = popc(group);
        out.core_instructions += COSTS.match_any + COSTS.popc + COSTS.branch;

        if threshold.admits(same_ct) {
            let leader = (ffs(group) - 1) as usize;
            out.core_instructions += COSTS.ffs;
            let mut rest = group.without(leader);
            while !rest.is_empty() {
                let src_lane = (ffs(rest) - 1) as usize;
                let src = [src_lane; WARP_SIZE];
                for val in regs.iter_mut() {
                    let fetched = warp.shuffle(val, &src);
                    val[leader] += fetched[leader];
                }
                out.core_instructions += COSTS.ffs + COSTS.branch + n as u64 * COSTS.shuffle_add;
                out.shuffle_instructions += n as u64 * COSTS.shuffle_add;
                out.shuffle_steps += 1;
                out.core_fp_adds += n as u64;
                rest = rest.without(src_lane);
            }
            // loop exit and the leader test
            out.core_instructions += 2 * COSTS.branch;
            for (param, val) in regs.iter().enumerate() {
                issued.push((leader, record.lane_primitive[leader], param, val[leader]));
            }
        } else {
            for member in group.lanes() {
                for (param, &value) in record.grads(member).iter().enumerate() {
                    issued.push((member, record.lane_primitive[member], param, value));
                }
            }
        }
    }
    issued.sort_by_key(|&(lane, ..)| lane);
    for (_, prim, param, value) in issued {
        out.push(prim, param, value, record.warp_id);
    }
    out
}

/// Common primitive of the active lanes, if there is exactly one.
fn convergent_primitive(record: &WarpRecord) -> Option<u32> {
    let lead = record.active.leader()?;
    let prim = record.lane_primitive[lead];
    record
        .active
        .lanes()
        .all(|lane| record.lane_primitive[lane] == prim)
        .then_some(prim)
}

/// Runs the shuffle-down tree on a full warp; lane 0 ends with the sum.
fn butterfly_sum(val: &mut [f64; WARP_SIZE]) {
    let full = WarpState::with_active(LaneMask::FULL);
    for offset in BUTTERFLY_OFFSETS {
        let fetched = full.shuffle_down(val, offset);
        for (v, f) in val.iter_mut().zip(fetched) {
            *v += f;
        }
    }
}

fn fallback(record: &WarpRecord, out: &mut PolicyOutput) {
    for lane in record.active.lanes() {
        for (param, &value) in record.grads(lane).iter().enumerate() {
            out.push(record.lane_primitive[lane], param, value, record.warp_id);
        }
    }
}

/// Butterfly warp-level reduction.
///
/// Inactive lanes are re-activated with zero gradients on the same primitive
/// and remember that they were not active. The tree runs only when every
/// originally active lane references one primitive and at least `threshold`
/// lanes were active; otherwise the originally active lanes issue their own
/// atomics. A warp with no active lane skips the block and costs nothing.
pub fn reduce_bfly(record: &WarpRecord, threshold: BalancingThreshold) -> PolicyOutput {
    if record.active.is_empty() {
        return PolicyOutput::default();
    }
    let n = record.params();
    let full = WarpState::with_active(LaneMask::FULL);
    let was_active: [bool; WARP_SIZE] = std::array::from_fn(|lane| record.active.contains(lane));
    let active_ct = popc(full.ballot(&was_active));

    let mut out = PolicyOutput {
        core_instructions: COSTS.match_any + COSTS.ballot + COSTS.popc + COSTS.branch,
        ..PolicyOutput::default()
    };
    match convergent_primitive(record) {
        Some(prim) if threshold.admits(active_ct) => {
            for (param, mut val) in registers(record, true).into_iter().enumerate() {
                butterfly_sum(&mut val);
                out.push(prim, param, val[0], record.warp_id);
            }
            let tree = (BUTTERFLY_OFFSETS.len() * n) as u64;
            out.core_instructions += tree * COSTS.shuffle_add + COSTS.branch;
            out.shuffle_instructions += tree * COSTS.shuffle_add;
            out.shuffle_steps += BUTTERFLY_OFFSETS.len() as u64;
            out.core_fp_adds += WARP_SIZE as u64 * tree;
        }
        _ => fallback(record, &mut out),
    }
    out
}

/// [`reduce_bfly`] for callers that assert the warp is convergent; reports a
/// record whose active lanes reference more than one primitive.
pub fn reduce_bfly_checked(record: &WarpRecord, threshold: BalancingThreshold) -> Result<PolicyOutput> {
    if record.distinct_primitives() > 1 {
        return Err(Error::NonConvergentWarp {
            warp_id: record.warp_id,
            iteration: record.iteration,
        });
    }
    Ok(reduce_bfly(record, threshold))
}

/// Library-style warp reduction: a full-warp eligibility check and a
/// butterfly reduction for each parameter separately, with no threshold.
pub fn cccl_style(record: &WarpRecord) -> PolicyOutput {
    if record.active.is_empty() {
        return PolicyOutput::default();
    }
    let prim = convergent_primitive(record);
    let mut out = PolicyOutput::default();

    for (param, mut val) in registers(record, true).into_iter().enumerate() {
        out.core_instructions += COSTS.match_any + COSTS.ballot + COSTS.popc + COSTS.branch;
        match prim {
            Some(prim) => {
                butterfly_sum(&mut val);
                let tree = BUTTERFLY_OFFSETS.len() as u64;
                out.core_instructions += tree * COSTS.shuffle_add + COSTS.branch;
                out.shuffle_instructions += tree * COSTS.shuffle_add;
                out.shuffle_steps += tree;
                out.core_fp_adds += WARP_SIZE as u64 * tree;
                out.push(prim, param, val[0], record.warp_id);
            }
            None => {
                for lane in record.active.lanes() {
                    out.push(
                        record.lane_primitive[lane],
                        param,
                        record.grads(lane)[param],
                        record.warp_id,
                    );
                }
            }
        }
    }
    out
}

/// Ground-truth accumulation of every active lane's contribution, in trace order.
pub fn oracle_sum(trace: &Trace) -> BTreeMap<Address, f64> {
    let mut sums = BTreeMap::new();
    for rec in &trace.records {
        for lane in rec.active.lanes() {
            for (param, &value) in rec.grads(lane).iter().enumerate() {
                *sums.entry(Address::new(rec.lane_primitive[lane], param)).or_insert(0.0) += value;
            }
        }
    }
    sums
}

/// Per-address sum of delivered requests, in stream order.
pub fn delivered_sums<'a>(requests: impl IntoIterator<Item = &'a AtomicRequest>) -> BTreeMap<Address, f64> {
    let mut sums = BTreeMap::new();
    for req in requests {
        *sums.entry(req.address).or_insert(0.0) += req.value;
    }
    sums
}

/// Atomic-update policy for a whole run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    Native,
    SerialReduce(BalancingThreshold),
    ButterflyReduce(BalancingThreshold),
    Cccl,
    /// Hardware `atomred` path; the coalescing and routing happen in the
    /// simulator.
    HwAtomred,
}

impl Policy {
    /// Core-side output for `record`. For [`Policy::HwAtomred`] this is the
    /// stream issued when every transaction takes the direct LSU route, one
    /// `atomred` per lane and parameter.
    pub fn apply(&self, record: &WarpRecord) -> PolicyOutput {
        match *self {
            Policy::Native | Policy::HwAtomred => native_atomics(record),
            Policy::SerialReduce(t) => reduce_serial(record, t),
            Policy::ButterflyReduce(t) => reduce_bfly(record, t),
            Policy::Cccl => cccl_style(record),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Native => "NATIVE",
            Policy::SerialReduce(_) => "SW_S",
            Policy::ButterflyReduce(_) => "SW_B",
            Policy::Cccl => "CCCL",
            Policy::HwAtomred => "HW_ATOMRED",
        }
    }

    pub fn threshold(&self) -> Option<BalancingThreshold> {
        match *self {
            Policy::SerialReduce(t) | Policy::ButterflyReduce(t) => Some(t),
            _ => None,
        }
    }

    /// Applies the policy to every record and tags requests with their slot.
    /// Request order follows record order.
    pub fn apply_trace(&self, trace: &Trace, slot_of: impl Fn(u32) -> Slot + Sync) -> Vec<AtomicRequest> {
        let one = |rec: &WarpRecord| self.apply(rec).with_slot(slot_of(rec.warp_id)).requests;
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let chunks: Vec<Vec<AtomicRequest>> = trace.records.par_iter().map(one).collect();
            chunks.into_iter().flatten().collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            trace.records.iter().flat_map(one).collect()
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.threshold() {
            Some(t) => write!(f, "{}({})", self.name(), t),
            None => f.write_str(self.name()),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    /// Accepts `NATIVE`, `CCCL`, `HW_ATOMRED`, `SW_S(t)`, `SW_B(t)`, case
    /// insensitive, with `:t` as an alternative to `(t)`.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownPolicy(s.to_string());
        let upper = s.trim().to_ascii_uppercase().replace('-', "_");
        let (name, arg) = match upper.find(['(', ':']) {
            Some(i) => {
                let arg = upper[i + 1..].trim_end_matches(')').trim();
                (upper[..i].trim(), Some(arg))
            }
            None => (upper.as_str(), None),
        };
        let threshold = |arg: Option<&str>| -> Result<BalancingThreshold> {
            let v: u32 = arg.ok_or_else(unknown)?.parse().map_err(|_| unknown())?;
            BalancingThreshold::new(v)
        };
        match (name, arg) {
            ("NATIVE", None) => Ok(Policy::Native),
            ("CCCL", None) => Ok(Policy::Cccl),
            ("HW_ATOMRED" | "ATOMRED", None) => Ok(Policy::HwAtomred),
            ("SW_S", a) => Ok(Policy::SerialReduce(threshold(a)?)),
            ("SW_B", a) => Ok(Policy::ButterflyReduce(threshold(a)?)),
            _ => Err(unknown()),
        }
    }
}
