//! Cycle-approximate simulation of the atomic path: sub-core issue, the
//! per-SM LSU queue, the interconnect and the L2 ROP units, plus the
//! `atomred` additions (address coalescer, contention determination and a
//! single-adder reduction unit per sub-core).
//!
//! The machine advances in whole cycles. Within a cycle the stages run in a
//! fixed order: interconnect arrivals, ROP service, reduction units, sub-core
//! issue, LSU dispatch. A request issued at cycle `t` can leave the SM in the
//! same cycle and is serviced at `t + interconnect_latency + 1` at the
//! earliest.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::reducers::{Address, AtomicRequest, Origin, Policy, PolicyOutput};
use crate::simt::{LaneMask, WarpState};
use crate::workload::{Slot, Trace, WarpRecord};

/// Weight of one interconnect packet in the energy proxy.
pub const ENERGY_PER_PACKET: f64 = 10.0;
/// Weight of one floating-point add (ROP or SM) in the energy proxy.
pub const ENERGY_PER_FP_OP: f64 = 1.0;

/// Capacity of a queue; `Unbounded` never fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueueDepth {
    Bounded(usize),
    Unbounded,
}

impl QueueDepth {
    #[inline]
    pub fn admits(self, len: usize) -> bool {
        match self {
            QueueDepth::Bounded(d) => len < d,
            QueueDepth::Unbounded => true,
        }
    }
}

impl fmt::Display for QueueDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueueDepth::Bounded(d) => write!(f, "{d}"),
            QueueDepth::Unbounded => f.write_str("inf"),
        }
    }
}

impl Serialize for QueueDepth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            QueueDepth::Bounded(d) => s.serialize_u64(*d as u64),
            QueueDepth::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for QueueDepth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(QueueDepth::Bounded(v as usize)),
            Raw::Str(s) if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("unbounded") => {
                Ok(QueueDepth::Unbounded)
            }
            Raw::Str(s) => s
                .parse()
                .map(QueueDepth::Bounded)
                .map_err(|_| serde::de::Error::custom(format!("invalid queue depth `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub name: String,
    pub num_sms: u32,
    pub subcores_per_sm: u32,
    /// Entries of the LSU queue shared by the sub-cores of one SM.
    pub lsu_queue_depth: QueueDepth,
    /// Requests per cycle one SM's LSU can hand to the interconnect.
    pub lsu_dispatch_width: u32,
    pub rop_units: u32,
    /// Requests per cycle per ROP unit.
    pub rop_throughput: u32,
    /// Input buffer entries per ROP unit; the interconnect only accepts a
    /// packet when a buffer entry is free for it.
    pub rop_queue_depth: u32,
    pub interconnect_latency: u64,
    /// Packets per cycle over the whole interconnect.
    pub interconnect_bandwidth: u32,
    pub red_unit_latency_per_add: u64,
    /// Entries of each sub-core's reduction pipe, the one in service included.
    pub red_pipe_depth: usize,
    /// ALU instructions per cycle per sub-core; the sub-core's LSU port
    /// accepts the same number of atomic requests alongside them.
    pub warp_issue_width: u32,
    /// Cycles before a shuffle-add result can feed the next dependent step.
    pub shuffle_latency: u64,
    /// Latency-bound gradient math preceding each record's atomics.
    pub gradient_compute_cycles: u64,
    /// Warps a sub-core keeps in flight; it issues from the oldest ready one.
    pub resident_warps: u32,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            name: "custom".into(),
            num_sms: 1,
            subcores_per_sm: 4,
            lsu_queue_depth: QueueDepth::Bounded(32),
            lsu_dispatch_width: 4,
            rop_units: 2,
            rop_throughput: 1,
            rop_queue_depth: 32,
            interconnect_latency: 20,
            interconnect_bandwidth: 1024,
            red_unit_latency_per_add: 1,
            red_pipe_depth: 4,
            warp_issue_width: 1,
            shuffle_latency: 8,
            gradient_compute_cycles: 16,
            resident_warps: 8,
        }
    }
}

pub const PRESET_NAMES: [&str; 3] = ["rtx4090like", "rtx3060like", "single_sm"];

impl MachineConfig {
    /// 144 SMs, 176 ROP units.
    pub fn rtx4090like() -> Self {
        MachineConfig {
            name: "rtx4090like".into(),
            num_sms: 144,
            rop_units: 176,
            ..MachineConfig::default()
        }
    }

    /// 28 SMs, 48 ROP units.
    pub fn rtx3060like() -> Self {
        MachineConfig {
            name: "rtx3060like".into(),
            num_sms: 28,
            rop_units: 48,
            ..MachineConfig::default()
        }
    }

    /// One SM with two ROP units, for small experiments.
    pub fn single_sm() -> Self {
        MachineConfig {
            name: "single_sm".into(),
            ..MachineConfig::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "rtx4090like" | "rtx4090" => Some(Self::rtx4090like()),
            "rtx3060like" | "rtx3060" => Some(Self::rtx3060like()),
            "single_sm" | "1sm" => Some(Self::single_sm()),
            _ => None,
        }
    }

    pub fn presets() -> Vec<Self> {
        PRESET_NAMES.iter().filter_map(|n| Self::preset(n)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, u64); 11] = [
            ("num_sms", self.num_sms as u64),
            ("subcores_per_sm", self.subcores_per_sm as u64),
            ("lsu_dispatch_width", self.lsu_dispatch_width as u64),
            ("rop_units", self.rop_units as u64),
            ("rop_throughput", self.rop_throughput as u64),
            ("rop_queue_depth", self.rop_queue_depth as u64),
            ("interconnect_bandwidth", self.interconnect_bandwidth as u64),
            ("red_unit_latency_per_add", self.red_unit_latency_per_add),
            ("red_pipe_depth", self.red_pipe_depth as u64),
            ("warp_issue_width", self.warp_issue_width as u64),
            ("resident_warps", self.resident_warps as u64),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::InvalidMachine {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.lsu_queue_depth == QueueDepth::Bounded(0) {
            return Err(Error::InvalidMachine {
                field: "lsu_queue_depth",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn total_subcores(&self) -> u32 {
        self.num_sms * self.subcores_per_sm
    }

    fn rop_rate(&self) -> u64 {
        self.rop_units as u64 * self.rop_throughput as u64
    }

    fn rop_credits(&self) -> u64 {
        self.rop_units as u64 * self.rop_queue_depth as u64
    }
}

/// A coalesced `atomred` transaction: one address, the participating lanes
/// and their values in ascending lane order.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceTransaction {
    pub address: Address,
    pub lane_mask: LaneMask,
    pub values: Vec<f64>,
    pub origin: Origin,
}

impl ReduceTransaction {
    fn lane_request(&self, i: usize) -> AtomicRequest {
        AtomicRequest {
            address: self.address,
            value: self.values[i],
            source: self.origin,
        }
    }

    /// Lane-ascending fold of the values.
    pub fn sum(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc + v)
    }
}

/// Groups the active lanes of `record` by address: one transaction per
/// distinct (primitive, parameter), ordered by leader lane then parameter.
pub fn coalesce_atomred(record: &WarpRecord) -> Vec<ReduceTransaction> {
    let warp = WarpState::with_active(record.active);
    let groups = warp.match_any(&record.lane_primitive);
    let mut done = LaneMask::EMPTY;
    let mut out = Vec::new();
    for lane in record.active.lanes() {
        if done.contains(lane) {
            continue;
        }
        let group = groups[lane];
        done |= group;
        for param in 0..record.params() {
            out.push(ReduceTransaction {
                address: Address::new(record.lane_primitive[lane], param),
                lane_mask: group,
                values: group.lanes().map(|l| record.grads(l)[param]).collect(),
                origin: Origin {
                    warp: record.warp_id,
                    ..Origin::default()
                },
            });
        }
    }
    out
}

/// Per-SM queue of requests waiting for the interconnect.
#[derive(Clone, Debug)]
pub struct LsuQueue {
    depth: QueueDepth,
    entries: VecDeque<AtomicRequest>,
}

impl LsuQueue {
    pub fn new(depth: QueueDepth) -> Self {
        LsuQueue {
            depth,
            entries: VecDeque::new(),
        }
    }

    #[inline]
    pub fn has_free_slot(&self) -> bool {
        self.depth.admits(self.entries.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns the request back if the queue is full.
    pub fn push(&mut self, req: AtomicRequest) -> Result<(), AtomicRequest> {
        if self.has_free_slot() {
            self.entries.push_back(req);
            Ok(())
        } else {
            Err(req)
        }
    }

    fn pop(&mut self) -> Option<AtomicRequest> {
        self.entries.pop_front()
    }
}

/// Sub-core reduction unit: a pipe of pending transactions served by one
/// floating-point adder, one value every `latency_per_add` cycles.
#[derive(Clone, Debug)]
pub struct ReductionUnit {
    depth: usize,
    latency_per_add: u64,
    pipe: VecDeque<ReduceTransaction>,
    progress: u64,
    adds: u64,
}

impl ReductionUnit {
    pub fn new(depth: usize, latency_per_add: u64) -> Self {
        ReductionUnit {
            depth,
            latency_per_add,
            pipe: VecDeque::new(),
            progress: 0,
            adds: 0,
        }
    }

    #[inline]
    pub fn has_free_slot(&self) -> bool {
        self.pipe.len() < self.depth
    }

    pub fn is_idle(&self) -> bool {
        self.pipe.is_empty()
    }

    pub fn pending(&self) -> usize {
        self.pipe.len()
    }

    /// Adds performed so far.
    pub fn adds(&self) -> u64 {
        self.adds
    }

    /// Queues a transaction. The caller checks [`has_free_slot`](Self::has_free_slot).
    pub fn accept(&mut self, txn: ReduceTransaction) {
        debug_assert!(self.has_free_slot());
        self.pipe.push_back(txn);
    }

    /// Advances the adder by one cycle. Once all values of the head
    /// transaction are summed, emits their sum as one request, provided the
    /// LSU queue can take it; otherwise the result waits in the unit.
    pub fn step(&mut self, lsu: &mut LsuQueue) -> Option<AtomicRequest> {
        let head = self.pipe.front()?;
        let needed = head.values.len() as u64 * self.latency_per_add;
        if self.progress < needed {
            self.progress += 1;
        }
        if self.progress >= needed && lsu.has_free_slot() {
            let txn = self.pipe.pop_front()?;
            self.progress = 0;
            self.adds += txn.values.len() as u64;
            let req = AtomicRequest {
                address: txn.address,
                value: txn.sum(),
                source: txn.origin,
            };
            // checked above
            let _ = lsu.push(req);
            return Some(req);
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    LsuDirect,
    SubcoreReduce,
    Stall,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::LsuDirect => "LSU_DIRECT",
            Route::SubcoreReduce => "SUBCORE_REDUCE",
            Route::Stall => "STALL",
        })
    }
}

/// Contention determination: go straight to the LSU when its queue has room,
/// else to the sub-core reduction unit when its pipe has room, else wait.
pub fn contention_route(lsu: &LsuQueue, red: &ReductionUnit) -> Route {
    if lsu.has_free_slot() {
        Route::LsuDirect
    } else if red.has_free_slot() {
        Route::SubcoreReduce
    } else {
        Route::Stall
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub total_cycles: u64,
    /// Sub-core cycles blocked on a full LSU queue.
    pub stalls_lsu: u64,
    /// Sub-core cycles waiting on computation latency.
    pub stalls_other: u64,
    pub atomic_requests_to_l2: u64,
    pub core_instructions: u64,
    pub core_fp_adds: u64,
    pub interconnect_packets: u64,
    pub energy_proxy: f64,
}

impl RunMetrics {
    /// `stalls_lsu / (stalls_lsu + stalls_other)`, 0 without stalls.
    pub fn lsu_stall_fraction(&self) -> f64 {
        let total = self.stalls_lsu + self.stalls_other;
        if total == 0 {
            0.0
        } else {
            self.stalls_lsu as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RouteCounts {
    pub lsu_direct: u64,
    pub subcore_reduce: u64,
    pub stall: u64,
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub metrics: RunMetrics,
    /// Sums applied by the ROP units, per address.
    pub memory: BTreeMap<Address, f64>,
    pub routes: RouteCounts,
    /// Cycles in which a ROP slot went unused while a delivered request waited.
    pub rop_idle_with_backlog: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Issue {
        cycle: u64,
        slot: Slot,
        warp: u32,
        address: Address,
    },
    LsuStall {
        cycle: u64,
        slot: Slot,
        warp: u32,
    },
    Route {
        cycle: u64,
        slot: Slot,
        warp: u32,
        address: Address,
        lanes: u32,
        route: Route,
    },
    Reduced {
        cycle: u64,
        slot: Slot,
        address: Address,
        value: f64,
    },
    Inject {
        cycle: u64,
        sm: u32,
        address: Address,
        arrives: u64,
    },
    RopApply {
        cycle: u64,
        address: Address,
        value: f64,
    },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Issue {
                cycle,
                slot,
                warp,
                address,
            } => write!(
                f,
                "{cycle} issue sm={} sc={} warp={warp} addr={}:{}",
                slot.sm, slot.subcore, address.primitive, address.param
            ),
            Event::LsuStall { cycle, slot, warp } => {
                write!(f, "{cycle} lsu_stall sm={} sc={} warp={warp}", slot.sm, slot.subcore)
            }
            Event::Route {
                cycle,
                slot,
                warp,
                address,
                lanes,
                route,
            } => write!(
                f,
                "{cycle} route sm={} sc={} warp={warp} addr={}:{} lanes={lanes} {route}",
                slot.sm, slot.subcore, address.primitive, address.param
            ),
            Event::Reduced {
                cycle,
                slot,
                address,
                value,
            } => write!(
                f,
                "{cycle} reduced sm={} sc={} addr={}:{} value={value}",
                slot.sm, slot.subcore, address.primitive, address.param
            ),
            Event::Inject {
                cycle,
                sm,
                address,
                arrives,
            } => write!(
                f,
                "{cycle} inject sm={sm} addr={}:{} arrives={arrives}",
                address.primitive, address.param
            ),
            Event::RopApply { cycle, address, value } => write!(
                f,
                "{cycle} rop addr={}:{} value={value}",
                address.primitive, address.param
            ),
        }
    }
}

/// Placement of every warp of `trace` on `config`. An empty trace schedule
/// means round-robin: warp `w` goes to SM `w mod num_sms`, sub-core
/// `(w / num_sms) mod subcores_per_sm`.
pub fn resolve_schedule(trace: &Trace, config: &MachineConfig) -> Result<BTreeMap<u32, Slot>> {
    let mut out = BTreeMap::new();
    if trace.schedule.is_empty() {
        for warp in trace.warp_ids() {
            out.insert(
                warp,
                Slot {
                    sm: warp % config.num_sms,
                    subcore: (warp / config.num_sms) % config.subcores_per_sm,
                },
            );
        }
        return Ok(out);
    }
    for warp in trace.warp_ids() {
        let slot = *trace.schedule.get(&warp).ok_or(Error::UnscheduledWarp(warp))?;
        if slot.sm >= config.num_sms || slot.subcore >= config.subcores_per_sm {
            return Err(Error::ScheduleMismatch {
                warp_id: warp,
                sm: slot.sm,
                subcore: slot.subcore,
                num_sms: config.num_sms,
                subcores: config.subcores_per_sm,
            });
        }
        out.insert(warp, slot);
    }
    Ok(out)
}

/// One step of a job's instruction stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    /// Not ready to issue for this many cycles.
    Wait(u64),
    /// ALU instructions, one issue slot each.
    Alu(u64),
    /// The record's atomics, one issue slot per request.
    Atomics,
}

enum Work {
    Requests {
        requests: Vec<AtomicRequest>,
        next: usize,
    },
    Transactions {
        txns: Vec<ReduceTransaction>,
        next: usize,
        direct_lane: Option<usize>,
    },
}

/// A resident warp working through one record.
struct Job {
    warp: u32,
    ops: VecDeque<Op>,
    ready_at: u64,
    work: Work,
}

impl Job {
    /// Starts any waits at the front of the stream, counting from `now`.
    fn settle(&mut self, now: u64) {
        self.ready_at = self.ready_at.max(now);
        while let Some(&Op::Wait(c)) = self.ops.front() {
            self.ready_at = now + c;
            self.ops.pop_front();
        }
    }
}

enum Progress {
    /// Issued what it could; more remains.
    Pending,
    /// Blocked on a full LSU queue (or, for `atomred`, on both queues).
    LsuBlocked,
    Done,
}

struct Subcore {
    slot: Slot,
    /// Record indices per warp, in trace order.
    pending: BTreeMap<u32, VecDeque<usize>>,
    /// Next record of every warp that is not resident, keyed by trace position.
    admissible: BTreeSet<(usize, u32)>,
    jobs: Vec<Job>,
    red: ReductionUnit,
}

impl Subcore {
    fn busy(&self) -> bool {
        !self.jobs.is_empty() || !self.admissible.is_empty() || !self.red.is_idle()
    }

    fn enqueue(&mut self, idx: usize, warp: u32) {
        let queue = self.pending.entry(warp).or_default();
        if queue.is_empty() {
            self.admissible.insert((idx, warp));
        }
        queue.push_back(idx);
    }

    /// Pops the next admissible record, leaving its warp resident.
    fn admit(&mut self) -> Option<usize> {
        let (idx, warp) = self.admissible.pop_first()?;
        let queue = self.pending.get_mut(&warp).expect("admissible warp has records");
        queue.pop_front();
        Some(idx)
    }

    fn retire(&mut self, warp: u32) {
        if let Some(&next) = self.pending.get(&warp).and_then(|q| q.front()) {
            self.admissible.insert((next, warp));
        }
    }
}

struct Sm {
    subcores: Vec<Subcore>,
    lsu: LsuQueue,
}

/// Instruction stream of a record: gradient math latency, the policy's
/// bookkeeping, the dependent shuffle chain, then the atomics.
fn job_ops(out: &PolicyOutput, config: &MachineConfig) -> VecDeque<Op> {
    let mut ops = VecDeque::new();
    if config.gradient_compute_cycles > 0 {
        ops.push_back(Op::Wait(config.gradient_compute_cycles));
    }
    let overhead = out.overhead_instructions();
    if overhead > 0 {
        ops.push_back(Op::Alu(overhead));
    }
    if let Some(per_step) = out.shuffle_instructions.checked_div(out.shuffle_steps) {
        let extra = out.shuffle_instructions % out.shuffle_steps;
        for step in 0..out.shuffle_steps {
            ops.push_back(Op::Alu(per_step + u64::from(step < extra)));
            if config.shuffle_latency > 0 {
                ops.push_back(Op::Wait(config.shuffle_latency));
            }
        }
    }
    ops.push_back(Op::Atomics);
    ops
}

pub fn simulate(trace: &Trace, config: &MachineConfig, policy: Policy) -> Result<SimOutcome> {
    simulate_with_events(trace, config, policy, |_| {})
}

/// [`simulate`], reporting every event to `sink` as it happens.
pub fn simulate_with_events(
    trace: &Trace,
    config: &MachineConfig,
    policy: Policy,
    mut sink: impl FnMut(&Event),
) -> Result<SimOutcome> {
    config.validate()?;
    let schedule = resolve_schedule(trace, config)?;

    let mut sms: Vec<Sm> = (0..config.num_sms)
        .map(|sm| Sm {
            subcores: (0..config.subcores_per_sm)
                .map(|subcore| Subcore {
                    slot: Slot { sm, subcore },
                    pending: BTreeMap::new(),
                    admissible: BTreeSet::new(),
                    jobs: Vec::new(),
                    red: ReductionUnit::new(config.red_pipe_depth, config.red_unit_latency_per_add),
                })
                .collect(),
            lsu: LsuQueue::new(config.lsu_queue_depth),
        })
        .collect();
    for (i, rec) in trace.records.iter().enumerate() {
        let slot = schedule[&rec.warp_id];
        sms[slot.sm as usize].subcores[slot.subcore as usize].enqueue(i, rec.warp_id);
    }
    let active: Vec<usize> = (0..sms.len())
        .filter(|&i| sms[i].subcores.iter().any(Subcore::busy))
        .collect();

    let mut ctx = IssueCtx {
        trace,
        config,
        policy,
        metrics: RunMetrics::default(),
        routes: RouteCounts::default(),
    };
    let mut memory: HashMap<Address, f64> = HashMap::new();
    let mut interconnect: VecDeque<(u64, AtomicRequest)> = VecDeque::new();
    let mut backlog: VecDeque<AtomicRequest> = VecDeque::new();
    let mut credits_used: u64 = 0;
    let mut rop_idle_with_backlog = 0;
    let rop_rate = config.rop_rate();
    let credits = config.rop_credits();

    let mut cycle: u64 = 0;
    loop {
        let drained = interconnect.is_empty()
            && backlog.is_empty()
            && active
                .iter()
                .all(|&i| sms[i].lsu.is_empty() && !sms[i].subcores.iter().any(Subcore::busy));
        if drained {
            break;
        }

        while interconnect.front().is_some_and(|(at, _)| *at <= cycle) {
            let (_, req) = interconnect.pop_front().expect("front checked");
            backlog.push_back(req);
        }

        let mut served = 0;
        while served < rop_rate {
            let Some(req) = backlog.pop_front() else { break };
            *memory.entry(req.address).or_insert(0.0) += req.value;
            ctx.metrics.atomic_requests_to_l2 += 1;
            credits_used -= 1;
            served += 1;
            sink(&Event::RopApply {
                cycle,
                address: req.address,
                value: req.value,
            });
        }
        if served < rop_rate && !backlog.is_empty() {
            rop_idle_with_backlog += 1;
        }

        for &i in &active {
            let sm = &mut sms[i];
            let n = sm.subcores.len();
            if policy == Policy::HwAtomred {
                for sc in sm.subcores.iter_mut() {
                    if let Some(req) = sc.red.step(&mut sm.lsu) {
                        sink(&Event::Reduced {
                            cycle,
                            slot: sc.slot,
                            address: req.address,
                            value: req.value,
                        });
                    }
                }
            }
            for k in 0..n {
                let sc = &mut sm.subcores[(k + cycle as usize) % n];
                ctx.issue_cycle(sc, &mut sm.lsu, cycle, &mut sink);
            }
        }

        let mut bandwidth = config.interconnect_bandwidth as u64;
        for k in 0..active.len() {
            let i = active[(k + cycle as usize) % active.len()];
            let sm = &mut sms[i];
            let mut sent = 0;
            while sent < config.lsu_dispatch_width && bandwidth > 0 && credits_used < credits {
                let Some(req) = sm.lsu.pop() else { break };
                let arrives = cycle + config.interconnect_latency + 1;
                sink(&Event::Inject {
                    cycle,
                    sm: i as u32,
                    address: req.address,
                    arrives,
                });
                interconnect.push_back((arrives, req));
                ctx.metrics.interconnect_packets += 1;
                credits_used += 1;
                bandwidth -= 1;
                sent += 1;
            }
        }

        cycle += 1;
    }

    let mut metrics = ctx.metrics;
    metrics.total_cycles = cycle;
    metrics.core_fp_adds += sms
        .iter()
        .flat_map(|sm| sm.subcores.iter())
        .map(|sc| sc.red.adds())
        .sum::<u64>();
    metrics.energy_proxy = ENERGY_PER_PACKET * metrics.interconnect_packets as f64
        + ENERGY_PER_FP_OP * (metrics.atomic_requests_to_l2 + metrics.core_fp_adds) as f64;

    Ok(SimOutcome {
        metrics,
        memory: memory.into_iter().collect(),
        routes: ctx.routes,
        rop_idle_with_backlog,
    })
}

struct IssueCtx<'a> {
    trace: &'a Trace,
    config: &'a MachineConfig,
    policy: Policy,
    metrics: RunMetrics,
    routes: RouteCounts,
}

impl IssueCtx<'_> {
    fn start_job(&mut self, idx: usize, slot: Slot) -> Job {
        let rec = &self.trace.records[idx];
        let out = self.policy.apply(rec).with_slot(slot);
        self.metrics.core_instructions += out.core_instructions;
        self.metrics.core_fp_adds += out.core_fp_adds;
        let ops = job_ops(&out, self.config);
        let work = if self.policy == Policy::HwAtomred {
            let txns = coalesce_atomred(rec)
                .into_iter()
                .map(|mut t| {
                    t.origin.sm = slot.sm;
                    t.origin.subcore = slot.subcore;
                    t
                })
                .collect();
            Work::Transactions {
                txns,
                next: 0,
                direct_lane: None,
            }
        } else {
            Work::Requests {
                requests: out.requests,
                next: 0,
            }
        };
        Job {
            warp: rec.warp_id,
            ops,
            ready_at: 0,
            work,
        }
    }

    /// One cycle of a sub-core's issue stage: admit records up to the
    /// resident-warp limit, then issue from the oldest ready jobs first.
    fn issue_cycle(&mut self, sc: &mut Subcore, lsu: &mut LsuQueue, cycle: u64, sink: &mut impl FnMut(&Event)) {
        while sc.jobs.len() < self.config.resident_warps as usize {
            let Some(idx) = sc.admit() else { break };
            let mut job = self.start_job(idx, sc.slot);
            job.settle(cycle);
            sc.jobs.push(job);
        }
        if sc.jobs.is_empty() {
            return;
        }

        // ALU instructions and LSU requests draw on separate per-cycle budgets.
        let mut slots = self.config.warp_issue_width as u64;
        let mut mem_slots = self.config.warp_issue_width as u64;
        let mut issued = false;
        let mut lsu_blocked = false;
        let mut finished = Vec::new();
        for j in 0..sc.jobs.len() {
            let job = &mut sc.jobs[j];
            while job.ready_at <= cycle {
                match job.ops.front_mut() {
                    Some(Op::Wait(_)) => job.settle(cycle),
                    Some(Op::Alu(_)) if slots == 0 => break,
                    Some(Op::Alu(k)) => {
                        let take = (*k).min(slots);
                        *k -= take;
                        slots -= take;
                        issued = true;
                        if *k == 0 {
                            job.ops.pop_front();
                            job.settle(cycle);
                        }
                    }
                    Some(Op::Atomics) if mem_slots == 0 => break,
                    Some(Op::Atomics) => {
                        let before = mem_slots;
                        let progress = self.issue_atomics(job, &mut sc.red, lsu, sc.slot, cycle, &mut mem_slots, sink);
                        issued |= mem_slots < before;
                        match progress {
                            Progress::Pending => {}
                            Progress::LsuBlocked => {
                                lsu_blocked = true;
                                break;
                            }
                            Progress::Done => {
                                job.ops.pop_front();
                            }
                        }
                    }
                    None => break,
                }
            }
            if job.ops.is_empty() {
                finished.push(j);
            }
        }
        for &j in finished.iter().rev() {
            let job = sc.jobs.remove(j);
            sc.retire(job.warp);
        }

        if !issued {
            if lsu_blocked {
                self.metrics.stalls_lsu += 1;
                if let Some(job) = sc.jobs.first() {
                    sink(&Event::LsuStall {
                        cycle,
                        slot: sc.slot,
                        warp: job.warp,
                    });
                }
            } else if !sc.jobs.is_empty() {
                self.metrics.stalls_other += 1;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn issue_atomics(
        &mut self,
        job: &mut Job,
        red: &mut ReductionUnit,
        lsu: &mut LsuQueue,
        slot: Slot,
        cycle: u64,
        slots: &mut u64,
        sink: &mut impl FnMut(&Event),
    ) -> Progress {
        let warp = job.warp;
        match &mut job.work {
            Work::Requests { requests, next } => {
                while *slots > 0 && *next < requests.len() {
                    if lsu.push(requests[*next]).is_err() {
                        return Progress::LsuBlocked;
                    }
                    sink(&Event::Issue {
                        cycle,
                        slot,
                        warp,
                        address: requests[*next].address,
                    });
                    *next += 1;
                    *slots -= 1;
                }
                if *next == requests.len() {
                    Progress::Done
                } else {
                    Progress::Pending
                }
            }
            Work::Transactions {
                txns,
                next,
                direct_lane,
            } => {
                while *slots > 0 && *next < txns.len() {
                    let txn = &txns[*next];
                    if let Some(lane) = direct_lane {
                        let req = txn.lane_request(*lane);
                        if lsu.push(req).is_err() {
                            return Progress::LsuBlocked;
                        }
                        sink(&Event::Issue {
                            cycle,
                            slot,
                            warp,
                            address: req.address,
                        });
                        *lane += 1;
                        if *lane == txn.values.len() {
                            *direct_lane = None;
                            *next += 1;
                        }
                        *slots -= 1;
                        continue;
                    }
                    let route = contention_route(lsu, red);
                    sink(&Event::Route {
                        cycle,
                        slot,
                        warp,
                        address: txn.address,
                        lanes: txn.lane_mask.count(),
                        route,
                    });
                    match route {
                        Route::LsuDirect => {
                            self.routes.lsu_direct += 1;
                            *direct_lane = Some(0);
                        }
                        Route::SubcoreReduce => {
                            self.routes.subcore_reduce += 1;
                            red.accept(txn.clone());
                            *next += 1;
                            *slots -= 1;
                        }
                        Route::Stall => {
                            self.routes.stall += 1;
                            return Progress::LsuBlocked;
                        }
                    }
                }
                if *next == txns.len() {
                    Progress::Done
                } else {
                    Progress::Pending
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reducers::{oracle_sum, BalancingThreshold};
    use crate::simt::WARP_SIZE;
    use crate::workload::{generate, SceneSpec};

    fn bare_machine() -> MachineConfig {
        MachineConfig {
            gradient_compute_cycles: 0,
            ..MachineConfig::single_sm()
        }
    }

    fn one_lane_trace() -> Trace {
        let mut rec = WarpRecord::new(0, 0, 1);
        rec.set_lane(0, 3, &[0.5]);
        Trace::new(
            SceneSpec {
                params_per_primitive: 1,
                ..SceneSpec::default()
            },
            vec![rec],
        )
    }

    fn full_trace(params: usize) -> Trace {
        let mut rec = WarpRecord::new(0, 0, params);
        for lane in 0..WARP_SIZE {
            let vals: Vec<f64> = (0..params).map(|p| ((lane + p) % 255 + 1) as f64 / 256.0).collect();
            rec.set_lane(lane, 9, &vals);
        }
        Trace::new(
            SceneSpec {
                params_per_primitive: params,
                ..SceneSpec::default()
            },
            vec![rec],
        )
    }

    #[test]
    fn single_request_event_chain() {
        let cfg = bare_machine();
        let out = simulate(&one_lane_trace(), &cfg, Policy::Native).unwrap();
        assert_eq!(out.metrics.total_cycles, 1 + cfg.interconnect_latency + 1);
        assert_eq!(out.metrics.atomic_requests_to_l2, 1);
        assert_eq!(out.metrics.interconnect_packets, 1);
        assert_eq!(out.memory, BTreeMap::from([(Address::new(3, 0), 0.5)]));
    }

    #[test]
    fn empty_trace_takes_no_cycles() {
        let trace = Trace::new(SceneSpec::default(), vec![]);
        let out = simulate(&trace, &bare_machine(), Policy::Native).unwrap();
        assert_eq!(out.metrics, RunMetrics::default());
    }

    #[test]
    fn coalesce_cases() {
        let trace = full_trace(3);
        let txns = coalesce_atomred(&trace.records[0]);
        assert_eq!(txns.len(), 3);
        assert!(txns
            .iter()
            .all(|t| t.values.len() == 32 && t.lane_mask == LaneMask::FULL));

        let mut rec = WarpRecord::new(0, 0, 1);
        rec.set_lane(0, 4, &[0.5]);
        rec.set_lane(1, 9, &[0.25]);
        let txns = coalesce_atomred(&rec);
        assert_eq!(txns.len(), 2);
        assert_eq!(txns[0].address, Address::new(4, 0));
        assert_eq!(txns[1].values, vec![0.25]);
    }

    #[test]
    fn coalesce_matches_bruteforce_grouping() {
        let mut rec = WarpRecord::new(0, 0, 2);
        let prims = [5, 7, 5, 9, 7, 7, 5];
        for (lane, &p) in prims.iter().enumerate() {
            rec.set_lane(lane * 2, p, &[lane as f64, 10.0 + lane as f64]);
        }
        let mut got: Vec<(u32, u16, u32, Vec<f64>)> = coalesce_atomred(&rec)
            .into_iter()
            .map(|t| (t.address.primitive, t.address.param, t.lane_mask.bits(), t.values))
            .collect();
        let mut want: BTreeMap<(u32, u16), (u32, Vec<f64>)> = BTreeMap::new();
        for lane in 0..WARP_SIZE {
            if !rec.active.contains(lane) {
                continue;
            }
            for p in 0..2 {
                let e = want.entry((rec.lane_primitive[lane], p as u16)).or_default();
                e.0 |= 1 << lane;
                e.1.push(rec.grads(lane)[p]);
            }
        }
        let mut want: Vec<_> = want.into_iter().map(|((a, b), (m, v))| (a, b, m, v)).collect();
        got.sort_by_key(|t| (t.0, t.1));
        want.sort_by_key(|t| (t.0, t.1));
        assert_eq!(got, want);
        // leader order: prim 5 (lane 0), 7 (lane 2), 9 (lane 6)
        let order: Vec<u32> = coalesce_atomred(&rec).iter().map(|t| t.address.primitive).collect();
        assert_eq!(order, vec![5, 5, 7, 7, 9, 9]);
    }

    fn filler() -> AtomicRequest {
        AtomicRequest {
            address: Address::new(0, 0),
            value: 0.0,
            source: Origin::default(),
        }
    }

    #[test]
    fn route_cases() {
        let mut lsu = LsuQueue::new(QueueDepth::Bounded(1));
        let mut red = ReductionUnit::new(1, 1);
        assert_eq!(contention_route(&lsu, &red), Route::LsuDirect);
        lsu.push(filler()).unwrap();
        assert!(lsu.push(filler()).is_err());
        assert_eq!(contention_route(&lsu, &red), Route::SubcoreReduce);
        red.accept(coalesce_atomred(&full_trace(1).records[0]).remove(0));
        assert_eq!(contention_route(&lsu, &red), Route::Stall);
        let unbounded = LsuQueue::new(QueueDepth::Unbounded);
        assert_eq!(contention_route(&unbounded, &red), Route::LsuDirect);
    }

    #[test]
    fn reduction_unit_timing() {
        let mut lsu = LsuQueue::new(QueueDepth::Unbounded);
        let mut unit = ReductionUnit::new(4, 1);
        let txn = coalesce_atomred(&full_trace(1).records[0]).remove(0);
        let fold = txn.values.iter().fold(0.0, |a, v| a + v);
        unit.accept(txn.clone());
        // accepted at cycle 0; stepping starts at cycle 1
        let mut emitted = None;
        for cycle in 1..=40u64 {
            if let Some(req) = unit.step(&mut lsu) {
                emitted = Some((cycle, req.value));
                break;
            }
        }
        assert_eq!(emitted, Some((32, fold)));

        let mut single = txn.clone();
        single.values.truncate(1);
        single.lane_mask = LaneMask(1);
        unit.accept(single.clone());
        assert_eq!(unit.step(&mut lsu).map(|r| r.value), Some(single.values[0]));

        // two queued: strictly serial
        let mut two = ReductionUnit::new(4, 2);
        let mut a = single.clone();
        a.values = vec![0.5, 0.25];
        two.accept(a.clone());
        two.accept(a);
        let times: Vec<u64> = (1..=20u64).filter(|_| two.step(&mut lsu).is_some()).collect();
        assert_eq!(times, vec![4, 8]);
        assert_eq!(two.adds(), 4);
    }

    #[test]
    fn reduction_unit_waits_for_lsu_space() {
        let mut lsu = LsuQueue::new(QueueDepth::Bounded(1));
        lsu.push(filler()).unwrap();
        let mut unit = ReductionUnit::new(2, 1);
        let mut txn = coalesce_atomred(&full_trace(1).records[0]).remove(0);
        txn.values.truncate(2);
        unit.accept(txn);
        assert!(unit.step(&mut lsu).is_none());
        assert!(unit.step(&mut lsu).is_none());
        assert!(unit.step(&mut lsu).is_none());
        lsu.pop();
        assert!(unit.step(&mut lsu).is_some());
    }

    #[test]
    fn full_warp_traffic_ratio() {
        let trace = generate(&SceneSpec {
            locality: 1.0,
            activity_prob: 1.0,
            ..SceneSpec::default()
        })
        .unwrap();
        let cfg = MachineConfig::single_sm();
        let native = simulate(&trace, &cfg, Policy::Native).unwrap().metrics;
        let bfly = simulate(&trace, &cfg, Policy::ButterflyReduce(BalancingThreshold::ALWAYS))
            .unwrap()
            .metrics;
        assert_eq!(native.atomic_requests_to_l2, 32 * bfly.atomic_requests_to_l2);
    }

    #[test]
    fn schedule_mismatch_is_reported() {
        let mut trace = full_trace(1);
        trace.schedule.insert(0, Slot { sm: 5, subcore: 0 });
        assert!(matches!(
            simulate(&trace, &bare_machine(), Policy::Native),
            Err(Error::ScheduleMismatch { .. })
        ));
        trace.schedule.clear();
        trace.schedule.insert(7, Slot { sm: 0, subcore: 0 });
        assert!(matches!(
            simulate(&trace, &bare_machine(), Policy::Native),
            Err(Error::UnscheduledWarp(0))
        ));
    }

    #[test]
    fn invalid_machine_is_rejected() {
        let cfg = MachineConfig {
            rop_units: 0,
            ..MachineConfig::default()
        };
        assert!(matches!(
            simulate(&full_trace(1), &cfg, Policy::Native),
            Err(Error::InvalidMachine { field: "rop_units", .. })
        ));
    }

    #[test]
    fn hw_reduces_under_contention_and_conserves() {
        let scene = SceneSpec {
            locality: 1.0,
            activity_prob: 0.9,
            params_per_primitive: 4,
            ..SceneSpec::default()
        };
        let trace = generate(&scene).unwrap();
        let cfg = MachineConfig {
            lsu_queue_depth: QueueDepth::Bounded(4),
            rop_units: 1,
            ..MachineConfig::single_sm()
        };
        let out = simulate(&trace, &cfg, Policy::HwAtomred).unwrap();
        let native = simulate(&trace, &cfg, Policy::Native).unwrap();
        assert!(out.routes.subcore_reduce > 0);
        assert!(out.metrics.atomic_requests_to_l2 < native.metrics.atomic_requests_to_l2);
        assert!(out.metrics.core_fp_adds > 0);
        assert_eq!(out.memory, oracle_sum(&trace));
        assert_eq!(out.rop_idle_with_backlog, 0);
    }

    #[test]
    fn events_are_line_oriented() {
        let mut lines = Vec::new();
        simulate_with_events(&one_lane_trace(), &bare_machine(), Policy::Native, |e| {
            lines.push(e.to_string())
        })
        .unwrap();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("0 issue sm=0 sc=0 warp=0 addr=3:0"));
        assert!(lines[1].starts_with("0 inject"));
        assert!(lines[2].starts_with("21 rop addr=3:0 value=0.5"));
    }

    #[test]
    fn queue_depth_display_and_admits() {
        assert_eq!(QueueDepth::Unbounded.to_string(), "inf");
        assert_eq!(QueueDepth::Bounded(8).to_string(), "8");
        assert!(QueueDepth::Bounded(2).admits(1));
        assert!(!QueueDepth::Bounded(2).admits(2));
        assert!(QueueDepth::Unbounded.admits(usize::MAX - 1));
    }
}
