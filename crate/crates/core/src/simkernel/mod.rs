//! Cycle-driven engine tying cores, caches, coherence controllers and the
//! three NoCs together, plus checkpoint save/restore.
//!
//! Each cycle runs, in order: events due now, one router step on every
//! net (delivered messages are handled immediately), one L1.5 request per
//! tile, one issue slot per core. Events produced during the cycle at the
//! same cycle are drained after every phase.

mod event;
mod oracle;

pub use event::EventQueue;
pub use oracle::{check_access_log, Access};

use crate::cache::{CacheError, CacheStats, L1Cache, Lookup, Mesi, MshrKind};
use crate::coherence::{
    Completion, CoherenceMsg, Effects, HomeCtrl, HomeStats, L15Ctrl, L15Op, L15Request, MemCtrl,
    MsgKind, Net, ProtoParams, ProtocolError, ReqOutcome,
};
use crate::config::ValidatedConfig;
use crate::cpu::{CoreState, MemOp, MemReq, MemoryPort, PerfCounters, PortReply, Trap};
use crate::noc::{NetStats, Noc, NocError};
use crate::workload::{Oracle, Program, TraceOp, TraceRecord};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
/// Requests the L1D can have queued toward the L1.5.
pub const L15_QUEUE_DEPTH: usize = 16;
/// Token bit marking an L1.5 read issued to fill the L1D.
const FILL: u64 = 1 << 63;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event scheduled at cycle {fire_cycle} but now is {now}")]
    SchedulingInPast { now: u64, fire_cycle: u64 },
    #[error("deadlock at cycle {cycle}: {}", waiting.join("; "))]
    DeadlockDetected { cycle: u64, waiting: Vec<String> },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Noc(#[from] NocError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("core {core}: {trap:?}")]
    Trap { core: u32, trap: Trap },
    #[error("{ncores} cores requested but the mesh has {tiles} tiles")]
    TooManyCores { ncores: u32, tiles: u32 },
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    StopCycle,
    AllHalted,
}

/// What the cores run.
#[derive(Debug, Clone)]
pub enum Workload {
    /// Every active core runs the same program with a0 = core id and
    /// a1 = `ncores`.
    Program { program: Program, ncores: u32 },
    /// Per-core memory traces (index = core).
    Trace(Vec<Vec<TraceRecord>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Event {
    /// Inject a message into the NoC.
    Send(CoherenceMsg),
    /// Hand an L1.5 completion to the tile's L1D and core. `order` is the
    /// global access order taken when the L1.5 produced it.
    Complete {
        tile: u32,
        done: Completion,
        order: u64,
    },
}

/// Replays one core's trace, one access per issue slot after its gap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCore {
    pub id: u32,
    records: Vec<TraceRecord>,
    next: usize,
    ready_at: u64,
    outstanding: BTreeMap<u64, ()>,
    next_token: u64,
    pub counters: PerfCounters,
}

impl TraceCore {
    fn new(id: u32, records: Vec<TraceRecord>) -> Self {
        let ready_at = records.first().map_or(0, |r| r.gap);
        TraceCore {
            id,
            records,
            next: 0,
            ready_at,
            outstanding: BTreeMap::new(),
            next_token: 0,
            counters: PerfCounters::default(),
        }
    }

    fn done(&self) -> bool {
        self.next == self.records.len() && self.outstanding.is_empty()
    }

    fn step(&mut self, port: &mut dyn MemoryPort, rng: &mut ChaCha8Rng, now: u64) {
        if self.done() {
            return;
        }
        self.counters.cycles += 1;
        let Some(rec) = self.records.get(self.next).copied() else {
            return;
        };
        if now < self.ready_at {
            return;
        }
        if port.capacity() == 0 {
            self.counters.stall_cycles_mshr_full += 1;
            return;
        }
        self.next_token += 1;
        let token = self.next_token;
        let op = match rec.op {
            TraceOp::Load => {
                self.counters.scalar_loads += 1;
                MemOp::Load { size: rec.size as usize }
            }
            TraceOp::Store => {
                self.counters.scalar_stores += 1;
                let mut b = vec![0; rec.size as usize];
                rng.fill_bytes(&mut b);
                MemOp::Store { bytes: b }
            }
        };
        let is_load = rec.op == TraceOp::Load;
        if port.access(MemReq { token, addr: rec.addr, op }, now) == PortReply::Pending {
            if is_load {
                self.counters.l1d_misses += 1;
            }
            self.outstanding.insert(token, ());
        }
        self.counters.instructions_retired += 1;
        self.next += 1;
        self.ready_at = now + 1 + self.records.get(self.next).map_or(0, |r| r.gap);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frontend {
    Isa(Box<CoreState>),
    Trace(TraceCore),
    Idle,
}

impl Frontend {
    pub fn done(&self) -> bool {
        match self {
            Frontend::Isa(c) => c.halted,
            Frontend::Trace(t) => t.done(),
            Frontend::Idle => true,
        }
    }

    pub fn outstanding(&self) -> usize {
        match self {
            Frontend::Isa(c) => c.outstanding(),
            Frontend::Trace(t) => t.outstanding.len(),
            Frontend::Idle => 0,
        }
    }

    pub fn counters(&self) -> PerfCounters {
        match self {
            Frontend::Isa(c) => c.read_counters(),
            Frontend::Trace(t) => t.counters,
            Frontend::Idle => PerfCounters::default(),
        }
    }

    fn complete(&mut self, token: u64, data: &[u8], now: u64) {
        match self {
            Frontend::Isa(c) => c.complete(token, data, now),
            Frontend::Trace(t) => {
                t.outstanding.remove(&token);
            }
            Frontend::Idle => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct L1dWaiter {
    pub token: u64,
    pub offset: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Queued {
    pub ready_at: u64,
    pub req: L15Request,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub front: Frontend,
    pub l1i: L1Cache<()>,
    pub l1d: L1Cache<L1dWaiter>,
    /// L1D to L1.5 request FIFO.
    pub l15_queue: VecDeque<Queued>,
    pub l15: L15Ctrl,
    pub home: HomeCtrl,
    /// Loads sent straight to the L1.5: token to (offset, size).
    direct: BTreeMap<u64, (usize, usize)>,
    head_blocked: bool,
}

/// Full statistics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineStats {
    pub cycles: u64,
    pub cores: Vec<PerfCounters>,
    pub l1i: Vec<CacheStats>,
    pub l1d: Vec<CacheStats>,
    pub l15: Vec<CacheStats>,
    pub l2: Vec<HomeStats>,
    pub noc: Vec<NetStats>,
    pub mem_reads: u64,
    pub mem_writes: u64,
    pub events_delivered: u64,
    /// L1D miss service time (request to fill), summed over misses.
    pub l1d_miss_latency_total: u64,
    pub l1d_miss_count: u64,
}

impl MachineStats {
    pub fn mean_l1d_miss_latency(&self) -> f64 {
        if self.l1d_miss_count == 0 {
            0.0
        } else {
            self.l1d_miss_latency_total as f64 / self.l1d_miss_count as f64
        }
    }
}

#[derive(Clone, Copy)]
struct Knobs {
    l1_hit: u64,
    ifetch_penalty: u64,
    l15_lat: u64,
    l2_lat: u64,
    mem_lat: u64,
    block: usize,
    memory_size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Machine {
    cfg: ValidatedConfig,
    params: ProtoParams,
    program: Option<Program>,
    pub tiles: Vec<Tile>,
    pub memctl: MemCtrl,
    pub noc: Noc,
    events: EventQueue<Event>,
    cycle: u64,
    rng: ChaCha8Rng,
    order: u64,
    log: Option<Vec<Access>>,
    initial: Vec<(u64, Vec<u8>)>,
    drops: Vec<MsgKind>,
    pub dropped: Vec<CoherenceMsg>,
    finished: Option<MachineStats>,
    miss_latency: (u64, u64),
    protocol_trace: Option<Vec<String>>,
    /// Free-form workload identity, carried through checkpoints.
    pub tag: String,
    pub oracle: Option<Oracle>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u64,
    cycle: u64,
    machine: serde_json::Value,
}

impl Machine {
    pub fn new(cfg: &ValidatedConfig, workload: Workload) -> Result<Machine, SimError> {
        let g = cfg.geometry();
        let n = cfg.num_tiles();
        let s = cfg.source();
        let params = ProtoParams {
            block_size: cfg.block_size(),
            num_tiles: n,
            mutation: None,
        };
        let (program, fronts, initial): (_, Vec<Frontend>, _) = match workload {
            Workload::Program { program, ncores } => {
                if ncores > n {
                    return Err(SimError::TooManyCores { ncores, tiles: n });
                }
                let fronts = (0..n)
                    .map(|i| {
                        if i >= ncores {
                            return Frontend::Idle;
                        }
                        let mut c = CoreState::new(i, s.vlen_bits, s.vsetvl_mode);
                        c.pc = crate::cpu::pc_of(program.entry);
                        c.xregs[10] = i as u64;
                        c.xregs[11] = ncores as u64;
                        Frontend::Isa(Box::new(c))
                    })
                    .collect();
                let initial = program.data.clone();
                (Some(program), fronts, initial)
            }
            Workload::Trace(streams) => {
                if streams.len() as u32 > n {
                    return Err(SimError::TooManyCores {
                        ncores: streams.len() as u32,
                        tiles: n,
                    });
                }
                let mut fronts: Vec<Frontend> = streams
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| Frontend::Trace(TraceCore::new(i as u32, r)))
                    .collect();
                fronts.resize(n as usize, Frontend::Idle);
                (None, fronts, Vec::new())
            }
        };
        let tiles = fronts
            .into_iter()
            .enumerate()
            .map(|(i, front)| Tile {
                front,
                l1i: L1Cache::new(g.l1i, 1),
                l1d: L1Cache::new(g.l1d, s.l1d_mshrs as usize),
                l15_queue: VecDeque::new(),
                l15: L15Ctrl::new(i as u32, g.l15, s.l15_mshrs as usize),
                home: HomeCtrl::new(i as u32, g.l2_slice, n, s.l2_mshrs as usize),
                direct: BTreeMap::new(),
                head_blocked: false,
            })
            .collect();
        let mut memctl = MemCtrl::default();
        for (a, bytes) in &initial {
            memctl.write_bytes(*a, bytes, cfg.block_size());
        }
        Ok(Machine {
            cfg: cfg.clone(),
            params,
            program,
            tiles,
            memctl,
            noc: Noc::new(cfg),
            events: EventQueue::default(),
            cycle: 0,
            rng: ChaCha8Rng::seed_from_u64(s.rng_seed),
            order: 0,
            log: None,
            initial,
            drops: Vec::new(),
            dropped: Vec::new(),
            finished: None,
            miss_latency: (0, 0),
            protocol_trace: None,
            tag: String::new(),
            oracle: None,
        })
    }

    pub fn config(&self) -> &ValidatedConfig {
        &self.cfg
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn program(&self) -> Option<&Program> {
        self.program.as_ref()
    }

    /// Record every performed access for [`check_access_log`].
    pub fn enable_access_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn access_log(&self) -> Option<&[Access]> {
        self.log.as_deref()
    }

    pub fn initial_image(&self) -> &[(u64, Vec<u8>)] {
        &self.initial
    }

    /// Record delivered coherence messages as text lines.
    pub fn enable_protocol_trace(&mut self) {
        self.protocol_trace.get_or_insert_with(Vec::new);
    }

    pub fn protocol_trace(&self) -> Option<&[String]> {
        self.protocol_trace.as_deref()
    }

    /// Fault injection: silently discard the next message of `kind`.
    pub fn inject_message_drop(&mut self, kind: MsgKind) {
        self.drops.push(kind);
    }

    pub fn events_delivered(&self) -> u64 {
        self.events.delivered()
    }

    pub fn all_done(&self) -> bool {
        self.tiles.iter().all(|t| t.front.done())
    }

    pub fn core(&self, i: usize) -> Option<&CoreState> {
        match &self.tiles.get(i)?.front {
            Frontend::Isa(c) => Some(c),
            _ => None,
        }
    }

    fn knobs(&self) -> Knobs {
        let l = self.cfg.latencies();
        Knobs {
            l1_hit: l.l1_hit,
            ifetch_penalty: self.cfg.l15_latency() + self.cfg.l2_latency(),
            l15_lat: self.cfg.l15_latency(),
            l2_lat: self.cfg.l2_latency(),
            mem_lat: l.memory,
            block: self.cfg.block_size(),
            memory_size: self.cfg.source().memory_size_bytes,
        }
    }

    /// Current statistics; cycle count is the halt cycle once every core
    /// has finished.
    pub fn stats(&self) -> MachineStats {
        if let Some(s) = &self.finished {
            return s.clone();
        }
        self.snapshot()
    }

    fn snapshot(&self) -> MachineStats {
        MachineStats {
            cycles: self.cycle,
            cores: self.tiles.iter().map(|t| t.front.counters()).collect(),
            l1i: self.tiles.iter().map(|t| t.l1i.stats.clone()).collect(),
            l1d: self.tiles.iter().map(|t| t.l1d.stats.clone()).collect(),
            l15: self.tiles.iter().map(|t| t.l15.stats.clone()).collect(),
            l2: self.tiles.iter().map(|t| t.home.stats.clone()).collect(),
            noc: self.noc.nets.iter().map(|n| n.stats.clone()).collect(),
            mem_reads: self.memctl.reads,
            mem_writes: self.memctl.writes,
            events_delivered: self.events.delivered(),
            l1d_miss_latency_total: self.miss_latency.0,
            l1d_miss_count: self.miss_latency.1,
        }
    }

    fn schedule(&mut self, at: u64, ev: Event) -> Result<(), SimError> {
        self.events.schedule(at, ev).map(|_| ())
    }

    fn send_at(&mut self, at: u64, msgs: Vec<CoherenceMsg>) -> Result<(), SimError> {
        for m in msgs {
            self.schedule(at, Event::Send(m))?;
        }
        Ok(())
    }

    fn apply_l15(&mut self, t: usize, fx: Effects, now: u64, k: &Knobs) -> Result<(), SimError> {
        for b in fx.l1_inval {
            let l1d = &mut self.tiles[t].l1d;
            if let Some(m) = l1d.mshrs.get_mut(b) {
                m.no_install = true;
            }
            if l1d.array.remove(b).is_some() {
                l1d.stats.invalidations += 1;
            }
        }
        self.send_at(now + k.l15_lat, fx.msgs)?;
        for done in fx.done {
            let order = self.order;
            self.order += 1;
            self.schedule(
                now + k.l15_lat,
                Event::Complete {
                    tile: t as u32,
                    done,
                    order,
                },
            )?;
        }
        Ok(())
    }

    fn log_access(&mut self, order: u64, core: u32, addr: u64, write: bool, bytes: &[u8]) {
        if let Some(log) = &mut self.log {
            log.push(Access {
                order,
                core,
                addr,
                write,
                bytes: bytes.to_vec(),
            });
        }
    }

    fn handle_event(&mut self, ev: Event, now: u64) -> Result<(), SimError> {
        match ev {
            Event::Send(msg) => {
                if let Some(i) = self.drops.iter().position(|&d| d == msg.kind) {
                    self.drops.remove(i);
                    self.dropped.push(msg);
                    return Ok(());
                }
                self.noc.send(&msg, now);
            }
            Event::Complete { tile, done, order } => {
                let t = tile as usize;
                match done {
                    Completion::BlockRead {
                        token,
                        block_addr,
                        data,
                    } if token & FILL != 0 => {
                        let r = self.tiles[t].l1d.fill(block_addr, data.clone(), Mesi::S)?;
                        self.miss_latency.0 += now - r.issued_cycle;
                        self.miss_latency.1 += 1;
                        for w in r.waiters {
                            let bytes = &data[w.offset..w.offset + w.size];
                            self.log_access(order, tile, block_addr + w.offset as u64, false, bytes);
                            self.tiles[t].front.complete(w.token, bytes, now);
                        }
                    }
                    Completion::BlockRead {
                        token,
                        block_addr,
                        data,
                    } => {
                        let (off, size) = self.tiles[t]
                            .direct
                            .remove(&token)
                            .expect("direct read registered");
                        let bytes = &data[off..off + size];
                        self.log_access(order, tile, block_addr + off as u64, false, bytes);
                        self.tiles[t].front.complete(token, bytes, now);
                    }
                    Completion::StorePerformed {
                        token,
                        block_addr,
                        offset,
                        bytes,
                    } => {
                        self.log_access(order, tile, block_addr + offset as u64, true, &bytes);
                        self.tiles[t].front.complete(token, &[], now);
                    }
                    Completion::AmoDone {
                        token,
                        block_addr,
                        offset,
                        old,
                        new,
                    } => {
                        let a = block_addr + offset as u64;
                        self.log_access(order, tile, a, false, &old);
                        self.log_access(order, tile, a, true, &new);
                        self.tiles[t].front.complete(token, &old, now);
                    }
                }
            }
        }
        Ok(())
    }

    fn drain(&mut self, now: u64) -> Result<(), SimError> {
        while let Some((_, ev)) = self.events.pop_due() {
            self.handle_event(ev, now)?;
        }
        Ok(())
    }

    fn deliver(&mut self, msg: CoherenceMsg, now: u64, k: &Knobs) -> Result<(), SimError> {
        if let Some(tr) = &mut self.protocol_trace {
            tr.push(format!(
                "{now} {:?} {}->{} {:#x}{}",
                msg.kind,
                msg.src,
                msg.dst,
                msg.block_addr,
                if msg.dirty { " dirty" } else { "" }
            ));
        }
        let p = self.params;
        if msg.dst == p.chipset() {
            if let Some(reply) = self.memctl.handle(&msg, &p)? {
                self.send_at(now + k.mem_lat, vec![reply])?;
            }
            return Ok(());
        }
        let t = msg.dst as usize;
        if msg.net() == Net::Noc2 {
            let fx = self.tiles[t].l15.on_message(&msg, &p, now)?;
            self.apply_l15(t, fx, now, k)
        } else {
            let fx = self.tiles[t].home.handle(msg, &p)?;
            self.send_at(now + k.l2_lat, fx.msgs)
        }
    }

    fn l15_tick(&mut self, t: usize, now: u64, k: &Knobs) -> Result<(), SimError> {
        let tile = &mut self.tiles[t];
        tile.head_blocked = false;
        let Some(head) = tile.l15_queue.front() else {
            return Ok(());
        };
        if head.ready_at > now {
            return Ok(());
        }
        let req = head.req.clone();
        let (out, fx) = tile.l15.core_request(req, &self.params, now);
        if out == ReqOutcome::Blocked {
            tile.head_blocked = true;
        } else {
            tile.l15_queue.pop_front();
        }
        self.apply_l15(t, fx, now, k)
    }

    fn core_tick(&mut self, t: usize, now: u64, k: &Knobs) -> Result<(), SimError> {
        let Machine {
            tiles,
            program,
            order,
            log,
            rng,
            ..
        } = self;
        let Tile {
            front,
            l1i,
            l1d,
            l15_queue,
            direct,
            ..
        } = &mut tiles[t];
        let core = t as u32;
        let mut port = TilePort {
            core,
            l1i,
            l1d,
            queue: l15_queue,
            direct,
            order,
            log,
            k,
        };
        match front {
            Frontend::Isa(c) => {
                let prog = &program.as_ref().expect("ISA core without program").instrs;
                c.step_cycle(prog, &mut port, now)
                    .map_err(|trap| SimError::Trap { core, trap })
            }
            Frontend::Trace(tc) => {
                tc.step(&mut port, rng, now);
                Ok(())
            }
            Frontend::Idle => Ok(()),
        }
    }

    /// Advance exactly one cycle.
    pub fn step(&mut self) -> Result<(), SimError> {
        let now = self.cycle;
        let k = self.knobs();
        self.events.advance_to(now);
        self.drain(now)?;
        if !self.noc.is_idle() {
            for msg in self.noc.tick(now)? {
                self.deliver(msg, now, &k)?;
            }
            self.drain(now)?;
        }
        for t in 0..self.tiles.len() {
            self.l15_tick(t, now, &k)?;
        }
        self.drain(now)?;
        for t in 0..self.tiles.len() {
            self.core_tick(t, now, &k)?;
        }
        self.drain(now)?;
        self.cycle += 1;
        if self.finished.is_none() && self.all_done() {
            self.finished = Some(self.snapshot());
        }
        Ok(())
    }

    /// Nothing in flight anywhere: no events, no flits, no queued requests.
    pub fn is_drained(&self) -> bool {
        self.events.is_empty()
            && self.noc.is_idle()
            && self.tiles.iter().all(|t| t.l15_queue.is_empty())
    }

    fn deadlocked(&self) -> bool {
        self.events.is_empty()
            && self.noc.is_idle()
            && self
                .tiles
                .iter()
                .all(|t| t.l15_queue.is_empty() || t.head_blocked)
            && self
                .tiles
                .iter()
                .any(|t| !t.front.done() && (t.front.outstanding() > 0 || t.head_blocked))
    }

    /// Everything still waiting, for deadlock reports.
    pub fn waiting(&self) -> Vec<String> {
        let mut w = Vec::new();
        for (i, t) in self.tiles.iter().enumerate() {
            if !t.front.done() && t.front.outstanding() > 0 {
                w.push(format!("core {i}: {} accesses outstanding", t.front.outstanding()));
            }
            for m in t.l1d.mshrs.iter() {
                w.push(format!("tile {i} L1D MSHR {:#x} ({:?})", m.block_addr, m.kind));
            }
            for m in t.l15.mshrs.iter() {
                w.push(format!(
                    "tile {i} L1.5 MSHR {:#x} ({:?}, line {:?})",
                    m.block_addr,
                    m.kind,
                    t.l15.state_of(m.block_addr)
                ));
            }
            for b in t.l15.evicting.keys() {
                w.push(format!("tile {i} L1.5 eviction {b:#x} awaiting PutAck"));
            }
            for l in t.home.l2.lines() {
                if !l.state.stable() {
                    w.push(format!(
                        "tile {i} home {:#x} {:?}",
                        l.block_addr, l.state.transient
                    ));
                }
            }
            if !t.home.pending.is_empty() {
                w.push(format!("tile {i} home: {} requests queued", t.home.pending.len()));
            }
        }
        w
    }

    /// Run until every core halts or `stop` cycles have elapsed.
    pub fn run_until(&mut self, stop: u64) -> Result<RunOutcome, SimError> {
        while self.cycle < stop {
            if self.all_done() {
                return Ok(RunOutcome::AllHalted);
            }
            self.step()?;
            if self.deadlocked() {
                return Err(SimError::DeadlockDetected {
                    cycle: self.cycle,
                    waiting: self.waiting(),
                });
            }
        }
        if self.all_done() {
            return Ok(RunOutcome::AllHalted);
        }
        Ok(RunOutcome::StopCycle)
    }

    /// After the cores halt, let in-flight traffic settle.
    pub fn drain_all(&mut self, limit: u64) -> Result<(), SimError> {
        let end = self.cycle + limit;
        while !self.is_drained() && self.cycle < end {
            self.step()?;
        }
        Ok(())
    }

    /// Coherent value of `len` bytes at `addr`: an owning L1.5 copy, else the
    /// home L2 copy, else memory.
    pub fn read_coherent(&self, addr: u64, len: usize) -> Vec<u8> {
        let bs = self.cfg.block_size() as u64;
        let mut out = Vec::with_capacity(len);
        let mut a = addr;
        while out.len() < len {
            let b = a & !(bs - 1);
            let block = self.coherent_block(b);
            let off = (a - b) as usize;
            let n = (bs as usize - off).min(len - out.len());
            out.extend_from_slice(&block[off..off + n]);
            a += n as u64;
        }
        out
    }

    fn coherent_block(&self, b: u64) -> Vec<u8> {
        for t in &self.tiles {
            if let Some(l) = t.l15.array.probe(b) {
                if l.state.is_owner() {
                    return l.data.clone();
                }
            }
            if let Some(e) = t.l15.evicting.get(&b) {
                if e.state == Mesi::M {
                    return e.data.clone();
                }
            }
        }
        let home = self.params.home(b) as usize;
        if let Some(l) = self.tiles[home].home.l2.probe(b) {
            return l.data.clone();
        }
        self.memctl.read_block(b, self.cfg.block_size())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), SimError> {
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_VERSION as u64,
            cycle: self.cycle,
            machine: serde_json::to_value(self).map_err(|e| SimError::Io(e.to_string()))?,
        };
        let text = serde_json::to_string(&doc).map_err(|e| SimError::Io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
    }

    pub fn restore_checkpoint(path: &Path) -> Result<Machine, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SimError::FileNotFound(path.display().to_string()),
            _ => SimError::Io(format!("{}: {e}", path.display())),
        })?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| SimError::CorruptCheckpoint(e.to_string()))?;
        let found = v
            .get("format_version")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| SimError::CorruptCheckpoint("missing format_version".into()))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(SimError::VersionMismatch {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let doc: CheckpointDoc =
            serde_json::from_value(v).map_err(|e| SimError::CorruptCheckpoint(e.to_string()))?;
        let m: Machine = serde_json::from_value(doc.machine)
            .map_err(|e| SimError::CorruptCheckpoint(e.to_string()))?;
        if m.cycle != doc.cycle {
            return Err(SimError::CorruptCheckpoint("cycle mismatch".into()));
        }
        Ok(m)
    }
}

/// The core's view of its tile: L1I, L1D and the queue toward the L1.5.
struct TilePort<'a> {
    core: u32,
    l1i: &'a mut L1Cache<()>,
    l1d: &'a mut L1Cache<L1dWaiter>,
    queue: &'a mut VecDeque<Queued>,
    direct: &'a mut BTreeMap<u64, (usize, usize)>,
    order: &'a mut u64,
    log: &'a mut Option<Vec<Access>>,
    k: &'a Knobs,
}

impl TilePort<'_> {
    fn enqueue(&mut self, block_addr: u64, op: L15Op, token: u64, now: u64) {
        self.queue.push_back(Queued {
            ready_at: now + 1,
            req: L15Request {
                block_addr,
                op,
                token,
            },
        });
    }

    /// Drop the L1D copy ahead of a store; a fill in flight must not
    /// install the stale block either.
    fn l1d_drop(&mut self, b: u64) {
        if let Some(m) = self.l1d.mshrs.get_mut(b) {
            m.no_install = true;
        }
        self.l1d.array.remove(b);
    }
}

impl MemoryPort for TilePort<'_> {
    fn fetch(&mut self, pc: u64, now: u64) -> u64 {
        let b = pc & !(self.k.block as u64 - 1);
        let c = &mut self.l1i;
        c.stats.accesses += 1;
        if c.array.probe(b).is_some() {
            c.array.touch(b);
            c.stats.hits += 1;
            return now;
        }
        c.stats.misses += 1;
        if !c.array.has_free_way(b) {
            let v = c.array.lru_victim(b, |_| true).expect("full set");
            c.array.remove(v);
            c.stats.evictions += 1;
        }
        c.array.insert(b, Mesi::S, vec![0; self.k.block]).expect("free way");
        now + self.k.ifetch_penalty
    }

    fn capacity(&self) -> usize {
        self.l1d
            .mshrs
            .free()
            .min(L15_QUEUE_DEPTH.saturating_sub(self.queue.len()))
    }

    fn access(&mut self, req: MemReq, now: u64) -> PortReply {
        let bs = self.k.block as u64;
        let b = req.addr & !(bs - 1);
        let off = (req.addr - b) as usize;
        match req.op {
            MemOp::Load { size } => {
                let bypass = self.l1d.mshrs.get(b).is_some_and(|m| m.no_install);
                let waiter = L1dWaiter {
                    token: req.token,
                    offset: off,
                    size,
                };
                let r = if bypass {
                    Lookup::Blocked
                } else {
                    self.l1d.lookup(req.addr, MshrKind::LoadS, waiter, now)
                };
                match r {
                    Lookup::Hit(data) => {
                        let bytes = data[off..off + size].to_vec();
                        if let Some(log) = self.log {
                            log.push(Access {
                                order: *self.order,
                                core: self.core,
                                addr: req.addr,
                                write: false,
                                bytes: bytes.clone(),
                            });
                        }
                        *self.order += 1;
                        PortReply::Hit {
                            data: bytes,
                            ready_at: now + self.k.l1_hit,
                        }
                    }
                    Lookup::Miss => {
                        self.enqueue(b, L15Op::Read, FILL | b, now);
                        PortReply::Pending
                    }
                    Lookup::MissMerged => PortReply::Pending,
                    Lookup::Blocked => {
                        // A store to this block is queued behind the fill in
                        // flight: read through the L1.5 in order instead.
                        if bypass {
                            self.l1d.stats.accesses += 1;
                            self.l1d.stats.misses += 1;
                        }
                        self.direct.insert(req.token, (off, size));
                        self.enqueue(b, L15Op::Read, req.token, now);
                        PortReply::Pending
                    }
                }
            }
            MemOp::Store { bytes } => {
                self.l1d_drop(b);
                self.enqueue(b, L15Op::Store { offset: off, bytes }, req.token, now);
                PortReply::Pending
            }
            MemOp::AmoAdd { size, operand } => {
                self.l1d_drop(b);
                let op = L15Op::AmoAdd {
                    offset: off,
                    size,
                    operand,
                };
                self.enqueue(b, op, req.token, now);
                PortReply::Pending
            }
        }
    }

    fn block_size(&self) -> usize {
        self.k.block
    }

    fn memory_size(&self) -> u64 {
        self.k.memory_size
    }
}

#[cfg(test)]
mod tests;
