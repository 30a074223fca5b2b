//! Exhaustive explicit-state model checking of the coherence controllers.
//!
//! The real L1.5 and home controllers run untimed: every in-flight message
//! sits in a per-(src, dst, net) FIFO and any channel head, or any idle
//! core's next request, may fire next. States are deduplicated by hash
//! after canonicalising LRU stamps and dropping statistics. Deliveries to
//! the memory controller commute with every other move, so a state with one
//! pending explores only that delivery.

use crate::cache::CacheStats;
use crate::coherence::{
    check_swmr, Completion, CoherenceMsg, Effects, HomeCtrl, HomeStats, L15Ctrl, L15Op,
    L15Request, MemCtrl, Mutation, Net, ProtoParams, ReqOutcome,
};
use crate::config::CacheGeometry;
use serde::Serialize;
use std::collections::{BTreeMap, HashSet, VecDeque};
use std::hash::{Hash, Hasher};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CheckConfig {
    pub tiles: u32,
    pub blocks: u32,
    pub ops_per_core: u32,
    pub block_size: usize,
    pub mutation: Option<Mutation>,
    pub max_states: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            tiles: 2,
            blocks: 1,
            ops_per_core: 2,
            block_size: 64,
            mutation: None,
            max_states: 20_000_000,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckError {
    #[error("state space exceeds the cap of {0} states")]
    StateSpaceBoundExceeded(usize),
    #[error("bounds out of range: {0}")]
    BadBounds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    Swmr,
    DataValue,
    UnexpectedMessage,
    Deadlock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
    /// Actions from the initial state to the violating one.
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub states: usize,
    pub transitions: u64,
    pub violation: Option<Violation>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Op {
    Load(u8),
    Store(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Action {
    Issue { tile: u32, op: Op },
    Deliver { key: (u32, u32, u8) },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Core {
    issued: u32,
    waiting: Option<Op>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    l15: Vec<L15Ctrl>,
    home: Vec<HomeCtrl>,
    mem: MemCtrl,
    chans: BTreeMap<(u32, u32, u8), VecDeque<CoherenceMsg>>,
    cores: Vec<Core>,
    /// Value of byte 0 of each block after the last performed store.
    ghost: Vec<u8>,
}

struct Model {
    cfg: CheckConfig,
    p: ProtoParams,
}

enum Step {
    Next(State, String),
    Bad(ViolationKind, String, String),
}

impl Model {
    fn block_addr(&self, i: u8) -> u64 {
        // Every block maps to home 0 and the same L2 set, so two blocks
        // contend for one L1.5 way and one L2 way.
        i as u64 * self.cfg.tiles as u64 * self.cfg.block_size as u64
    }

    fn block_index(&self, addr: u64) -> usize {
        (addr / (self.cfg.tiles as u64 * self.cfg.block_size as u64)) as usize
    }

    fn initial(&self) -> State {
        let one = CacheGeometry {
            sets: 1,
            ways: 1,
            block_size: self.cfg.block_size,
        };
        let t = self.cfg.tiles;
        State {
            l15: (0..t).map(|i| L15Ctrl::new(i, one, 2)).collect(),
            home: (0..t).map(|i| HomeCtrl::new(i, one, t, 2)).collect(),
            mem: MemCtrl::default(),
            chans: BTreeMap::new(),
            cores: vec![
                Core {
                    issued: 0,
                    waiting: None
                };
                t as usize
            ],
            ghost: vec![0; self.cfg.blocks as usize],
        }
    }

    fn actions(&self, s: &State) -> Vec<Action> {
        let mut out = Vec::new();
        for (i, c) in s.cores.iter().enumerate() {
            if c.waiting.is_none() && c.issued < self.cfg.ops_per_core {
                for b in 0..self.cfg.blocks as u8 {
                    out.push(Action::Issue { tile: i as u32, op: Op::Load(b) });
                    out.push(Action::Issue { tile: i as u32, op: Op::Store(b) });
                }
            }
        }
        out.extend(s.chans.keys().map(|&key| Action::Deliver { key }));
        out
    }

    fn push(s: &mut State, msgs: Vec<CoherenceMsg>) {
        for m in msgs {
            let key = (m.src, m.dst, m.net().index() as u8);
            s.chans.entry(key).or_default().push_back(m);
        }
    }

    /// Apply L1.5 effects; completions are checked against the ghost values.
    fn l15_effects(&self, s: &mut State, tile: usize, fx: Effects) -> Result<(), (ViolationKind, String)> {
        Self::push(s, fx.msgs);
        for d in fx.done {
            let core = &mut s.cores[tile];
            core.waiting = None;
            match d {
                Completion::BlockRead { block_addr, data, .. } => {
                    let want = s.ghost[self.block_index(block_addr)];
                    if data[0] != want {
                        return Err((
                            ViolationKind::DataValue,
                            format!(
                                "tile {tile} read {block_addr:#x} = {} but the last store wrote {want}",
                                data[0]
                            ),
                        ));
                    }
                }
                Completion::StorePerformed { block_addr, bytes, .. } => {
                    let i = self.block_index(block_addr);
                    s.ghost[i] = bytes[0];
                }
                Completion::AmoDone { .. } => unreachable!("no AMOs in the model"),
            }
        }
        Ok(())
    }

    fn apply(&self, s: &State, a: Action) -> Option<Step> {
        let mut n = s.clone();
        let desc;
        let res = match a {
            Action::Issue { tile, op } => {
                let (b, l15op) = match op {
                    Op::Load(b) => (b, L15Op::Read),
                    Op::Store(b) => (
                        b,
                        L15Op::Store {
                            offset: 0,
                            bytes: vec![tile as u8 + 1],
                        },
                    ),
                };
                let req = L15Request {
                    block_addr: self.block_addr(b),
                    op: l15op,
                    token: 0,
                };
                desc = format!("core {tile} issues {op:?}");
                let t = tile as usize;
                let (outcome, fx) = n.l15[t].core_request(req, &self.p, 0);
                if outcome == ReqOutcome::Blocked {
                    return None;
                }
                n.cores[t].issued += 1;
                n.cores[t].waiting = Some(op);
                self.l15_effects(&mut n, t, fx)
            }
            Action::Deliver { key } => {
                let q = n.chans.get_mut(&key).unwrap();
                let msg = q.pop_front().unwrap();
                if q.is_empty() {
                    n.chans.remove(&key);
                }
                desc = format!(
                    "deliver {:?} {}->{} block {:#x}{}",
                    msg.kind,
                    msg.src,
                    msg.dst,
                    msg.block_addr,
                    if msg.dirty { " (dirty)" } else { "" }
                );
                if msg.dst == self.p.chipset() {
                    match n.mem.handle(&msg, &self.p) {
                        Ok(reply) => {
                            Self::push(&mut n, reply.into_iter().collect());
                            Ok(())
                        }
                        Err(e) => Err((ViolationKind::UnexpectedMessage, e.to_string())),
                    }
                } else if msg.net() == Net::Noc2 {
                    let t = msg.dst as usize;
                    match n.l15[t].on_message(&msg, &self.p, 0) {
                        Ok(fx) => self.l15_effects(&mut n, t, fx),
                        Err(e) => Err((ViolationKind::UnexpectedMessage, e.to_string())),
                    }
                } else {
                    let t = msg.dst as usize;
                    match n.home[t].handle(msg, &self.p) {
                        Ok(fx) => {
                            Self::push(&mut n, fx.msgs);
                            Ok(())
                        }
                        Err(e) => Err((ViolationKind::UnexpectedMessage, e.to_string())),
                    }
                }
            }
        };
        Some(match res {
            Err((k, d)) => Step::Bad(k, d, desc),
            Ok(()) => match check_swmr(&n.l15) {
                Err(d) => Step::Bad(ViolationKind::Swmr, d, desc),
                Ok(()) => {
                    canonicalize(&mut n);
                    Step::Next(n, desc)
                }
            },
        })
    }

    fn terminal(&self, s: &State) -> bool {
        s.chans.is_empty()
            && s.cores.iter().all(|c| c.waiting.is_none())
            && s.l15.iter().all(|c| c.is_quiescent())
            && s.home.iter().all(|h| h.is_quiescent())
    }
}

fn canonicalize(s: &mut State) {
    for c in &mut s.l15 {
        c.array.canonicalize();
        c.stats = CacheStats::default();
    }
    for h in &mut s.home {
        h.l2.canonicalize();
        h.stats = HomeStats::default();
    }
    s.mem.reads = 0;
    s.mem.writes = 0;
}

/// Collects the bytes a `Hash` impl writes, to hash them in one pass.
struct ByteSink(Vec<u8>);

impl Hasher for ByteSink {
    fn write(&mut self, bytes: &[u8]) {
        self.0.extend_from_slice(bytes);
    }
    fn finish(&self) -> u64 {
        unreachable!()
    }
}

fn fingerprint(s: &State) -> u128 {
    thread_local!(static BUF: std::cell::RefCell<ByteSink> = const { std::cell::RefCell::new(ByteSink(Vec::new())) });
    BUF.with_borrow_mut(|sink| {
        sink.0.clear();
        s.hash(sink);
        xxh3_128(&sink.0)
    })
}

struct Frame {
    fp: u128,
    state: State,
    /// Unexplored successors, already computed.
    next: Vec<(Action, State, String)>,
    desc: String,
}

impl Model {
    /// Successors of `s`, reduced to a single memory delivery when one is
    /// enabled. Memory deliveries touch only the chipset and the tails of
    /// its reply channels and are invisible to the checked properties.
    /// Returns the violating step if one occurs.
    fn expand(
        &self,
        s: &State,
        full: bool,
        transitions: &mut u64,
    ) -> Result<Vec<(Action, State, String)>, (ViolationKind, String, String)> {
        let mut acts = self.actions(s);
        if !full {
            let chipset = self.p.chipset();
            if let Some(a) = acts
                .iter()
                .copied()
                .find(|a| matches!(a, Action::Deliver { key } if key.1 == chipset))
            {
                acts = vec![a];
            }
        }
        let mut out = Vec::with_capacity(acts.len());
        for a in acts {
            match self.apply(s, a) {
                None => {}
                Some(Step::Bad(k, d, desc)) => return Err((k, d, desc)),
                Some(Step::Next(n, desc)) => {
                    *transitions += 1;
                    out.push((a, n, desc));
                }
            }
        }
        Ok(out)
    }
}

/// Depth-first exploration of every reachable state up to partial-order
/// equivalence. A violation comes with the path that reached it.
pub fn model_check(cfg: &CheckConfig) -> Result<CheckResult, CheckError> {
    if cfg.tiles > 3 || cfg.blocks > 2 || cfg.ops_per_core > 3 {
        return Err(CheckError::BadBounds(format!(
            "tiles {} (max 3), blocks {} (max 2), ops {} (max 3)",
            cfg.tiles, cfg.blocks, cfg.ops_per_core
        )));
    }
    if cfg.tiles > 0 && (cfg.blocks == 0 || !cfg.block_size.is_power_of_two()) {
        return Err(CheckError::BadBounds("need at least one power-of-two block".into()));
    }
    let model = Model {
        cfg: *cfg,
        p: ProtoParams {
            block_size: cfg.block_size,
            num_tiles: cfg.tiles,
            mutation: cfg.mutation,
        },
    };
    let mut transitions = 0u64;
    let mut seen: HashSet<u128> = HashSet::new();
    let mut on_stack: HashSet<u128> = HashSet::new();
    let mut stack: Vec<Frame> = Vec::new();

    let fail = |stack: &[Frame], kind, detail, last: Option<String>, seen: usize, transitions| {
        let mut trace: Vec<String> = stack.iter().skip(1).map(|f| f.desc.clone()).collect();
        trace.extend(last);
        Ok(CheckResult {
            states: seen,
            transitions,
            violation: Some(Violation { kind, detail, trace }),
        })
    };

    // Push a fresh state: expand it, fully if the reduced set closes a
    // cycle back onto the stack.
    macro_rules! enter {
        ($state:expr, $fp:expr, $desc:expr) => {{
            let state: State = $state;
            let fp: u128 = $fp;
            if seen.len() >= cfg.max_states {
                return Err(CheckError::StateSpaceBoundExceeded(cfg.max_states));
            }
            seen.insert(fp);
            on_stack.insert(fp);
            stack.push(Frame {
                fp,
                state,
                next: Vec::new(),
                desc: $desc,
            });
            let top = stack.last().unwrap();
            let mut next = match model.expand(&top.state, false, &mut transitions) {
                Ok(n) => n,
                Err((k, d, desc)) => return fail(&stack, k, d, Some(desc), seen.len(), transitions),
            };
            if next.is_empty() && !model.terminal(&top.state) {
                let detail = format!(
                    "no move possible with {} messages in flight",
                    top.state.chans.values().map(|q| q.len()).sum::<usize>()
                );
                return fail(&stack, ViolationKind::Deadlock, detail, None, seen.len(), transitions);
            }
            if next.len() == 1 && on_stack.contains(&fingerprint(&next[0].1)) {
                next = match model.expand(&top.state, true, &mut transitions) {
                    Ok(n) => n,
                    Err((k, d, desc)) => {
                        return fail(&stack, k, d, Some(desc), seen.len(), transitions)
                    }
                };
            }
            next.reverse();
            stack.last_mut().unwrap().next = next;
        }};
    }

    let init = model.initial();
    let fp = fingerprint(&init);
    enter!(init, fp, String::new());
    while let Some(top) = stack.last_mut() {
        match top.next.pop() {
            None => {
                on_stack.remove(&top.fp);
                stack.pop();
            }
            Some((_, n, desc)) => {
                let fp = fingerprint(&n);
                if !seen.contains(&fp) {
                    enter!(n, fp, desc);
                }
            }
        }
    }
    Ok(CheckResult {
        states: seen.len(),
        transitions,
        violation: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tiles: u32, blocks: u32, ops: u32) -> CheckConfig {
        CheckConfig {
            tiles,
            blocks,
            ops_per_core: ops,
            ..CheckConfig::default()
        }
    }

    #[test]
    fn empty_system() {
        let r = model_check(&cfg(0, 0, 0)).unwrap();
        assert!(r.passed());
        assert_eq!(r.states, 1);
    }

    #[test]
    fn two_tiles_one_block_two_ops() {
        let r = model_check(&cfg(2, 1, 2)).unwrap();
        assert!(r.passed(), "{:?}", r.violation);
        assert!(r.states > 10);
    }

    #[test]
    fn two_tiles_two_blocks() {
        let r = model_check(&cfg(2, 2, 2)).unwrap();
        assert!(r.passed(), "{:?}", r.violation);
    }

    #[test]
    fn mutations_caught() {
        for m in [
            Mutation::SkipInvAckCollection,
            Mutation::NoDemoteOnFwdGetS,
            Mutation::SilentUpgradeFromS,
        ] {
            let mut c = cfg(2, 1, 2);
            c.mutation = Some(m);
            let r = model_check(&c).unwrap();
            let v = r.violation.unwrap_or_else(|| panic!("{m:?} not caught"));
            assert!(!v.trace.is_empty());
        }
    }

    #[test]
    fn cap_enforced() {
        let mut c = cfg(2, 1, 2);
        c.max_states = 5;
        assert_eq!(model_check(&c), Err(CheckError::StateSpaceBoundExceeded(5)));
    }

    #[test]
    fn bounds_checked() {
        assert!(matches!(model_check(&cfg(4, 1, 1)), Err(CheckError::BadBounds(_))));
    }
}
