//! Per-tile L1.5 controller: write-back private cache and coherence endpoint.
//!
//! Stable states live in the cache array (M, E, S; absent = I). Transient
//! states are implied by the MSHR file:
//!
//! * `IS_D`  - MSHR of kind `LoadS`, line absent: GetS sent.
//! * `IM_D`  - MSHR of kind `StoreX`, line absent: GetX (or an Upgrade that
//!   lost a race with an Inv) sent.
//! * `SM_A`  - MSHR of kind `StoreX`, line present in S: Upgrade sent.
//!
//! Evicted lines wait in `evicting` for their PutAck and answer any
//! Fwd/Inv that crosses the Put as if still holding the line.

use super::*;
use crate::cache::{CacheStats, Mesi, MshrFile, MshrKind, SetAssocCache};
use crate::config::CacheGeometry;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum L15Op {
    /// Fetch a coherent snapshot of the whole block (L1 fill or trace load).
    Read,
    Store {
        offset: usize,
        bytes: Vec<u8>,
    },
    /// Atomic fetch-and-add of a `size`-byte little-endian integer.
    AmoAdd {
        offset: usize,
        size: usize,
        operand: u64,
    },
}

impl L15Op {
    fn needs_ownership(&self) -> bool {
        !matches!(self, L15Op::Read)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct L15Request {
    pub block_addr: u64,
    pub op: L15Op,
    pub token: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReqOutcome {
    /// Served from a local line; completion is in the effects.
    Done,
    /// Parked in an MSHR (new or merged).
    Pending,
    /// No MSHR or way available, or the block is being evicted. Retry later.
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvictEntry {
    /// State still claimed toward the home until PutAck (I once a Fwd/Inv
    /// has taken the line away).
    pub state: Mesi,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct L15Ctrl {
    pub tile: NodeId,
    pub array: SetAssocCache<Mesi>,
    pub mshrs: MshrFile<L15Request>,
    pub evicting: BTreeMap<u64, EvictEntry>,
    pub stats: CacheStats,
}

fn apply(data: &mut [u8], op: &L15Op) -> Completion {
    // token/block filled in by caller
    match op {
        L15Op::Read => unreachable!(),
        L15Op::Store { offset, bytes } => {
            data[*offset..*offset + bytes.len()].copy_from_slice(bytes);
            Completion::StorePerformed {
                token: 0,
                block_addr: 0,
                offset: *offset,
                bytes: bytes.clone(),
            }
        }
        L15Op::AmoAdd {
            offset,
            size,
            operand,
        } => {
            let slot = &mut data[*offset..*offset + *size];
            let mut buf = [0u8; 8];
            buf[..*size].copy_from_slice(slot);
            let old = u64::from_le_bytes(buf);
            let new = old.wrapping_add(*operand).to_le_bytes();
            let old_bytes = slot.to_vec();
            slot.copy_from_slice(&new[..*size]);
            Completion::AmoDone {
                token: 0,
                block_addr: 0,
                offset: *offset,
                old: old_bytes,
                new: new[..*size].to_vec(),
            }
        }
    }
}

fn stamp(mut c: Completion, tok: u64, block: u64) -> Completion {
    match &mut c {
        Completion::BlockRead {
            token, block_addr, ..
        }
        | Completion::StorePerformed {
            token, block_addr, ..
        }
        | Completion::AmoDone {
            token, block_addr, ..
        } => {
            *token = tok;
            *block_addr = block;
        }
    }
    c
}

impl L15Ctrl {
    pub fn new(tile: NodeId, geom: CacheGeometry, mshrs: usize) -> Self {
        L15Ctrl {
            tile,
            array: SetAssocCache::new(geom),
            mshrs: MshrFile::new(mshrs),
            evicting: BTreeMap::new(),
            stats: CacheStats::default(),
        }
    }

    pub fn state_of(&self, block_addr: u64) -> Mesi {
        self.array
            .probe(block_addr)
            .map(|l| l.state)
            .unwrap_or(Mesi::I)
    }

    /// Outstanding MSHRs whose block maps to the same set as `block_addr`.
    fn set_reservations(&self, block_addr: u64) -> usize {
        let set = self.array.set_index(block_addr);
        self.mshrs
            .iter()
            .filter(|e| self.array.set_index(e.block_addr) == set)
            .count()
    }

    fn unexpected(&self, msg: &CoherenceMsg) -> ProtocolError {
        let b = msg.block_addr;
        let state = if let Some(e) = self.evicting.get(&b) {
            format!("evicting({:?})", e.state)
        } else if let Some(m) = self.mshrs.get(b) {
            format!("{:?}+mshr({:?})", self.state_of(b), m.kind)
        } else {
            format!("{:?}", self.state_of(b))
        };
        ProtocolError::UnexpectedMessage {
            node: self.tile,
            kind: msg.kind,
            block: b,
            state,
        }
    }

    fn serve(data: &mut [u8], req: &L15Request) -> Completion {
        match req.op {
            L15Op::Read => Completion::BlockRead {
                token: req.token,
                block_addr: req.block_addr,
                data: data.to_vec(),
            },
            _ => stamp(apply(data, &req.op), req.token, req.block_addr),
        }
    }

    /// Handle a request from this tile's L1/core.
    pub fn core_request(
        &mut self,
        req: L15Request,
        p: &ProtoParams,
        now: u64,
    ) -> (ReqOutcome, Effects) {
        let mut fx = Effects::default();
        let b = req.block_addr;
        if self.evicting.contains_key(&b) {
            self.stats.blocked += 1;
            return (ReqOutcome::Blocked, fx);
        }
        if let Some(m) = self.mshrs.get_mut(b) {
            m.waiters.push_back(req);
            self.stats.accesses += 1;
            self.stats.misses += 1;
            self.stats.merged += 1;
            return (ReqOutcome::Pending, fx);
        }
        let home = p.home(b);
        let state = self.state_of(b);
        let writable = state.is_owner()
            || (state == Mesi::S && p.mutation == Some(Mutation::SilentUpgradeFromS));
        if state.is_valid() && (!req.op.needs_ownership() || writable) {
            let line = self.array.probe_mut(b).expect("valid line");
            if req.op.needs_ownership() {
                line.state = Mesi::M;
            }
            fx.done.push(Self::serve(&mut line.data, &req));
            self.array.touch(b);
            self.stats.accesses += 1;
            self.stats.hits += 1;
            return (ReqOutcome::Done, fx);
        }
        // Needs an MSHR (and, for absent lines, a guaranteed way at fill time).
        if self.mshrs.is_full() || self.set_reservations(b) >= self.array.ways() {
            self.stats.blocked += 1;
            return (ReqOutcome::Blocked, fx);
        }
        let (kind, msg) = match (state, req.op.needs_ownership()) {
            (Mesi::S, true) => (MshrKind::StoreX, MsgKind::Upgrade),
            (_, true) => (MshrKind::StoreX, MsgKind::GetX),
            (_, false) => (MshrKind::LoadS, MsgKind::GetS),
        };
        let ok = self.mshrs.allocate(b, kind, req, now);
        debug_assert!(ok);
        self.stats.accesses += 1;
        self.stats.misses += 1;
        fx.msgs
            .push(CoherenceMsg::control(msg, b, self.tile, home));
        (ReqOutcome::Pending, fx)
    }

    /// Handle a network message addressed to this tile's L1.5.
    pub fn on_message(
        &mut self,
        msg: &CoherenceMsg,
        p: &ProtoParams,
        now: u64,
    ) -> Result<Effects, ProtocolError> {
        let mut fx = Effects::default();
        let b = msg.block_addr;
        match msg.kind {
            MsgKind::Inv => {
                if let Some(line) = self.array.remove(b) {
                    self.stats.invalidations += 1;
                    fx.l1_inval.push(b);
                    fx.msgs.push(self.ack_or_data(line.state, line.data, b, msg.src));
                } else if let Some(e) = self.evicting.get_mut(&b) {
                    if e.state == Mesi::I {
                        return Err(self.unexpected(msg));
                    }
                    let st = std::mem::replace(&mut e.state, Mesi::I);
                    let data = e.data.clone();
                    let reply = self.ack_or_data(st, data, b, msg.src);
                    fx.msgs.push(reply);
                } else {
                    return Err(self.unexpected(msg));
                }
            }
            MsgKind::FwdGetS | MsgKind::FwdGetX => {
                let exclusive = msg.kind == MsgKind::FwdGetX;
                let owned = self
                    .array
                    .probe(b)
                    .filter(|l| l.state.is_owner())
                    .map(|l| (l.state, l.data.clone()));
                if let Some((st, data)) = owned {
                    if exclusive {
                        self.array.remove(b);
                        self.stats.invalidations += 1;
                        fx.l1_inval.push(b);
                    } else if p.mutation != Some(Mutation::NoDemoteOnFwdGetS) {
                        self.array.probe_mut(b).unwrap().state = Mesi::S;
                    }
                    fx.msgs.push(self.owner_data(b, msg.src, data, st == Mesi::M));
                } else if let Some(e) = self.evicting.get_mut(&b).filter(|e| e.state.is_owner()) {
                    let dirty = e.state == Mesi::M;
                    e.state = if exclusive { Mesi::I } else { Mesi::S };
                    let data = e.data.clone();
                    let reply = self.owner_data(b, msg.src, data, dirty);
                    fx.msgs.push(reply);
                } else {
                    return Err(self.unexpected(msg));
                }
            }
            MsgKind::DataS | MsgKind::DataE | MsgKind::DataM | MsgKind::AckM => {
                self.fill(msg, p, now, &mut fx)?;
            }
            MsgKind::PutAck => {
                if self.evicting.remove(&b).is_none() {
                    return Err(self.unexpected(msg));
                }
            }
            _ => return Err(self.unexpected(msg)),
        }
        Ok(fx)
    }

    fn ack_or_data(&self, state: Mesi, data: Vec<u8>, b: u64, home: NodeId) -> CoherenceMsg {
        if state.is_owner() {
            self.owner_data(b, home, data, state == Mesi::M)
        } else {
            CoherenceMsg::control(MsgKind::InvAck, b, self.tile, home)
        }
    }

    fn owner_data(&self, b: u64, home: NodeId, data: Vec<u8>, dirty: bool) -> CoherenceMsg {
        let mut m = CoherenceMsg::data(MsgKind::OwnerData, b, self.tile, home, data);
        m.dirty = dirty;
        m
    }

    fn evict(&mut self, victim: u64, p: &ProtoParams, fx: &mut Effects) {
        let line = self.array.remove(victim).expect("victim resident");
        self.stats.evictions += 1;
        fx.l1_inval.push(victim);
        let home = p.home(victim);
        let msg = match line.state {
            Mesi::M => {
                self.stats.writebacks += 1;
                CoherenceMsg::data(MsgKind::PutM, victim, self.tile, home, line.data.clone())
            }
            Mesi::E => CoherenceMsg::control(MsgKind::PutE, victim, self.tile, home),
            _ => CoherenceMsg::control(MsgKind::PutS, victim, self.tile, home),
        };
        fx.msgs.push(msg);
        self.evicting.insert(
            victim,
            EvictEntry {
                state: line.state,
                data: line.data,
            },
        );
    }

    fn fill(
        &mut self,
        msg: &CoherenceMsg,
        p: &ProtoParams,
        now: u64,
        fx: &mut Effects,
    ) -> Result<(), ProtocolError> {
        let b = msg.block_addr;
        if !self.mshrs.contains(b) {
            return Err(self.unexpected(msg));
        }
        let mut grant = match msg.kind {
            MsgKind::DataS => Mesi::S,
            MsgKind::DataE => Mesi::E,
            _ => Mesi::M,
        };
        if msg.kind == MsgKind::AckM {
            if self.state_of(b) != Mesi::S {
                return Err(self.unexpected(msg));
            }
        } else {
            let data = msg.payload.clone().ok_or_else(|| self.unexpected(msg))?;
            if let Some(line) = self.array.probe_mut(b) {
                line.data = data;
            } else {
                if !self.array.has_free_way(b) {
                    let mshrs = &self.mshrs;
                    let victim = self
                        .array
                        .lru_victim(b, |l| !mshrs.contains(l.block_addr))
                        .expect("set reservation guarantees a victim");
                    self.evict(victim, p, fx);
                }
                self.array
                    .insert(b, grant, data)
                    .expect("free way after eviction");
            }
        }
        let entry = self.mshrs.remove(b).expect("checked above");
        let mut waiters = entry.waiters;
        let line = self.array.probe_mut(b).expect("line installed");
        line.state = grant;
        while let Some(w) = waiters.pop_front() {
            let writable = grant.is_owner()
                || p.mutation == Some(Mutation::SilentUpgradeFromS);
            if w.op.needs_ownership() && !writable {
                // Granted S but a queued store needs M: upgrade, keep the rest parked.
                fx.msgs.push(CoherenceMsg::control(
                    MsgKind::Upgrade,
                    b,
                    self.tile,
                    p.home(b),
                ));
                self.mshrs.allocate(b, MshrKind::StoreX, w, now);
                self.mshrs.get_mut(b).unwrap().waiters.extend(waiters);
                break;
            }
            if w.op.needs_ownership() {
                grant = Mesi::M;
                line.state = Mesi::M;
            }
            fx.done.push(Self::serve(&mut line.data, &w));
        }
        self.array.touch(b);
        Ok(())
    }

    /// No outstanding misses or evictions.
    pub fn is_quiescent(&self) -> bool {
        self.mshrs.is_empty() && self.evicting.is_empty()
    }
}
