//! Home side: inclusive L2 slice with an embedded directory, plus the
//! chipset memory controller.
//!
//! Home transition table (requester `r`, owner `o`, sharers `s`):
//!
//! | request        | directory       | action                                        | next            |
//! |----------------|-----------------|-----------------------------------------------|-----------------|
//! | GetS           | not resident    | MemRead, then DataE                           | Exclusive(r)    |
//! | GetS           | Uncached        | DataE                                         | Exclusive(r)    |
//! | GetS           | Shared(s)       | DataS                                         | Shared(s + r)   |
//! | GetS           | Exclusive(o)    | FwdGetS to o, await OwnerData, DataS          | Shared({o, r})  |
//! | GetX / Upgrade | not resident    | MemRead, then DataM                           | Exclusive(r)    |
//! | GetX / Upgrade | Uncached        | DataM                                         | Exclusive(r)    |
//! | GetX / Upgrade | Shared(s)       | Inv to s - r, await InvAcks, DataM (AckM if r in s and Upgrade) | Exclusive(r) |
//! | GetX / Upgrade | Exclusive(o)    | FwdGetX to o, await OwnerData, DataM          | Exclusive(r)    |
//! | PutM / PutE    | Exclusive(r)    | (PutM: MemWrite) PutAck                       | Uncached        |
//! | Put*           | r in Shared(s)  | PutAck                                        | Shared(s - r) or Uncached |
//! | Put*           | otherwise       | PutAck (stale)                                | unchanged       |
//!
//! Requests for a block in a transient state queue FIFO on that block and are
//! replayed when it settles. Requests that cannot get an L2 way or an L2 MSHR
//! wait in a per-slice queue that preserves per-block order. Dirty data that
//! reaches the home is written through to memory.

use super::*;
use crate::cache::SetAssocCache;
use crate::config::CacheGeometry;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirState {
    Uncached,
    Shared(TileSet),
    Exclusive(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transient {
    None,
    AwaitingMemory { requester: NodeId, req: MsgKind },
    AwaitingInvAcks {
        remaining: u32,
        requester: NodeId,
        req: MsgKind,
    },
    AwaitingOwnerData { requester: NodeId, req: MsgKind },
    /// Inclusive L2 eviction collecting acks/data from every holder.
    Evicting { remaining: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DirEntry {
    pub state: DirState,
    pub transient: Transient,
    pub deferred: VecDeque<CoherenceMsg>,
}

impl DirEntry {
    pub fn stable(&self) -> bool {
        self.transient == Transient::None
    }
    /// Tiles the directory believes hold the block.
    pub fn holders(&self) -> TileSet {
        match self.state {
            DirState::Uncached => TileSet::default(),
            DirState::Shared(s) => s,
            DirState::Exclusive(o) => TileSet::single(o),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HomeStats {
    pub requests: u64,
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub mem_reads: u64,
    pub mem_writes: u64,
    pub evictions: u64,
    pub invs_sent: u64,
    pub fwds_sent: u64,
    pub deferred: u64,
    pub queued: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HomeCtrl {
    pub tile: NodeId,
    pub l2: SetAssocCache<DirEntry>,
    /// Requests waiting for an L2 way or memory MSHR.
    pub pending: VecDeque<CoherenceMsg>,
    pub mshr_capacity: usize,
    pub mem_outstanding: usize,
    pub stats: HomeStats,
}

impl HomeCtrl {
    pub fn new(tile: NodeId, slice: CacheGeometry, num_tiles: u32, mshrs: usize) -> Self {
        HomeCtrl {
            tile,
            l2: SetAssocCache::with_stride(slice, num_tiles as u64),
            pending: VecDeque::new(),
            mshr_capacity: mshrs,
            mem_outstanding: 0,
            stats: HomeStats::default(),
        }
    }

    pub fn entry(&self, block_addr: u64) -> Option<&DirEntry> {
        self.l2.probe(block_addr).map(|l| &l.state)
    }

    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty()
            && self
                .l2
                .lines()
                .all(|l| l.state.stable() && l.state.deferred.is_empty())
    }

    fn unexpected(&self, msg: &CoherenceMsg) -> ProtocolError {
        ProtocolError::UnexpectedMessage {
            node: self.tile,
            kind: msg.kind,
            block: msg.block_addr,
            state: match self.entry(msg.block_addr) {
                Some(e) => format!("{:?}/{:?}", e.state, e.transient),
                None => "not-resident".into(),
            },
        }
    }

    fn send(&self, fx: &mut Effects, kind: MsgKind, b: u64, dst: NodeId) {
        fx.msgs.push(CoherenceMsg::control(kind, b, self.tile, dst));
    }

    fn send_data(&self, fx: &mut Effects, kind: MsgKind, b: u64, dst: NodeId, data: Vec<u8>) {
        fx.msgs
            .push(CoherenceMsg::data(kind, b, self.tile, dst, data));
    }

    /// Handle one message addressed to this home.
    pub fn handle(
        &mut self,
        msg: CoherenceMsg,
        p: &ProtoParams,
    ) -> Result<Effects, ProtocolError> {
        let mut fx = Effects::default();
        if !msg.well_formed(p.block_size) {
            return Err(self.unexpected(&msg));
        }
        self.stats.requests += u64::from(msg.kind.is_request());
        self.dispatch(msg, p, &mut fx)?;
        if !self.pending.is_empty() {
            self.retry_pending(p, &mut fx)?;
        }
        Ok(fx)
    }

    fn dispatch(
        &mut self,
        msg: CoherenceMsg,
        p: &ProtoParams,
        fx: &mut Effects,
    ) -> Result<(), ProtocolError> {
        match msg.kind {
            MsgKind::GetS | MsgKind::GetX | MsgKind::Upgrade => self.request(msg, p, fx),
            MsgKind::PutS | MsgKind::PutE | MsgKind::PutM => self.put(msg, p, fx),
            MsgKind::InvAck | MsgKind::OwnerData => self.response(msg, p, fx),
            MsgKind::MemData => self.mem_data(msg, p, fx),
            _ => Err(self.unexpected(&msg)),
        }
    }

    fn request(
        &mut self,
        msg: CoherenceMsg,
        p: &ProtoParams,
        fx: &mut Effects,
    ) -> Result<(), ProtocolError> {
        let b = msg.block_addr;
        if let Some(line) = self.l2.probe_mut(b) {
            if !line.state.stable() {
                line.state.deferred.push_back(msg);
                self.stats.deferred += 1;
                return Ok(());
            }
            return self.process_stable(msg, p, fx);
        }
        if self.pending.iter().any(|m| m.block_addr == b) || !self.try_allocate(&msg, p, fx) {
            self.stats.queued += 1;
            self.pending.push_back(msg);
        }
        Ok(())
    }

    /// Bring a non-resident block into the slice for `msg`. False when it must
    /// wait (memory MSHRs exhausted, or the set has no evictable way yet).
    fn try_allocate(&mut self, msg: &CoherenceMsg, p: &ProtoParams, fx: &mut Effects) -> bool {
        let b = msg.block_addr;
        if self.mem_outstanding >= self.mshr_capacity {
            return false;
        }
        if !self.l2.has_free_way(b) {
            let set = self.l2.set_index(b);
            let evicting = self
                .l2
                .lines()
                .any(|l| self.l2.set_index(l.block_addr) == set
                    && matches!(l.state.transient, Transient::Evicting { .. }));
            if evicting {
                return false;
            }
            let Some(victim) = self.l2.lru_victim(b, |l| l.state.stable()) else {
                return false;
            };
            if !self.start_eviction(victim, fx) {
                return false;
            }
        }
        let size = p.block_size;
        self.l2
            .insert(
                b,
                DirEntry {
                    state: DirState::Uncached,
                    transient: Transient::AwaitingMemory {
                        requester: msg.src,
                        req: msg.kind,
                    },
                    deferred: VecDeque::new(),
                },
                vec![0; size],
            )
            .expect("free way");
        self.mem_outstanding += 1;
        self.stats.l2_misses += 1;
        self.stats.mem_reads += 1;
        self.send(fx, MsgKind::MemRead, b, p.chipset());
        true
    }

    /// Begin evicting `victim`. Returns true if the way is free immediately.
    fn start_eviction(&mut self, victim: u64, fx: &mut Effects) -> bool {
        let line = self.l2.probe_mut(victim).expect("victim resident");
        let holders = line.state.holders();
        if holders.is_empty() {
            self.l2.remove(victim);
            self.stats.evictions += 1;
            return true;
        }
        line.state.transient = Transient::Evicting {
            remaining: holders.len(),
        };
        for t in holders.iter() {
            self.send(fx, MsgKind::Inv, victim, t);
            self.stats.invs_sent += 1;
        }
        false
    }

    fn process_stable(
        &mut self,
        msg: CoherenceMsg,
        p: &ProtoParams,
        fx: &mut Effects,
    ) -> Result<(), ProtocolError> {
        let b = msg.block_addr;
        let r = msg.src;
        self.stats.l2_hits += 1;
        self.l2.touch(b);
        let me = self.tile;
        let line = self.l2.probe_mut(b).expect("resident");
        let data = line.data.clone();
        let entry = &mut line.state;
        let mut out: Vec<CoherenceMsg> = Vec::new();
        let ctl = |kind, dst| CoherenceMsg::control(kind, b, me, dst);
        let dat = |kind, dst, d: Vec<u8>| CoherenceMsg::data(kind, b, me, dst, d);
        match (msg.kind, entry.state) {
            (MsgKind::GetS, DirState::Uncached) => {
                out.push(dat(MsgKind::DataE, r, data));
                entry.state = DirState::Exclusive(r);
            }
            (MsgKind::GetS, DirState::Shared(mut s)) => {
                out.push(dat(MsgKind::DataS, r, data));
                s.insert(r);
                entry.state = DirState::Shared(s);
            }
            (MsgKind::GetS, DirState::Exclusive(o)) if o != r => {
                out.push(ctl(MsgKind::FwdGetS, o));
                self.stats.fwds_sent += 1;
                entry.transient = Transient::AwaitingOwnerData {
                    requester: r,
                    req: MsgKind::GetS,
                };
            }
            (MsgKind::GetX | MsgKind::Upgrade, DirState::Uncached) => {
                out.push(dat(MsgKind::DataM, r, data));
                entry.state = DirState::Exclusive(r);
            }
            (MsgKind::GetX | MsgKind::Upgrade, DirState::Shared(s)) => {
                let keeps_data = msg.kind == MsgKind::Upgrade && s.contains(r);
                let grant = if keeps_data {
                    MsgKind::Upgrade
                } else {
                    MsgKind::GetX
                };
                let mut others = s;
                others.remove(r);
                for t in others.iter() {
                    out.push(ctl(MsgKind::Inv, t));
                    self.stats.invs_sent += 1;
                }
                if others.is_empty() || p.mutation == Some(Mutation::SkipInvAckCollection) {
                    out.push(if keeps_data {
                        ctl(MsgKind::AckM, r)
                    } else {
                        dat(MsgKind::DataM, r, data)
                    });
                    entry.state = DirState::Exclusive(r);
                } else {
                    entry.transient = Transient::AwaitingInvAcks {
                        remaining: others.len(),
                        requester: r,
                        req: grant,
                    };
                }
            }
            (MsgKind::GetX | MsgKind::Upgrade, DirState::Exclusive(o)) if o != r => {
                out.push(ctl(MsgKind::FwdGetX, o));
                self.stats.fwds_sent += 1;
                entry.transient = Transient::AwaitingOwnerData {
                    requester: r,
                    req: MsgKind::GetX,
                };
            }
            _ => return Err(self.unexpected(&msg)),
        }
        fx.msgs.extend(out);
        Ok(())
    }

    fn put(
        &mut self,
        msg: CoherenceMsg,
        p: &ProtoParams,
        fx: &mut Effects,
    ) -> Result<(), ProtocolError> {
        let b = msg.block_addr;
        let t = msg.src;
        let Some(line) = self.l2.probe_mut(b) else {
            self.send(fx, MsgKind::PutAck, b, t);
            return Ok(());
        };
        if !line.state.stable() {
            line.state.deferred.push_back(msg);
            self.stats.deferred += 1;
            return Ok(());
        }
        let mut write_back = None;
        match (msg.kind, line.state.state) {
            (MsgKind::PutM | MsgKind::PutE, DirState::Exclusive(o)) if o == t => {
                if msg.kind == MsgKind::PutM {
                    let data = msg.payload.clone().unwrap();
                    let line = self.l2.probe_mut(b).unwrap();
                    line.data = data.clone();
                    write_back = Some(data);
                }
                self.l2.probe_mut(b).unwrap().state.state = DirState::Uncached;
            }
            (_, DirState::Shared(mut s)) if s.contains(t) => {
                s.remove(t);
                line.state.state = if s.is_empty() {
                    DirState::Uncached
                } else {
                    DirState::Shared(s)
                };
            }
            _ => {}
        }
        if let Some(data) = write_back {
            self.stats.mem_writes += 1;
            self.send_data(fx, MsgKind::MemWrite, b, p.chipset(), data);
        }
        self.send(fx, MsgKind::PutAck, b, t);
        Ok(())
    }

    fn response(
        &mut self,
        msg: CoherenceMsg,
        p: &ProtoParams,
        fx: &mut Effects,
    ) -> Result<(), ProtocolError> {
        let b = msg.block_addr;
        let Some(line) = self.l2.probe_mut(b) else {
            return Err(self.unexpected(&msg));
        };
        match line.state.transient {
            Transient::AwaitingInvAcks {
                remaining,
                requester,
                req,
            } if msg.kind == MsgKind::InvAck => {
                if remaining > 1 {
                    line.state.transient = Transient::AwaitingInvAcks {
                        remaining: remaining - 1,
                        requester,
                        req,
                    };
                    return Ok(());
                }
                let data = line.data.clone();
                line.state.state = DirState::Exclusive(requester);
                line.state.transient = Transient::None;
                if req == MsgKind::Upgrade {
                    self.send(fx, MsgKind::AckM, b, requester);
                } else {
                    self.send_data(fx, MsgKind::DataM, b, requester, data);
                }
                self.drain_deferred(b, p, fx)
            }
            Transient::AwaitingOwnerData { requester, req } if msg.kind == MsgKind::OwnerData => {
                let DirState::Exclusive(owner) = line.state.state else {
                    return Err(self.unexpected(&msg));
                };
                if owner != msg.src {
                    return Err(self.unexpected(&msg));
                }
                let data = msg.payload.clone().unwrap();
                line.data = data.clone();
                line.state.transient = Transient::None;
                if req == MsgKind::GetS {
                    let mut s = TileSet::single(owner);
                    s.insert(requester);
                    line.state.state = DirState::Shared(s);
                    if msg.dirty {
                        self.stats.mem_writes += 1;
                        self.send_data(fx, MsgKind::MemWrite, b, p.chipset(), data.clone());
                    }
                    self.send_data(fx, MsgKind::DataS, b, requester, data);
                } else {
                    line.state.state = DirState::Exclusive(requester);
                    self.send_data(fx, MsgKind::DataM, b, requester, data);
                }
                self.drain_deferred(b, p, fx)
            }
            Transient::Evicting { remaining } => {
                if msg.kind == MsgKind::OwnerData {
                    let data = msg.payload.clone().unwrap();
                    line.data = data.clone();
                    if msg.dirty {
                        self.stats.mem_writes += 1;
                        self.send_data(fx, MsgKind::MemWrite, b, p.chipset(), data);
                    }
                }
                let line = self.l2.probe_mut(b).unwrap();
                if remaining > 1 {
                    line.state.transient = Transient::Evicting {
                        remaining: remaining - 1,
                    };
                    return Ok(());
                }
                let gone = self.l2.remove(b).unwrap();
                self.stats.evictions += 1;
                // Requests that queued on the evicted block now see it absent.
                for m in gone.state.deferred {
                    self.dispatch(m, p, fx)?;
                }
                Ok(())
            }
            _ if msg.kind == MsgKind::InvAck
                && p.mutation == Some(Mutation::SkipInvAckCollection) =>
            {
                Ok(())
            }
            _ => Err(self.unexpected(&msg)),
        }
    }

    fn mem_data(
        &mut self,
        msg: CoherenceMsg,
        p: &ProtoParams,
        fx: &mut Effects,
    ) -> Result<(), ProtocolError> {
        let b = msg.block_addr;
        let Some(line) = self.l2.probe_mut(b) else {
            return Err(self.unexpected(&msg));
        };
        let Transient::AwaitingMemory { requester, req } = line.state.transient else {
            return Err(self.unexpected(&msg));
        };
        let data = msg.payload.clone().unwrap();
        line.data = data.clone();
        line.state.transient = Transient::None;
        line.state.state = DirState::Exclusive(requester);
        self.mem_outstanding -= 1;
        let kind = if req == MsgKind::GetS {
            MsgKind::DataE
        } else {
            MsgKind::DataM
        };
        self.send_data(fx, kind, b, requester, data);
        self.drain_deferred(b, p, fx)
    }

    fn drain_deferred(
        &mut self,
        b: u64,
        p: &ProtoParams,
        fx: &mut Effects,
    ) -> Result<(), ProtocolError> {
        loop {
            let Some(line) = self.l2.probe_mut(b) else {
                return Ok(());
            };
            if !line.state.stable() {
                return Ok(());
            }
            let Some(m) = line.state.deferred.pop_front() else {
                return Ok(());
            };
            self.dispatch(m, p, fx)?;
        }
    }

    /// Replay the slice queue in order; a block whose request still cannot
    /// proceed holds back every later request for that block.
    fn retry_pending(&mut self, p: &ProtoParams, fx: &mut Effects) -> Result<(), ProtocolError> {
        let queue = std::mem::take(&mut self.pending);
        let mut held: BTreeSet<u64> = BTreeSet::new();
        let mut still = VecDeque::new();
        for msg in queue {
            let b = msg.block_addr;
            if held.contains(&b) {
                still.push_back(msg);
            } else if self.l2.probe(b).is_some() {
                self.request(msg, p, fx)?;
            } else if !self.try_allocate(&msg, p, fx) {
                held.insert(b);
                still.push_back(msg);
            }
        }
        still.extend(std::mem::take(&mut self.pending));
        self.pending = still;
        Ok(())
    }
}

/// Chipset memory controller: fixed-latency, in-order, sparse backing store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemCtrl {
    pub blocks: BTreeMap<u64, Vec<u8>>,
    pub reads: u64,
    pub writes: u64,
}

impl MemCtrl {
    pub fn read_block(&self, block_addr: u64, block_size: usize) -> Vec<u8> {
        self.blocks
            .get(&block_addr)
            .cloned()
            .unwrap_or_else(|| vec![0; block_size])
    }

    /// Apply a MemWrite, or answer a MemRead with MemData.
    pub fn handle(
        &mut self,
        msg: &CoherenceMsg,
        p: &ProtoParams,
    ) -> Result<Option<CoherenceMsg>, ProtocolError> {
        match msg.kind {
            MsgKind::MemRead => {
                self.reads += 1;
                let data = self.read_block(msg.block_addr, p.block_size);
                Ok(Some(CoherenceMsg::data(
                    MsgKind::MemData,
                    msg.block_addr,
                    p.chipset(),
                    msg.src,
                    data,
                )))
            }
            MsgKind::MemWrite => {
                self.writes += 1;
                let data = msg.payload.clone().expect("MemWrite carries data");
                self.blocks.insert(msg.block_addr, data);
                Ok(None)
            }
            _ => Err(ProtocolError::UnexpectedMessage {
                node: p.chipset(),
                kind: msg.kind,
                block: msg.block_addr,
                state: "chipset".into(),
            }),
        }
    }

    /// Write raw bytes (initial program data); may span blocks.
    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8], block_size: usize) {
        let bs = block_size as u64;
        for (i, byte) in bytes.iter().enumerate() {
            let a = addr + i as u64;
            let blk = a & !(bs - 1);
            let line = self
                .blocks
                .entry(blk)
                .or_insert_with(|| vec![0; block_size]);
            line[(a - blk) as usize] = *byte;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ProtoParams {
        ProtoParams {
            block_size: 64,
            num_tiles: 4,
            mutation: None,
        }
    }

    fn home() -> HomeCtrl {
        HomeCtrl::new(
            0,
            CacheGeometry {
                sets: 4,
                ways: 2,
                block_size: 64,
            },
            4,
            8,
        )
    }

    fn req(kind: MsgKind, b: u64, src: NodeId) -> CoherenceMsg {
        CoherenceMsg::control(kind, b, src, 0)
    }

    fn mem_data(b: u64, v: u8) -> CoherenceMsg {
        CoherenceMsg::data(MsgKind::MemData, b, 4, 0, vec![v; 64])
    }

    fn kinds(fx: &Effects) -> Vec<(MsgKind, NodeId)> {
        fx.msgs.iter().map(|m| (m.kind, m.dst)).collect()
    }

    #[test]
    fn gets_on_uncached_reads_memory_then_grants_e() {
        let mut h = home();
        let p = params();
        let fx = h.handle(req(MsgKind::GetS, 0, 2), &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::MemRead, 4)]);
        let fx = h.handle(mem_data(0, 3), &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::DataE, 2)]);
        assert_eq!(h.entry(0).unwrap().state, DirState::Exclusive(2));
    }

    #[test]
    fn getx_on_shared_collects_inv_acks_at_home() {
        let mut h = home();
        let p = params();
        h.handle(req(MsgKind::GetS, 0, 1), &p).unwrap();
        h.handle(mem_data(0, 0), &p).unwrap();
        // make it Shared{1,2}: tile 2 GetS forwards to owner 1
        let fx = h.handle(req(MsgKind::GetS, 0, 2), &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::FwdGetS, 1)]);
        let mut od = CoherenceMsg::data(MsgKind::OwnerData, 0, 1, 0, vec![0; 64]);
        od.dirty = false;
        let fx = h.handle(od, &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::DataS, 2)]);
        let mut s = TileSet::single(1);
        s.insert(2);
        assert_eq!(h.entry(0).unwrap().state, DirState::Shared(s));

        let fx = h.handle(req(MsgKind::GetX, 0, 0), &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::Inv, 1), (MsgKind::Inv, 2)]);
        let fx = h.handle(req(MsgKind::InvAck, 0, 1), &p).unwrap();
        assert!(fx.msgs.is_empty());
        let fx = h.handle(req(MsgKind::InvAck, 0, 2), &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::DataM, 0)]);
        assert_eq!(h.entry(0).unwrap().state, DirState::Exclusive(0));
    }

    #[test]
    fn putm_from_owner_writes_memory() {
        let mut h = home();
        let p = params();
        h.handle(req(MsgKind::GetX, 0, 3), &p).unwrap();
        h.handle(mem_data(0, 0), &p).unwrap();
        let put = CoherenceMsg::data(MsgKind::PutM, 0, 3, 0, vec![9; 64]);
        let fx = h.handle(put, &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::MemWrite, 4), (MsgKind::PutAck, 3)]);
        assert_eq!(fx.msgs[0].payload.as_ref().unwrap()[0], 9);
        assert_eq!(h.entry(0).unwrap().state, DirState::Uncached);
    }

    #[test]
    fn requests_during_transient_are_replayed_in_order() {
        let mut h = home();
        let p = params();
        h.handle(req(MsgKind::GetS, 0, 1), &p).unwrap();
        let fx = h.handle(req(MsgKind::GetS, 0, 2), &p).unwrap();
        assert!(fx.msgs.is_empty());
        let fx = h.handle(mem_data(0, 0), &p).unwrap();
        // DataE to 1, then the replayed GetS forwards to new owner 1
        assert_eq!(kinds(&fx), vec![(MsgKind::DataE, 1), (MsgKind::FwdGetS, 1)]);
    }

    fn one_way_home() -> HomeCtrl {
        HomeCtrl::new(
            0,
            CacheGeometry {
                sets: 1,
                ways: 1,
                block_size: 64,
            },
            1,
            4,
        )
    }

    #[test]
    fn evict_shared_invalidates_all_sharers() {
        let p = ProtoParams {
            block_size: 64,
            num_tiles: 1,
            mutation: None,
        };
        let mut h = one_way_home();
        h.handle(req(MsgKind::GetS, 0, 0), &p).unwrap();
        h.handle(mem_data(0, 0), &p).unwrap();
        // force Shared{0,1} directly
        let mut s = TileSet::single(0);
        s.insert(1);
        h.l2.probe_mut(0).unwrap().state.state = DirState::Shared(s);
        let fx = h.handle(req(MsgKind::GetS, 64, 0), &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::Inv, 0), (MsgKind::Inv, 1)]);
        h.handle(req(MsgKind::InvAck, 0, 0), &p).unwrap();
        let fx = h.handle(req(MsgKind::InvAck, 0, 1), &p).unwrap();
        assert!(h.entry(0).is_none());
        assert_eq!(kinds(&fx), vec![(MsgKind::MemRead, 1)]);
    }

    #[test]
    fn evict_uncached_is_silent() {
        let p = ProtoParams {
            block_size: 64,
            num_tiles: 1,
            mutation: None,
        };
        let mut h = one_way_home();
        h.handle(req(MsgKind::GetX, 0, 0), &p).unwrap();
        h.handle(mem_data(0, 0), &p).unwrap();
        h.handle(CoherenceMsg::data(MsgKind::PutM, 0, 0, 0, vec![1; 64]), &p)
            .unwrap();
        let fx = h.handle(req(MsgKind::GetS, 64, 0), &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::MemRead, 1)]);
    }

    #[test]
    fn evict_dirty_owner_writes_back() {
        let p = ProtoParams {
            block_size: 64,
            num_tiles: 1,
            mutation: None,
        };
        let mut h = one_way_home();
        h.handle(req(MsgKind::GetX, 0, 0), &p).unwrap();
        h.handle(mem_data(0, 0), &p).unwrap();
        let fx = h.handle(req(MsgKind::GetS, 64, 0), &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::Inv, 0)]);
        let mut od = CoherenceMsg::data(MsgKind::OwnerData, 0, 0, 0, vec![7; 64]);
        od.dirty = true;
        let fx = h.handle(od, &p).unwrap();
        assert_eq!(kinds(&fx), vec![(MsgKind::MemWrite, 1), (MsgKind::MemRead, 1)]);
    }

    #[test]
    fn memory_read_write() {
        let p = params();
        let mut m = MemCtrl::default();
        m.write_bytes(60, &[1, 2, 3, 4, 5, 6], 64);
        let w = CoherenceMsg::data(MsgKind::MemWrite, 128, 0, 4, vec![8; 64]);
        assert!(m.handle(&w, &p).unwrap().is_none());
        let r = m
            .handle(&CoherenceMsg::control(MsgKind::MemRead, 64, 1, 4), &p)
            .unwrap()
            .unwrap();
        assert_eq!(r.kind, MsgKind::MemData);
        assert_eq!(r.dst, 1);
        assert_eq!(&r.payload.unwrap()[..2], &[5, 6]);
        assert_eq!(m.read_block(128, 64), vec![8; 64]);
    }
}
