//! Set-associative cache storage with true-LRU replacement and an MSHR file.
//!
//! [`SetAssocCache`] is generic over the per-line state so the same array
//! backs the L1I/L1D (`Mesi` restricted to S/I), the L1.5 (full MESI) and the
//! L2 slices (directory entries). [`L1Cache`] layers the non-blocking
//! lookup/fill/invalidate contract on top for the private L1 levels.

use crate::config::CacheGeometry;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Mesi {
    M,
    E,
    S,
    I,
}

impl Mesi {
    pub fn is_valid(self) -> bool {
        self != Mesi::I
    }
    pub fn is_owner(self) -> bool {
        matches!(self, Mesi::M | Mesi::E)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("fill for block {0:#x} without an outstanding MSHR")]
    FillWithoutMshr(u64),
    #[error("no free way for block {0:#x}")]
    SetFull(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MshrKind {
    LoadS,
    StoreX,
    Ifetch,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheLine<S> {
    pub block_addr: u64,
    pub state: S,
    pub data: Vec<u8>,
    pub lru_stamp: u64,
}

/// Per-cache counters. `hits + misses == accesses`; `merged` is the subset of
/// misses that attached to an existing MSHR.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub merged: u64,
    pub blocked: u64,
    pub writebacks: u64,
    pub evictions: u64,
    pub invalidations: u64,
}

impl CacheStats {
    pub fn miss_rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.misses as f64 / self.accesses as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SetAssocCache<S> {
    geom: CacheGeometry,
    /// Blocks homed here are spaced `index_stride` blocks apart (L2 slices).
    index_stride: u64,
    sets: Vec<Vec<CacheLine<S>>>,
    lru_clock: u64,
}

impl<S: Clone> SetAssocCache<S> {
    pub fn new(geom: CacheGeometry) -> Self {
        Self::with_stride(geom, 1)
    }

    pub fn with_stride(geom: CacheGeometry, index_stride: u64) -> Self {
        assert!(geom.sets > 0 && geom.ways > 0 && index_stride > 0);
        SetAssocCache {
            geom,
            index_stride,
            sets: vec![Vec::with_capacity(geom.ways); geom.sets],
            lru_clock: 0,
        }
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geom
    }

    pub fn set_index(&self, block_addr: u64) -> usize {
        let blk = block_addr / self.geom.block_size as u64;
        ((blk / self.index_stride) % self.geom.sets as u64) as usize
    }

    fn position(&self, block_addr: u64) -> Option<(usize, usize)> {
        let s = self.set_index(block_addr);
        self.sets[s]
            .iter()
            .position(|l| l.block_addr == block_addr)
            .map(|w| (s, w))
    }

    pub fn probe(&self, block_addr: u64) -> Option<&CacheLine<S>> {
        self.position(block_addr).map(|(s, w)| &self.sets[s][w])
    }

    pub fn probe_mut(&mut self, block_addr: u64) -> Option<&mut CacheLine<S>> {
        self.position(block_addr)
            .map(move |(s, w)| &mut self.sets[s][w])
    }

    /// Mark a line most-recently used.
    pub fn touch(&mut self, block_addr: u64) {
        self.lru_clock += 1;
        let stamp = self.lru_clock;
        if let Some(line) = self.probe_mut(block_addr) {
            line.lru_stamp = stamp;
        }
    }

    pub fn occupancy(&self, set: usize) -> usize {
        self.sets[set].len()
    }

    pub fn ways(&self) -> usize {
        self.geom.ways
    }

    pub fn has_free_way(&self, block_addr: u64) -> bool {
        self.sets[self.set_index(block_addr)].len() < self.geom.ways
    }

    /// Least-recently-used line of the block's set among those `eligible`.
    pub fn lru_victim(
        &self,
        block_addr: u64,
        eligible: impl Fn(&CacheLine<S>) -> bool,
    ) -> Option<u64> {
        self.sets[self.set_index(block_addr)]
            .iter()
            .filter(|l| eligible(l))
            .min_by_key(|l| l.lru_stamp)
            .map(|l| l.block_addr)
    }

    /// Insert into a free way; the caller evicts first when the set is full.
    pub fn insert(&mut self, block_addr: u64, state: S, data: Vec<u8>) -> Result<(), CacheError> {
        debug_assert_eq!(data.len(), self.geom.block_size);
        debug_assert!(self.probe(block_addr).is_none(), "duplicate line");
        let s = self.set_index(block_addr);
        if self.sets[s].len() >= self.geom.ways {
            return Err(CacheError::SetFull(block_addr));
        }
        self.lru_clock += 1;
        self.sets[s].push(CacheLine {
            block_addr,
            state,
            data,
            lru_stamp: self.lru_clock,
        });
        Ok(())
    }

    pub fn remove(&mut self, block_addr: u64) -> Option<CacheLine<S>> {
        let (s, w) = self.position(block_addr)?;
        Some(self.sets[s].swap_remove(w))
    }

    pub fn lines(&self) -> impl Iterator<Item = &CacheLine<S>> {
        self.sets.iter().flatten()
    }

    pub fn lines_mut(&mut self) -> impl Iterator<Item = &mut CacheLine<S>> {
        self.sets.iter_mut().flatten()
    }

    /// Rewrite LRU stamps as per-set ranks and keep each set sorted by block
    /// address, so two caches holding the same lines in the same recency order
    /// compare equal. Used by the model checker for state deduplication.
    pub fn canonicalize(&mut self) {
        for set in &mut self.sets {
            let mut order: Vec<usize> = (0..set.len()).collect();
            order.sort_by_key(|&i| set[i].lru_stamp);
            for (rank, i) in order.into_iter().enumerate() {
                set[i].lru_stamp = rank as u64 + 1;
            }
            set.sort_by_key(|l| l.block_addr);
        }
        self.lru_clock = self.geom.ways as u64;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MshrEntry<W> {
    pub block_addr: u64,
    pub kind: MshrKind,
    pub waiters: VecDeque<W>,
    pub issued_cycle: u64,
    /// Set when the block was written or invalidated locally while the miss
    /// was outstanding: the fill satisfies waiters but must not install.
    pub no_install: bool,
}

/// Outstanding-miss table keyed by block address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MshrFile<W> {
    capacity: usize,
    entries: BTreeMap<u64, MshrEntry<W>>,
}

impl<W> MshrFile<W> {
    pub fn new(capacity: usize) -> Self {
        MshrFile {
            capacity,
            entries: BTreeMap::new(),
        }
    }
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }
    pub fn free(&self) -> usize {
        self.capacity - self.entries.len()
    }
    pub fn get(&self, block_addr: u64) -> Option<&MshrEntry<W>> {
        self.entries.get(&block_addr)
    }
    pub fn get_mut(&mut self, block_addr: u64) -> Option<&mut MshrEntry<W>> {
        self.entries.get_mut(&block_addr)
    }
    pub fn contains(&self, block_addr: u64) -> bool {
        self.entries.contains_key(&block_addr)
    }

    /// Allocate a new entry. Returns false when the file is full.
    pub fn allocate(&mut self, block_addr: u64, kind: MshrKind, waiter: W, now: u64) -> bool {
        debug_assert!(!self.contains(block_addr), "at most one MSHR per block");
        if self.is_full() {
            return false;
        }
        self.entries.insert(
            block_addr,
            MshrEntry {
                block_addr,
                kind,
                waiters: VecDeque::from([waiter]),
                issued_cycle: now,
                no_install: false,
            },
        );
        true
    }

    pub fn remove(&mut self, block_addr: u64) -> Option<MshrEntry<W>> {
        self.entries.remove(&block_addr)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MshrEntry<W>> {
        self.entries.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut MshrEntry<W>> {
        self.entries.values_mut()
    }
}

/// Result of [`L1Cache::lookup`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lookup {
    Hit(Vec<u8>),
    Miss,
    MissMerged,
    Blocked,
}

/// Line displaced by a fill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Victim {
    pub block_addr: u64,
    pub state: Mesi,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FillResult<W> {
    /// Waiters in arrival order.
    pub waiters: Vec<W>,
    pub victim: Option<Victim>,
    /// Present when the victim was dirty and must be written back.
    pub writeback: Option<Victim>,
    pub issued_cycle: u64,
    pub installed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvResult {
    pub had_line: bool,
    pub was_dirty: bool,
    pub data: Option<Vec<u8>>,
}

/// A private non-blocking cache level: array + MSHRs + statistics.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct L1Cache<W> {
    pub array: SetAssocCache<Mesi>,
    pub mshrs: MshrFile<W>,
    pub stats: CacheStats,
}

impl<W> L1Cache<W> {
    pub fn new(geom: CacheGeometry, mshrs: usize) -> Self {
        L1Cache {
            array: SetAssocCache::new(geom),
            mshrs: MshrFile::new(mshrs),
            stats: CacheStats::default(),
        }
    }

    pub fn block_addr(&self, addr: u64) -> u64 {
        addr & !(self.array.geometry().block_size as u64 - 1)
    }

    /// Look up `addr`. A miss allocates an MSHR holding `waiter` (the caller
    /// then emits the next-level request); a secondary miss merges into the
    /// existing MSHR; MSHR exhaustion reports `Blocked` and nothing changes.
    pub fn lookup(&mut self, addr: u64, kind: MshrKind, waiter: W, now: u64) -> Lookup {
        let block = self.block_addr(addr);
        if let Some(entry) = self.mshrs.get_mut(block) {
            entry.waiters.push_back(waiter);
            self.stats.accesses += 1;
            self.stats.misses += 1;
            self.stats.merged += 1;
            return Lookup::MissMerged;
        }
        if let Some(line) = self.array.probe(block) {
            if line.state.is_valid() {
                let data = line.data.clone();
                self.array.touch(block);
                self.stats.accesses += 1;
                self.stats.hits += 1;
                return Lookup::Hit(data);
            }
        }
        if !self.mshrs.allocate(block, kind, waiter, now) {
            self.stats.blocked += 1;
            return Lookup::Blocked;
        }
        self.stats.accesses += 1;
        self.stats.misses += 1;
        Lookup::Miss
    }

    /// Complete the miss for `block_addr`: choose an LRU victim if needed,
    /// install the line in `grant` state and hand back every waiter.
    pub fn fill(
        &mut self,
        block_addr: u64,
        data: Vec<u8>,
        grant: Mesi,
    ) -> Result<FillResult<W>, CacheError> {
        let entry = self
            .mshrs
            .remove(block_addr)
            .ok_or(CacheError::FillWithoutMshr(block_addr))?;
        let mut result = FillResult {
            waiters: entry.waiters.into_iter().collect(),
            victim: None,
            writeback: None,
            issued_cycle: entry.issued_cycle,
            installed: false,
        };
        if entry.no_install || !grant.is_valid() {
            return Ok(result);
        }
        if let Some(line) = self.array.probe_mut(block_addr) {
            line.data = data;
            line.state = grant;
            self.array.touch(block_addr);
            result.installed = true;
            return Ok(result);
        }
        if !self.array.has_free_way(block_addr) {
            let vb = self
                .array
                .lru_victim(block_addr, |_| true)
                .expect("full set has a victim");
            let line = self.array.remove(vb).expect("victim present");
            self.stats.evictions += 1;
            let v = Victim {
                block_addr: line.block_addr,
                state: line.state,
                data: line.data,
            };
            if v.state == Mesi::M {
                self.stats.writebacks += 1;
                result.writeback = Some(v.clone());
            }
            result.victim = Some(v);
        }
        self.array.insert(block_addr, grant, data)?;
        result.installed = true;
        Ok(result)
    }

    pub fn invalidate(&mut self, block_addr: u64) -> InvResult {
        if let Some(entry) = self.mshrs.get_mut(block_addr) {
            entry.no_install = true;
        }
        match self.array.remove(block_addr) {
            Some(line) => {
                self.stats.invalidations += 1;
                let dirty = line.state == Mesi::M;
                InvResult {
                    had_line: true,
                    was_dirty: dirty,
                    data: dirty.then_some(line.data),
                }
            }
            None => InvResult {
                had_line: false,
                was_dirty: false,
                data: None,
            },
        }
    }

    /// Force a state on a resident line (used by tests and by L1.5 demotion).
    pub fn set_state(&mut self, block_addr: u64, state: Mesi) -> bool {
        match self.array.probe_mut(block_addr) {
            Some(l) => {
                l.state = state;
                true
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(sets: usize, ways: usize) -> CacheGeometry {
        CacheGeometry {
            sets,
            ways,
            block_size: 64,
        }
    }

    #[test]
    fn cold_miss_then_merge() {
        let mut c: L1Cache<u32> = L1Cache::new(geom(4, 2), 4);
        assert_eq!(c.lookup(0x1000, MshrKind::LoadS, 1, 0), Lookup::Miss);
        assert_eq!(c.lookup(0x1008, MshrKind::LoadS, 2, 1), Lookup::MissMerged);
        assert_eq!(c.mshrs.len(), 1);
    }

    #[test]
    fn sixty_four_mshrs_then_blocked() {
        let mut c: L1Cache<u32> = L1Cache::new(
            CacheGeometry {
                sets: 64,
                ways: 4,
                block_size: 64,
            },
            64,
        );
        for i in 0..64u64 {
            assert_eq!(c.lookup(i * 64, MshrKind::LoadS, 0, 0), Lookup::Miss);
        }
        assert_eq!(c.lookup(64 * 64, MshrKind::LoadS, 0, 0), Lookup::Blocked);
        assert_eq!(c.stats.blocked, 1);
        assert_eq!(c.mshrs.len(), 64);
        // a merge still succeeds when full
        assert_eq!(c.lookup(8, MshrKind::LoadS, 0, 0), Lookup::MissMerged);
    }

    #[test]
    fn fill_wakes_all_waiters_in_order() {
        let mut c: L1Cache<u32> = L1Cache::new(geom(4, 2), 4);
        c.lookup(0x40, MshrKind::LoadS, 7, 0);
        c.lookup(0x48, MshrKind::LoadS, 8, 0);
        c.lookup(0x50, MshrKind::LoadS, 9, 0);
        let r = c.fill(0x40, vec![5; 64], Mesi::S).unwrap();
        assert_eq!(r.waiters, vec![7, 8, 9]);
        assert!(r.installed);
        assert_eq!(c.lookup(0x44, MshrKind::LoadS, 0, 1), Lookup::Hit(vec![5; 64]));
    }

    #[test]
    fn fill_without_mshr_is_an_error() {
        let mut c: L1Cache<u32> = L1Cache::new(geom(4, 2), 4);
        assert_eq!(
            c.fill(0x40, vec![0; 64], Mesi::S),
            Err(CacheError::FillWithoutMshr(0x40))
        );
    }

    #[test]
    fn dirty_lru_victim_emits_one_writeback() {
        // one set, two ways
        let mut c: L1Cache<u32> = L1Cache::new(geom(1, 2), 4);
        for (i, st) in [(0u64, Mesi::M), (1, Mesi::S)] {
            c.lookup(i * 64, MshrKind::LoadS, 0, 0);
            c.fill(i * 64, vec![i as u8; 64], st).unwrap();
        }
        // touch block 1 so block 0 (M) is LRU
        c.lookup(64, MshrKind::LoadS, 0, 0);
        c.lookup(128, MshrKind::LoadS, 0, 0);
        let r = c.fill(128, vec![2; 64], Mesi::S).unwrap();
        let wb = r.writeback.expect("writeback");
        assert_eq!(wb.block_addr, 0);
        assert_eq!(wb.data, vec![0; 64]);
        assert_eq!(c.stats.writebacks, 1);
    }

    #[test]
    fn invalidate_cases() {
        let mut c: L1Cache<u32> = L1Cache::new(geom(4, 2), 4);
        assert!(!c.invalidate(0).had_line);
        c.lookup(0, MshrKind::LoadS, 0, 0);
        c.fill(0, vec![1; 64], Mesi::S).unwrap();
        let r = c.invalidate(0);
        assert!(r.had_line && !r.was_dirty && r.data.is_none());
        c.lookup(0, MshrKind::StoreX, 0, 0);
        c.fill(0, vec![3; 64], Mesi::M).unwrap();
        let r = c.invalidate(0);
        assert!(r.had_line && r.was_dirty);
        assert_eq!(r.data, Some(vec![3; 64]));
    }

    #[test]
    fn invalidate_during_miss_suppresses_install() {
        let mut c: L1Cache<u32> = L1Cache::new(geom(4, 2), 4);
        c.lookup(0, MshrKind::LoadS, 1, 0);
        c.invalidate(0);
        let r = c.fill(0, vec![1; 64], Mesi::S).unwrap();
        assert_eq!(r.waiters, vec![1]);
        assert!(!r.installed);
        assert!(c.array.probe(0).is_none());
    }

    proptest! {
        #[test]
        fn counters_stay_consistent(addrs in prop::collection::vec((0u64..32, any::<bool>()), 1..200)) {
            let mut c: L1Cache<u32> = L1Cache::new(geom(2, 2), 3);
            let mut looked = 0u64;
            for (blk, fill) in addrs {
                let outcome = c.lookup(blk * 64, MshrKind::LoadS, 0, 0);
                if outcome != Lookup::Blocked { looked += 1; }
                prop_assert!(c.mshrs.len() <= 3);
                if fill {
                    let pending: Vec<u64> = c.mshrs.iter().map(|e| e.block_addr).collect();
                    for b in pending { c.fill(b, vec![0; 64], Mesi::S).unwrap(); }
                }
            }
            prop_assert_eq!(c.stats.accesses, looked);
            prop_assert_eq!(c.stats.hits + c.stats.misses, c.stats.accesses);
            prop_assert!(c.stats.merged <= c.stats.misses);
        }

        #[test]
        fn lru_protects_a_hot_line(others in prop::collection::vec(1u64..50, 1..100)) {
            // 4 ways, one set: touching the hot block every 2 accesses (< assoc) keeps it resident
            let mut c: L1Cache<u32> = L1Cache::new(geom(1, 4), 8);
            let access = |c: &mut L1Cache<u32>, b: u64| {
                if let Lookup::Miss = c.lookup(b * 64, MshrKind::LoadS, 0, 0) {
                    c.fill(b * 64, vec![0; 64], Mesi::S).unwrap();
                }
            };
            access(&mut c, 0);
            for b in others {
                access(&mut c, b);
                access(&mut c, 0);
                prop_assert!(c.array.probe(0).is_some());
            }
        }
    }
}
