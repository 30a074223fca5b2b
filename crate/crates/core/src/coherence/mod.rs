//! Directory-based MESI protocol.
//!
//! Each tile runs an [`L15Ctrl`] (the private coherence endpoint) and a
//! [`HomeCtrl`] (its slice of the shared inclusive L2 plus directory). The
//! chipset node runs a [`MemCtrl`]. All three are untimed state machines: a
//! handler consumes one message or request and returns [`Effects`] (messages
//! to send, completions for the local core, L1 invalidations). The timed
//! simulator and the exhaustive model checker drive the same code.
//!
//! Data flow is home-centric: owners return data to the home, which replies
//! to the requester, and invalidation acks are collected at the home.
//! Three message classes ride three physical networks:
//!
//! | net  | kinds |
//! |------|-------|
//! | NoC1 | GetS GetX Upgrade PutS PutE PutM |
//! | NoC2 | FwdGetS FwdGetX Inv DataS DataE DataM AckM PutAck MemRead MemWrite |
//! | NoC3 | InvAck OwnerData MemData |

mod home;
mod l15;

pub use home::{DirEntry, DirState, HomeCtrl, HomeStats, MemCtrl, Transient};
pub use l15::{EvictEntry, L15Ctrl, L15Op, L15Request, ReqOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum MsgKind {
    GetS,
    GetX,
    Upgrade,
    FwdGetS,
    FwdGetX,
    Inv,
    InvAck,
    /// Owner's block returned to the home (answers FwdGetS/FwdGetX, or Inv
    /// during an L2 eviction). `dirty` tells the home whether memory is stale.
    OwnerData,
    DataS,
    DataE,
    DataM,
    AckM,
    PutS,
    PutE,
    PutM,
    PutAck,
    MemRead,
    MemWrite,
    MemData,
}

impl MsgKind {
    pub const ALL: [MsgKind; 19] = [
        MsgKind::GetS,
        MsgKind::GetX,
        MsgKind::Upgrade,
        MsgKind::FwdGetS,
        MsgKind::FwdGetX,
        MsgKind::Inv,
        MsgKind::InvAck,
        MsgKind::OwnerData,
        MsgKind::DataS,
        MsgKind::DataE,
        MsgKind::DataM,
        MsgKind::AckM,
        MsgKind::PutS,
        MsgKind::PutE,
        MsgKind::PutM,
        MsgKind::PutAck,
        MsgKind::MemRead,
        MsgKind::MemWrite,
        MsgKind::MemData,
    ];

    pub fn carries_data(self) -> bool {
        matches!(
            self,
            MsgKind::DataS
                | MsgKind::DataE
                | MsgKind::DataM
                | MsgKind::PutM
                | MsgKind::OwnerData
                | MsgKind::MemData
                | MsgKind::MemWrite
        )
    }

    pub fn net(self) -> Net {
        use MsgKind::*;
        match self {
            GetS | GetX | Upgrade | PutS | PutE | PutM => Net::Noc1,
            FwdGetS | FwdGetX | Inv | DataS | DataE | DataM | AckM | PutAck | MemRead
            | MemWrite => Net::Noc2,
            InvAck | OwnerData | MemData => Net::Noc3,
        }
    }

    pub fn code(self) -> u8 {
        MsgKind::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<MsgKind> {
        MsgKind::ALL.get(code as usize).copied()
    }

    pub fn is_request(self) -> bool {
        matches!(self, MsgKind::GetS | MsgKind::GetX | MsgKind::Upgrade)
    }

    pub fn is_put(self) -> bool {
        matches!(self, MsgKind::PutS | MsgKind::PutE | MsgKind::PutM)
    }
}

impl std::str::FromStr for MsgKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        MsgKind::ALL
            .iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| format!("unknown message kind '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Net {
    Noc1,
    Noc2,
    Noc3,
}

impl Net {
    pub const ALL: [Net; 3] = [Net::Noc1, Net::Noc2, Net::Noc3];
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoherenceMsg {
    pub kind: MsgKind,
    pub block_addr: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub dirty: bool,
    pub payload: Option<Vec<u8>>,
}

impl CoherenceMsg {
    pub fn control(kind: MsgKind, block_addr: u64, src: NodeId, dst: NodeId) -> Self {
        debug_assert!(!kind.carries_data());
        CoherenceMsg {
            kind,
            block_addr,
            src,
            dst,
            dirty: false,
            payload: None,
        }
    }

    pub fn data(kind: MsgKind, block_addr: u64, src: NodeId, dst: NodeId, data: Vec<u8>) -> Self {
        debug_assert!(kind.carries_data());
        CoherenceMsg {
            kind,
            block_addr,
            src,
            dst,
            dirty: false,
            payload: Some(data),
        }
    }

    pub fn net(&self) -> Net {
        self.kind.net()
    }

    /// Payload length matches the kind: a full block or nothing.
    pub fn well_formed(&self, block_size: usize) -> bool {
        match (&self.payload, self.kind.carries_data()) {
            (Some(p), true) => p.len() == block_size,
            (None, false) => true,
            _ => false,
        }
    }
}

/// Set of tiles as a bit mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileSet(pub u64);

impl TileSet {
    pub fn single(t: NodeId) -> Self {
        TileSet(1 << t)
    }
    pub fn contains(self, t: NodeId) -> bool {
        self.0 & (1 << t) != 0
    }
    pub fn insert(&mut self, t: NodeId) {
        self.0 |= 1 << t;
    }
    pub fn remove(&mut self, t: NodeId) {
        self.0 &= !(1 << t);
    }
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
    pub fn len(self) -> u32 {
        self.0.count_ones()
    }
    pub fn iter(self) -> impl Iterator<Item = NodeId> {
        (0..64).filter(move |t| self.0 & (1u64 << t) != 0)
    }
}

/// Deliberate protocol bugs used to show the model checker catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mutation {
    /// Home grants exclusivity as soon as Invs are sent instead of waiting
    /// for every InvAck.
    SkipInvAckCollection,
    /// Owner answers FwdGetS with data but keeps its M/E copy.
    NoDemoteOnFwdGetS,
    /// L1.5 writes a Shared line in place without an Upgrade.
    SilentUpgradeFromS,
}

impl Mutation {
    pub const ALL: [Mutation; 3] = [
        Mutation::SkipInvAckCollection,
        Mutation::NoDemoteOnFwdGetS,
        Mutation::SilentUpgradeFromS,
    ];
}

impl std::str::FromStr for Mutation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "skip-inv-ack" | "SkipInvAckCollection" => Ok(Mutation::SkipInvAckCollection),
            "no-demote" | "NoDemoteOnFwdGetS" => Ok(Mutation::NoDemoteOnFwdGetS),
            "silent-upgrade" | "SilentUpgradeFromS" => Ok(Mutation::SilentUpgradeFromS),
            _ => Err(format!("unknown mutation '{s}'")),
        }
    }
}

/// Parameters every controller needs but that are not per-node state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtoParams {
    pub block_size: usize,
    pub num_tiles: u32,
    pub mutation: Option<Mutation>,
}

impl ProtoParams {
    pub fn chipset(&self) -> NodeId {
        self.num_tiles
    }
    pub fn home(&self, block_addr: u64) -> NodeId {
        crate::config::home_of(block_addr, self.block_size as u64, self.num_tiles)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolError {
    #[error("node {node}: unexpected {kind:?} for block {block:#x} in state {state}")]
    UnexpectedMessage {
        node: NodeId,
        kind: MsgKind,
        block: u64,
        state: String,
    },
}

/// Something the local core asked for has happened.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Completion {
    /// Snapshot of a coherent copy of the block.
    BlockRead {
        token: u64,
        block_addr: u64,
        data: Vec<u8>,
    },
    StorePerformed {
        token: u64,
        block_addr: u64,
        offset: usize,
        bytes: Vec<u8>,
    },
    AmoDone {
        token: u64,
        block_addr: u64,
        offset: usize,
        old: Vec<u8>,
        new: Vec<u8>,
    },
}

impl Completion {
    pub fn token(&self) -> u64 {
        match self {
            Completion::BlockRead { token, .. }
            | Completion::StorePerformed { token, .. }
            | Completion::AmoDone { token, .. } => *token,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effects {
    pub msgs: Vec<CoherenceMsg>,
    pub done: Vec<Completion>,
    /// Blocks the tile's L1 copies must drop (inclusion).
    pub l1_inval: Vec<u64>,
}

impl Effects {
    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty() && self.done.is_empty() && self.l1_inval.is_empty()
    }
}

/// Single-writer/multiple-reader over every L1.5: per block at most one
/// tile in M/E, and if one then no tile in S.
pub fn check_swmr(l15s: &[L15Ctrl]) -> Result<(), String> {
    use std::collections::BTreeMap;
    let mut holders: BTreeMap<u64, (Vec<NodeId>, Vec<NodeId>)> = BTreeMap::new();
    for c in l15s {
        for line in c.array.lines() {
            let e = holders.entry(line.block_addr).or_default();
            match line.state {
                crate::cache::Mesi::M | crate::cache::Mesi::E => e.0.push(c.tile),
                crate::cache::Mesi::S => e.1.push(c.tile),
                crate::cache::Mesi::I => {}
            }
        }
    }
    for (block, (owners, sharers)) in holders {
        if owners.len() > 1 || (owners.len() == 1 && !sharers.is_empty()) {
            return Err(format!(
                "SWMR violated for block {block:#x}: owners {owners:?}, sharers {sharers:?}"
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn net_mapping_is_total_and_matches_classes() {
        for k in MsgKind::ALL {
            let n = k.net();
            if k.is_request() || k.is_put() {
                assert_eq!(n, Net::Noc1, "{k:?}");
            }
            assert_eq!(MsgKind::from_code(k.code()), Some(k));
        }
        assert_eq!(MsgKind::InvAck.net(), Net::Noc3);
        assert_eq!(MsgKind::MemData.net(), Net::Noc3);
        assert_eq!(MsgKind::OwnerData.net(), Net::Noc3);
        assert_eq!(MsgKind::Inv.net(), Net::Noc2);
        assert_eq!(MsgKind::MemWrite.net(), Net::Noc2);
    }

    #[test]
    fn tileset_ops() {
        let mut s = TileSet::default();
        s.insert(1);
        s.insert(3);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![1, 3]);
        s.remove(1);
        assert!(s.contains(3) && !s.contains(1));
        assert_eq!(s.len(), 1);
    }
}
