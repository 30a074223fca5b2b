//! In-order single-issue RV64 core with a small RVV subset.
//!
//! Loads are non-blocking: a missing load marks its destination pending and
//! issue continues until an instruction reads (or overwrites) that register.
//! Stores are write-through and never block issue except at sync points
//! (AMO, fence, halt), which wait for every outstanding access.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::config::VsetvlMode;

pub const TEXT_BASE: u64 = 0x8000_0000;
pub const MUL_LATENCY: u64 = 3;
pub const VSETVL_DRAIN_PENALTY: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Slt,
    Sltu,
    Sll,
    Srl,
    Sra,
    Mul,
}

impl AluOp {
    pub fn eval(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Slt => ((a as i64) < (b as i64)) as u64,
            AluOp::Sltu => (a < b) as u64,
            AluOp::Sll => a << (b & 63),
            AluOp::Srl => a >> (b & 63),
            AluOp::Sra => ((a as i64) >> (b & 63)) as u64,
            AluOp::Mul => a.wrapping_mul(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchCond {
    Eq,
    Ne,
    Lt,
    Ge,
    Ltu,
    Geu,
}

impl BranchCond {
    pub fn eval(self, a: u64, b: u64) -> bool {
        match self {
            BranchCond::Eq => a == b,
            BranchCond::Ne => a != b,
            BranchCond::Lt => (a as i64) < (b as i64),
            BranchCond::Ge => (a as i64) >= (b as i64),
            BranchCond::Ltu => a < b,
            BranchCond::Geu => a >= b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Counter {
    Cycle,
    Instret,
}

/// Decoded instruction. Branch and jump targets are instruction indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    Alu { op: AluOp, rd: u8, rs1: u8, rs2: u8 },
    AluImm { op: AluOp, rd: u8, rs1: u8, imm: i64 },
    Lui { rd: u8, imm: i64 },
    Auipc { rd: u8, imm: i64 },
    Load { size: u8, signed: bool, rd: u8, rs1: u8, offset: i64 },
    Store { size: u8, rs1: u8, rs2: u8, offset: i64 },
    Branch { cond: BranchCond, rs1: u8, rs2: u8, target: usize },
    Jal { rd: u8, target: usize },
    Jalr { rd: u8, rs1: u8, offset: i64 },
    AmoAdd { size: u8, rd: u8, rs1: u8, rs2: u8 },
    Fence,
    Halt,
    ReadCounter { rd: u8, counter: Counter },
    /// `lmul` is the requested grouping; anything but 1 sets vill.
    Vsetvli { rd: u8, rs1: u8, sew: u32, lmul: u32 },
    Vle8 { vd: u8, rs1: u8 },
    Vse8 { vs3: u8, rs1: u8 },
    VaddVV { vd: u8, vs2: u8, vs1: u8 },
    VaddVX { vd: u8, vs2: u8, rs1: u8 },
}

impl Instr {
    pub fn is_vector(&self) -> bool {
        matches!(
            self,
            Instr::Vsetvli { .. }
                | Instr::Vle8 { .. }
                | Instr::Vse8 { .. }
                | Instr::VaddVV { .. }
                | Instr::VaddVX { .. }
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Trap {
    #[error("invalid instruction at pc {pc:#x}")]
    InvalidInstruction { pc: u64 },
    #[error("misaligned {size}-byte access to {addr:#x} at pc {pc:#x}")]
    MisalignedAccess { pc: u64, addr: u64, size: u8 },
    #[error("vector instruction under illegal vtype at pc {pc:#x}")]
    IllegalVtype { pc: u64 },
    #[error("access to {addr:#x} outside memory at pc {pc:#x}")]
    AddressOutOfBounds { pc: u64, addr: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerfCounters {
    pub cycles: u64,
    pub instructions_retired: u64,
    pub scalar_loads: u64,
    pub scalar_stores: u64,
    pub vector_instructions: u64,
    pub l1d_misses: u64,
    pub stall_cycles_raw_hazard: u64,
    pub stall_cycles_mshr_full: u64,
    pub stall_cycles_vsetvl: u64,
    pub stall_cycles_fetch: u64,
    /// Cycles spent draining before/after AMO, fence and halt.
    pub stall_cycles_sync: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vtype {
    pub sew: u32,
    pub vill: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemOp {
    Load { size: usize },
    Store { bytes: Vec<u8> },
    AmoAdd { size: usize, operand: u64 },
}

/// One access toward the L1D. Never crosses a block boundary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemReq {
    pub token: u64,
    pub addr: u64,
    pub op: MemOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PortReply {
    /// Done; result bytes (empty for stores) usable from `ready_at`.
    Hit { data: Vec<u8>, ready_at: u64 },
    /// Accepted; [`CoreState::complete`] will be called with the token.
    Pending,
}

/// What the core sees of the memory system.
pub trait MemoryPort {
    /// Cycle at which the instruction at `pc` is available.
    fn fetch(&mut self, pc: u64, now: u64) -> u64;
    /// How many accesses the port can take this cycle.
    fn capacity(&self) -> usize;
    fn access(&mut self, req: MemReq, now: u64) -> PortReply;
    fn block_size(&self) -> usize;
    fn memory_size(&self) -> u64;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
enum Outstanding {
    Load { rd: u8, size: u8, signed: bool },
    VecChunk { vd: u8, elem: usize },
    Store,
    Amo { rd: u8, size: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoreState {
    pub id: u32,
    pub pc: u64,
    pub xregs: [u64; 32],
    pub vregs: Vec<Vec<u8>>,
    pub vl: u32,
    pub vtype: Vtype,
    pub halted: bool,
    pub trap: Option<Trap>,
    pub counters: PerfCounters,
    vlen_bits: u32,
    mode: VsetvlMode,
    x_ready: [u64; 32],
    x_pending: [u32; 32],
    v_ready: Vec<u64>,
    v_pending: Vec<u32>,
    outstanding: BTreeMap<u64, Outstanding>,
    next_token: u64,
    /// Issue is blocked until this cycle (vsetvl drain, fetch).
    busy_until: u64,
    busy_reason: Stall,
    fetched_pc: Option<u64>,
    /// An AMO just issued; the next instruction waits for it.
    sync_after: bool,
    /// Blocks already issued by a partly issued vector access.
    #[serde(default)]
    vec_issued: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
enum Stall {
    Fetch,
    Vsetvl,
}

fn reg_write(x: &mut [u64; 32], rd: u8, v: u64) {
    if rd != 0 {
        x[rd as usize] = v;
    }
}

fn extend(bytes: &[u8], signed: bool) -> u64 {
    let mut buf = [0u8; 8];
    buf[..bytes.len()].copy_from_slice(bytes);
    let v = u64::from_le_bytes(buf);
    let bits = bytes.len() * 8;
    if signed && bits < 64 {
        let sh = 64 - bits;
        (((v << sh) as i64) >> sh) as u64
    } else {
        v
    }
}

pub fn pc_of(index: usize) -> u64 {
    TEXT_BASE + 4 * index as u64
}

impl CoreState {
    pub fn new(id: u32, vlen_bits: u32, mode: VsetvlMode) -> Self {
        CoreState {
            id,
            pc: TEXT_BASE,
            xregs: [0; 32],
            vregs: vec![vec![0; vlen_bits as usize / 8]; 32],
            vl: 0,
            vtype: Vtype { sew: 8, vill: true },
            halted: false,
            trap: None,
            counters: PerfCounters::default(),
            vlen_bits,
            mode,
            x_ready: [0; 32],
            x_pending: [0; 32],
            v_ready: vec![0; 32],
            v_pending: vec![0; 32],
            outstanding: BTreeMap::new(),
            next_token: 0,
            busy_until: 0,
            busy_reason: Stall::Fetch,
            fetched_pc: None,
            sync_after: false,
            vec_issued: 0,
        }
    }

    pub fn read_counters(&self) -> PerfCounters {
        self.counters
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn vlmax(&self, sew: u32) -> u32 {
        self.vlen_bits / sew
    }

    /// Set vl/vtype for a vsetvli request and return the new vl.
    pub fn exec_vsetvli(&mut self, avl: u64, sew: u32, lmul: u32) -> u32 {
        if ![8, 16, 32, 64].contains(&sew) || lmul != 1 {
            self.vtype = Vtype { sew: 8, vill: true };
            self.vl = 0;
            return 0;
        }
        self.vtype = Vtype { sew, vill: false };
        self.vl = avl.min(self.vlmax(sew) as u64) as u32;
        self.vl
    }

    fn index_of(&self, pc: u64, len: usize) -> Option<usize> {
        if pc < TEXT_BASE || (pc - TEXT_BASE) % 4 != 0 {
            return None;
        }
        let i = ((pc - TEXT_BASE) / 4) as usize;
        (i < len).then_some(i)
    }

    fn x_busy(&self, r: u8, now: u64) -> bool {
        r != 0 && (self.x_pending[r as usize] > 0 || self.x_ready[r as usize] > now)
    }

    fn v_busy(&self, r: u8, now: u64) -> bool {
        self.v_pending[r as usize] > 0 || self.v_ready[r as usize] > now
    }

    fn quiescent(&self, now: u64) -> bool {
        self.outstanding.is_empty()
            && self.x_ready.iter().all(|&c| c <= now)
            && self.v_ready.iter().all(|&c| c <= now)
    }

    fn hazard(&self, ins: &Instr, now: u64) -> bool {
        use Instr::*;
        let x = |r: u8| self.x_busy(r, now);
        let v = |r: u8| self.v_busy(r, now);
        // WAW on a register with an in-flight load stalls too.
        let xw = |r: u8| r != 0 && self.x_pending[r as usize] > 0;
        match *ins {
            Alu { rd, rs1, rs2, .. } => x(rs1) || x(rs2) || xw(rd),
            AluImm { rd, rs1, .. } => x(rs1) || xw(rd),
            Lui { rd, .. } | Auipc { rd, .. } | Jal { rd, .. } | ReadCounter { rd, .. } => xw(rd),
            Load { rd, rs1, .. } => x(rs1) || xw(rd),
            Store { rs1, rs2, .. } => x(rs1) || x(rs2),
            Branch { rs1, rs2, .. } => x(rs1) || x(rs2),
            Jalr { rd, rs1, .. } => x(rs1) || xw(rd),
            AmoAdd { rd, rs1, rs2, .. } => x(rs1) || x(rs2) || xw(rd),
            Fence | Halt => false,
            Vsetvli { rd, rs1, .. } => x(rs1) || xw(rd),
            Vle8 { vd, rs1 } => x(rs1) || self.v_pending[vd as usize] > 0,
            Vse8 { vs3, rs1 } => x(rs1) || v(vs3),
            VaddVV { vd, vs2, vs1 } => v(vs2) || v(vs1) || self.v_pending[vd as usize] > 0,
            VaddVX { vd, vs2, rs1 } => v(vs2) || x(rs1) || self.v_pending[vd as usize] > 0,
        }
    }

    fn token(&mut self) -> u64 {
        self.next_token += 1;
        self.next_token
    }

    fn check_addr(&self, addr: u64, size: u64, port: &dyn MemoryPort) -> Result<(), Trap> {
        if addr.checked_add(size).is_none_or(|e| e > port.memory_size()) {
            return Err(Trap::AddressOutOfBounds { pc: self.pc, addr });
        }
        Ok(())
    }

    /// Split `[addr, addr+len)` at block boundaries.
    fn chunks(addr: u64, len: usize, block: usize) -> Vec<(u64, usize, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        while off < len {
            let a = addr + off as u64;
            let room = block - (a as usize % block);
            let n = room.min(len - off);
            out.push((a, off, n));
            off += n;
        }
        out
    }

    /// A memory access finished.
    pub fn complete(&mut self, token: u64, data: &[u8], now: u64) {
        let Some(o) = self.outstanding.remove(&token) else {
            return;
        };
        match o {
            Outstanding::Load { rd, size, signed } => {
                self.x_pending[rd as usize] -= 1;
                reg_write(&mut self.xregs, rd, extend(&data[..size as usize], signed));
                self.x_ready[rd as usize] = self.x_ready[rd as usize].max(now);
            }
            Outstanding::Amo { rd, size } => {
                self.x_pending[rd as usize] -= 1;
                reg_write(&mut self.xregs, rd, extend(&data[..size as usize], size == 4));
                self.x_ready[rd as usize] = self.x_ready[rd as usize].max(now);
            }
            Outstanding::VecChunk { vd, elem } => {
                let v = &mut self.vregs[vd as usize];
                v[elem..elem + data.len()].copy_from_slice(data);
                self.v_pending[vd as usize] -= 1;
                self.v_ready[vd as usize] = self.v_ready[vd as usize].max(now);
            }
            Outstanding::Store => {}
        }
    }

    /// Advance one cycle: issue at most one instruction.
    pub fn step_cycle(
        &mut self,
        prog: &[Instr],
        port: &mut dyn MemoryPort,
        now: u64,
    ) -> Result<(), Trap> {
        if self.halted || self.trap.is_some() {
            return Ok(());
        }
        self.counters.cycles += 1;
        let r = self.step_inner(prog, port, now);
        if let Err(t) = &r {
            self.trap = Some(t.clone());
        }
        r
    }

    fn step_inner(
        &mut self,
        prog: &[Instr],
        port: &mut dyn MemoryPort,
        now: u64,
    ) -> Result<(), Trap> {
        if self.busy_until > now {
            match self.busy_reason {
                Stall::Fetch => self.counters.stall_cycles_fetch += 1,
                Stall::Vsetvl => self.counters.stall_cycles_vsetvl += 1,
            }
            return Ok(());
        }
        if self.sync_after {
            if !self.quiescent(now) {
                self.counters.stall_cycles_sync += 1;
                return Ok(());
            }
            self.sync_after = false;
        }
        let idx = self
            .index_of(self.pc, prog.len())
            .ok_or(Trap::InvalidInstruction { pc: self.pc })?;
        if self.fetched_pc != Some(self.pc) {
            let ready = port.fetch(self.pc, now);
            self.fetched_pc = Some(self.pc);
            if ready > now {
                self.busy_until = ready;
                self.busy_reason = Stall::Fetch;
                self.counters.stall_cycles_fetch += 1;
                return Ok(());
            }
        }
        let ins = prog[idx];
        if self.vec_issued == 0 && self.hazard(&ins, now) {
            self.counters.stall_cycles_raw_hazard += 1;
            return Ok(());
        }
        if matches!(ins, Instr::AmoAdd { .. } | Instr::Fence | Instr::Halt) && !self.quiescent(now) {
            self.counters.stall_cycles_sync += 1;
            return Ok(());
        }
        if let Instr::Vsetvli { .. } = ins {
            if self.mode == VsetvlMode::Stall && !self.quiescent(now) {
                self.counters.stall_cycles_vsetvl += 1;
                return Ok(());
            }
        }
        if !self.execute(ins, port, now)? {
            self.counters.stall_cycles_mshr_full += 1;
            return Ok(());
        }
        self.counters.instructions_retired += 1;
        if ins.is_vector() {
            self.counters.vector_instructions += 1;
        }
        Ok(())
    }

    /// Execute `ins`. Ok(false) means the port had no room and the
    /// instruction did not retire (a vector access may have issued some
    /// blocks).
    fn execute(&mut self, ins: Instr, port: &mut dyn MemoryPort, now: u64) -> Result<bool, Trap> {
        use Instr::*;
        let x = self.xregs;
        let mut next_pc = self.pc + 4;
        let bs = port.block_size();
        match ins {
            Alu { op, rd, rs1, rs2 } => {
                reg_write(&mut self.xregs, rd, op.eval(x[rs1 as usize], x[rs2 as usize]));
                let lat = if op == AluOp::Mul { MUL_LATENCY } else { 1 };
                self.x_ready[rd as usize] = now + lat;
            }
            AluImm { op, rd, rs1, imm } => {
                reg_write(&mut self.xregs, rd, op.eval(x[rs1 as usize], imm as u64));
                self.x_ready[rd as usize] = now + 1;
            }
            Lui { rd, imm } => {
                reg_write(&mut self.xregs, rd, (imm << 12) as u64);
                self.x_ready[rd as usize] = now + 1;
            }
            Auipc { rd, imm } => {
                reg_write(&mut self.xregs, rd, self.pc.wrapping_add((imm << 12) as u64));
                self.x_ready[rd as usize] = now + 1;
            }
            ReadCounter { rd, counter } => {
                let v = match counter {
                    Counter::Cycle => self.counters.cycles,
                    Counter::Instret => self.counters.instructions_retired,
                };
                reg_write(&mut self.xregs, rd, v);
                self.x_ready[rd as usize] = now + 1;
            }
            Load { size, signed, rd, rs1, offset } => {
                let addr = x[rs1 as usize].wrapping_add(offset as u64);
                if addr % size as u64 != 0 {
                    return Err(Trap::MisalignedAccess { pc: self.pc, addr, size });
                }
                self.check_addr(addr, size as u64, port)?;
                if port.capacity() == 0 {
                    return Ok(false);
                }
                let token = self.token();
                let req = MemReq { token, addr, op: MemOp::Load { size: size as usize } };
                self.counters.scalar_loads += 1;
                match port.access(req, now) {
                    PortReply::Hit { data, ready_at } => {
                        reg_write(&mut self.xregs, rd, extend(&data[..size as usize], signed));
                        self.x_ready[rd as usize] = ready_at;
                    }
                    PortReply::Pending => {
                        self.counters.l1d_misses += 1;
                        if rd != 0 {
                            self.x_pending[rd as usize] += 1;
                            self.outstanding.insert(token, Outstanding::Load { rd, size, signed });
                        }
                    }
                }
            }
            Store { size, rs1, rs2, offset } => {
                let addr = x[rs1 as usize].wrapping_add(offset as u64);
                if addr % size as u64 != 0 {
                    return Err(Trap::MisalignedAccess { pc: self.pc, addr, size });
                }
                self.check_addr(addr, size as u64, port)?;
                if port.capacity() == 0 {
                    return Ok(false);
                }
                let token = self.token();
                let bytes = x[rs2 as usize].to_le_bytes()[..size as usize].to_vec();
                self.counters.scalar_stores += 1;
                if port.access(MemReq { token, addr, op: MemOp::Store { bytes } }, now)
                    == PortReply::Pending
                {
                    self.outstanding.insert(token, Outstanding::Store);
                }
            }
            AmoAdd { size, rd, rs1, rs2 } => {
                let addr = x[rs1 as usize];
                if addr % size as u64 != 0 {
                    return Err(Trap::MisalignedAccess { pc: self.pc, addr, size });
                }
                self.check_addr(addr, size as u64, port)?;
                if port.capacity() == 0 {
                    return Ok(false);
                }
                let token = self.token();
                let op = MemOp::AmoAdd { size: size as usize, operand: x[rs2 as usize] };
                match port.access(MemReq { token, addr, op }, now) {
                    PortReply::Hit { data, ready_at } => {
                        reg_write(&mut self.xregs, rd, extend(&data[..size as usize], size == 4));
                        self.x_ready[rd as usize] = ready_at;
                    }
                    PortReply::Pending => {
                        self.x_pending[rd as usize] += 1;
                        self.outstanding.insert(token, Outstanding::Amo { rd, size });
                    }
                }
                self.sync_after = true;
            }
            Fence => {}
            Halt => {
                self.halted = true;
                next_pc = self.pc;
            }
            Branch { cond, rs1, rs2, target } => {
                if cond.eval(x[rs1 as usize], x[rs2 as usize]) {
                    next_pc = pc_of(target);
                }
            }
            Jal { rd, target } => {
                reg_write(&mut self.xregs, rd, self.pc + 4);
                self.x_ready[rd as usize] = now + 1;
                next_pc = pc_of(target);
            }
            Jalr { rd, rs1, offset } => {
                reg_write(&mut self.xregs, rd, self.pc + 4);
                self.x_ready[rd as usize] = now + 1;
                next_pc = x[rs1 as usize].wrapping_add(offset as u64) & !1;
            }
            Vsetvli { rd, rs1, sew, lmul } => {
                let avl = if rs1 != 0 {
                    x[rs1 as usize]
                } else if rd != 0 {
                    u64::MAX
                } else {
                    self.vl as u64
                };
                let vl = self.exec_vsetvli(avl, sew, lmul);
                reg_write(&mut self.xregs, rd, vl as u64);
                self.x_ready[rd as usize] = now + 1;
                if self.mode == VsetvlMode::Stall {
                    self.busy_until = now + 1 + VSETVL_DRAIN_PENALTY;
                    self.busy_reason = Stall::Vsetvl;
                }
            }
            Vle8 { vd, rs1 } | Vse8 { vs3: vd, rs1 } => {
                if self.vtype.vill {
                    return Err(Trap::IllegalVtype { pc: self.pc });
                }
                let base = x[rs1 as usize];
                let vl = self.vl as usize;
                self.check_addr(base, vl as u64, port)?;
                let parts = Self::chunks(base, vl, bs);
                let is_load = matches!(ins, Vle8 { .. });
                while self.vec_issued < parts.len() {
                    if port.capacity() == 0 {
                        return Ok(false);
                    }
                    let (addr, elem, n) = parts[self.vec_issued];
                    self.vec_issued += 1;
                    let token = self.token();
                    let op = if is_load {
                        MemOp::Load { size: n }
                    } else {
                        MemOp::Store { bytes: self.vregs[vd as usize][elem..elem + n].to_vec() }
                    };
                    match port.access(MemReq { token, addr, op }, now) {
                        PortReply::Hit { data, ready_at } => {
                            if is_load {
                                self.vregs[vd as usize][elem..elem + n].copy_from_slice(&data[..n]);
                                let r = &mut self.v_ready[vd as usize];
                                *r = (*r).max(ready_at);
                            }
                        }
                        PortReply::Pending => {
                            if is_load {
                                self.counters.l1d_misses += 1;
                                self.v_pending[vd as usize] += 1;
                                self.outstanding.insert(token, Outstanding::VecChunk { vd, elem });
                            } else {
                                self.outstanding.insert(token, Outstanding::Store);
                            }
                        }
                    }
                }
                self.vec_issued = 0;
            }
            VaddVV { vd, vs2, vs1 } | VaddVX { vd, vs2, rs1: vs1 } => {
                if self.vtype.vill {
                    return Err(Trap::IllegalVtype { pc: self.pc });
                }
                let ew = self.vtype.sew as usize / 8;
                let scalar = matches!(ins, VaddVX { .. }).then(|| x[vs1 as usize]);
                let mut out = self.vregs[vd as usize].clone();
                for i in 0..self.vl as usize {
                    let r = i * ew..(i + 1) * ew;
                    let a = extend(&self.vregs[vs2 as usize][r.clone()], false);
                    let b = scalar.unwrap_or_else(|| extend(&self.vregs[vs1 as usize][r.clone()], false));
                    out[r].copy_from_slice(&a.wrapping_add(b).to_le_bytes()[..ew]);
                }
                self.vregs[vd as usize] = out;
                self.v_ready[vd as usize] = now + 1;
            }
        }
        self.pc = next_pc;
        Ok(true)
    }
}

/// Flat memory with fixed hit latency and unlimited bandwidth, for unit
/// tests and functional reference runs.
#[derive(Debug, Clone, Default)]
pub struct IdealPort {
    pub mem: BTreeMap<u64, u8>,
    pub latency: u64,
    pub size: u64,
}

impl IdealPort {
    pub fn new(latency: u64) -> Self {
        IdealPort { mem: BTreeMap::new(), latency, size: 1 << 40 }
    }
    pub fn read(&self, addr: u64, n: usize) -> Vec<u8> {
        (0..n as u64).map(|i| *self.mem.get(&(addr + i)).unwrap_or(&0)).collect()
    }
    pub fn write(&mut self, addr: u64, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            self.mem.insert(addr + i as u64, *b);
        }
    }
}

impl MemoryPort for IdealPort {
    fn fetch(&mut self, _pc: u64, now: u64) -> u64 {
        now
    }
    fn capacity(&self) -> usize {
        usize::MAX
    }
    fn access(&mut self, req: MemReq, now: u64) -> PortReply {
        let data = match req.op {
            MemOp::Load { size } => self.read(req.addr, size),
            MemOp::Store { bytes } => {
                self.write(req.addr, &bytes);
                Vec::new()
            }
            MemOp::AmoAdd { size, operand } => {
                let old = self.read(req.addr, size);
                let new = extend(&old, false).wrapping_add(operand).to_le_bytes();
                self.write(req.addr, &new[..size]);
                old
            }
        };
        PortReply::Hit { data, ready_at: now + self.latency }
    }
    fn block_size(&self) -> usize {
        64
    }
    fn memory_size(&self) -> u64 {
        self.size
    }
}

/// Run `prog` to halt on one core against a port; returns cycles taken.
pub fn run_to_halt(
    core: &mut CoreState,
    prog: &[Instr],
    port: &mut dyn MemoryPort,
    limit: u64,
) -> Result<u64, Trap> {
    let mut now = 0;
    while !core.halted && now < limit {
        core.step_cycle(prog, port, now)?;
        now += 1;
    }
    Ok(now)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn core() -> CoreState {
        CoreState::new(0, 128, VsetvlMode::Renaming)
    }

    /// Port whose loads miss and complete only when the test says so.
    struct MissPort {
        issued: Vec<MemReq>,
    }

    impl MemoryPort for MissPort {
        fn fetch(&mut self, _pc: u64, now: u64) -> u64 {
            now
        }
        fn capacity(&self) -> usize {
            4
        }
        fn access(&mut self, req: MemReq, _now: u64) -> PortReply {
            self.issued.push(req);
            PortReply::Pending
        }
        fn block_size(&self) -> usize {
            64
        }
        fn memory_size(&self) -> u64 {
            1 << 32
        }
    }

    fn addi(rd: u8, rs1: u8, imm: i64) -> Instr {
        Instr::AluImm { op: AluOp::Add, rd, rs1, imm }
    }

    #[test]
    fn addi_result_next_cycle() {
        let mut c = core();
        let mut p = IdealPort::new(1);
        let prog = [addi(1, 0, 5), Instr::Halt];
        c.step_cycle(&prog, &mut p, 0).unwrap();
        assert_eq!(c.xregs[1], 5);
        assert_eq!(c.counters.instructions_retired, 1);
    }

    #[test]
    fn x0_stays_zero() {
        let mut c = core();
        let mut p = IdealPort::new(1);
        let prog = [addi(0, 0, 7), addi(1, 0, 1), Instr::Halt];
        run_to_halt(&mut c, &prog, &mut p, 100).unwrap();
        assert_eq!(c.xregs[0], 0);
    }

    #[test]
    fn load_use_stalls_and_in_order_blocks_independent() {
        let mut c = core();
        let mut p = MissPort { issued: vec![] };
        let prog = [
            Instr::Load { size: 8, signed: true, rd: 2, rs1: 3, offset: 0 },
            Instr::Alu { op: AluOp::Add, rd: 4, rs1: 2, rs2: 2 },
            addi(5, 0, 1),
            Instr::Halt,
        ];
        c.step_cycle(&prog, &mut p, 0).unwrap();
        for now in 1..10 {
            c.step_cycle(&prog, &mut p, now).unwrap();
        }
        assert_eq!(c.xregs[5], 0, "independent addi must wait behind the stalled add");
        assert_eq!(c.counters.stall_cycles_raw_hazard, 9);
        let tok = p.issued[0].token;
        c.complete(tok, &21u64.to_le_bytes(), 10);
        c.step_cycle(&prog, &mut p, 10).unwrap();
        c.step_cycle(&prog, &mut p, 11).unwrap();
        assert_eq!(c.xregs[4], 42);
        assert_eq!(c.xregs[5], 1);
    }

    #[test]
    fn hundred_addis_take_hundred_cycles() {
        let mut c = core();
        let mut p = IdealPort::new(1);
        let mut prog: Vec<Instr> = (0..100).map(|i| addi(1 + (i % 30) as u8, 0, i)).collect();
        prog.push(Instr::Halt);
        let cycles = run_to_halt(&mut c, &prog, &mut p, 1000).unwrap();
        assert_eq!(cycles, 101);
        assert_eq!(c.counters.instructions_retired, 101);
    }

    #[test]
    fn vsetvli_examples() {
        let mut c = core();
        assert_eq!(c.exec_vsetvli(100, 8, 1), 16);
        assert_eq!(c.exec_vsetvli(10, 8, 1), 10);
        assert_eq!(c.exec_vsetvli(0, 8, 1), 0);
        assert_eq!(c.exec_vsetvli(100, 8, 2), 0);
        assert!(c.vtype.vill);
    }

    #[test]
    fn vector_under_vill_traps() {
        let mut c = core();
        let mut p = IdealPort::new(1);
        let prog = [Instr::VaddVV { vd: 1, vs2: 2, vs1: 3 }];
        assert_eq!(
            c.step_cycle(&prog, &mut p, 0),
            Err(Trap::IllegalVtype { pc: TEXT_BASE })
        );
    }

    #[test]
    fn vadd_vv_elementwise() {
        let mut c = core();
        c.exec_vsetvli(16, 8, 1);
        c.vregs[1] = (0..16).collect();
        c.vregs[2] = vec![1; 16];
        let mut p = IdealPort::new(1);
        let prog = [Instr::VaddVV { vd: 3, vs2: 1, vs1: 2 }];
        c.step_cycle(&prog, &mut p, 0).unwrap();
        assert_eq!(c.vregs[3], (1..=16).collect::<Vec<u8>>());
    }

    #[test]
    fn tail_undisturbed() {
        let mut c = core();
        c.exec_vsetvli(4, 8, 1);
        c.vregs[3] = vec![9; 16];
        let mut p = IdealPort::new(1);
        c.step_cycle(&[Instr::VaddVX { vd: 3, vs2: 1, rs1: 0 }], &mut p, 0).unwrap();
        assert_eq!(&c.vregs[3][..4], &[0; 4]);
        assert_eq!(&c.vregs[3][4..], &[9; 12]);
    }

    #[test]
    fn vle8_block_split() {
        let run = |base: u64| {
            let mut c = core();
            c.exec_vsetvli(16, 8, 1);
            c.xregs[1] = base;
            let mut p = MissPort { issued: vec![] };
            c.step_cycle(&[Instr::Vle8 { vd: 2, rs1: 1 }], &mut p, 0).unwrap();
            p.issued.len()
        };
        assert_eq!(run(0x1000), 1);
        assert_eq!(run(0x1000 + 64 - 8), 2);
    }

    #[test]
    fn misaligned_scalar_traps() {
        let mut c = core();
        c.xregs[1] = 0x1004;
        let mut p = IdealPort::new(1);
        let prog = [Instr::Load { size: 8, signed: true, rd: 2, rs1: 1, offset: 0 }];
        assert!(matches!(
            c.step_cycle(&prog, &mut p, 0),
            Err(Trap::MisalignedAccess { .. })
        ));
    }

    #[test]
    fn counters_snapshot_is_pure() {
        let c = core();
        assert_eq!(c.read_counters(), PerfCounters::default());
        assert_eq!(c.read_counters(), c.read_counters());
    }

    #[test]
    fn stall_mode_vsetvli_costs_cycles() {
        let prog = [
            Instr::Vsetvli { rd: 1, rs1: 0, sew: 8, lmul: 1 },
            addi(2, 0, 1),
            Instr::Vsetvli { rd: 1, rs1: 0, sew: 8, lmul: 1 },
            addi(2, 0, 1),
            Instr::Halt,
        ];
        let run = |mode| {
            let mut c = CoreState::new(0, 128, mode);
            let mut p = IdealPort::new(1);
            let cy = run_to_halt(&mut c, &prog, &mut p, 1000).unwrap();
            (cy, c.counters)
        };
        let (rc, rk) = run(VsetvlMode::Renaming);
        let (sc, sk) = run(VsetvlMode::Stall);
        assert!(rc < sc);
        assert_eq!(rk.stall_cycles_vsetvl, 0);
        assert_eq!(sk.stall_cycles_vsetvl, 2 * VSETVL_DRAIN_PENALTY);
        assert_eq!(rk.instructions_retired, sk.instructions_retired);
    }

    #[test]
    fn amoadd_returns_old_value() {
        let mut c = core();
        let mut p = IdealPort::new(1);
        p.write(0x100, &5u64.to_le_bytes());
        c.xregs[1] = 0x100;
        c.xregs[2] = 3;
        let prog = [Instr::AmoAdd { size: 8, rd: 3, rs1: 1, rs2: 2 }, Instr::Halt];
        run_to_halt(&mut c, &prog, &mut p, 100).unwrap();
        assert_eq!(c.xregs[3], 5);
        assert_eq!(p.read(0x100, 8), 8u64.to_le_bytes());
    }
}
