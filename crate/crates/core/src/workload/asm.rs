//! Two-pass assembler and pretty-printer for the supported subset.
//!
//! Grammar, one item per line (`;` starts a comment):
//!
//! ```text
//! line      := [label ":"] [instr | directive]
//! instr     := mnemonic [operand {"," operand}]
//! operand   := reg | vreg | imm | label | imm? "(" reg ")" | vtype-token
//! directive := ".text" | ".data" | ".org" imm | ".align" imm
//!            | ".byte" imm,... | ".word" imm,... | ".dword" imm,... | ".zero" imm
//! ```
//!
//! Labels in `.text` name instruction indices, labels in `.data` name byte
//! addresses. Immediates are decimal or `0x` hex, optionally negative, and
//! may be any 64-bit value (`li` loads a full constant in one instruction).
//! Pseudo-instructions: `li`, `la`, `mv`, `j`, `nop`, `beqz`, `bnez`.

use super::{Program, DATA_BASE};
use crate::cpu::{AluOp, BranchCond, Counter, Instr, TEXT_BASE};
use std::collections::BTreeMap;
use std::fmt::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: unknown mnemonic '{mnemonic}'")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("unresolved label '{0}'")]
    UnresolvedLabel(String),
    #[error("line {line}: '{mnemonic}' expects {expected} operands, got {got}")]
    OperandArity {
        line: usize,
        mnemonic: String,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: bad operand '{text}'")]
    BadOperand { line: usize, text: String },
    #[error("line {line}: duplicate label '{name}'")]
    DuplicateLabel { line: usize, name: String },
    #[error("data segment at {0:#x} overlaps the instruction space")]
    DataOverlap(u64),
}

const ABI: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4",
    "a5", "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4",
    "t5", "t6",
];

fn parse_reg(s: &str) -> Option<u8> {
    if let Some(n) = s.strip_prefix('x') {
        return n.parse::<u8>().ok().filter(|&r| r < 32);
    }
    if s == "fp" {
        return Some(8);
    }
    ABI.iter().position(|&a| a == s).map(|r| r as u8)
}

fn parse_vreg(s: &str) -> Option<u8> {
    s.strip_prefix('v')?.parse::<u8>().ok().filter(|&r| r < 32)
}

pub(crate) fn parse_imm(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&h.replace('_', ""), 16).ok()? as i64
    } else {
        body.replace('_', "").parse::<u64>().ok()? as i64
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

/// An operand whose value may be a label resolved in pass two.
#[derive(Debug, Clone)]
enum Val {
    Imm(i64),
    Sym(String),
}

#[derive(Debug, Clone)]
enum Pending {
    Done(Instr),
    Branch { cond: BranchCond, rs1: u8, rs2: u8, target: String },
    Jal { rd: u8, target: String },
    La { rd: u8, sym: Val },
}

struct Line<'a> {
    no: usize,
    mnemonic: &'a str,
    ops: Vec<&'a str>,
}

impl Line<'_> {
    fn arity(&self, n: usize) -> Result<(), AsmError> {
        if self.ops.len() != n {
            return Err(AsmError::OperandArity {
                line: self.no,
                mnemonic: self.mnemonic.into(),
                expected: n,
                got: self.ops.len(),
            });
        }
        Ok(())
    }
    fn bad(&self, text: &str) -> AsmError {
        AsmError::BadOperand {
            line: self.no,
            text: text.into(),
        }
    }
    fn x(&self, i: usize) -> Result<u8, AsmError> {
        parse_reg(self.ops[i]).ok_or_else(|| self.bad(self.ops[i]))
    }
    fn v(&self, i: usize) -> Result<u8, AsmError> {
        parse_vreg(self.ops[i]).ok_or_else(|| self.bad(self.ops[i]))
    }
    fn imm(&self, i: usize) -> Result<i64, AsmError> {
        parse_imm(self.ops[i]).ok_or_else(|| self.bad(self.ops[i]))
    }
    fn val(&self, i: usize) -> Result<Val, AsmError> {
        let s = self.ops[i];
        if let Some(v) = parse_imm(s) {
            return Ok(Val::Imm(v));
        }
        if is_ident(s) {
            return Ok(Val::Sym(s.into()));
        }
        Err(self.bad(s))
    }
    fn label(&self, i: usize) -> Result<String, AsmError> {
        let s = self.ops[i];
        if is_ident(s) {
            Ok(s.into())
        } else {
            Err(self.bad(s))
        }
    }
    /// `imm(reg)` or `(reg)`.
    fn mem(&self, i: usize) -> Result<(i64, u8), AsmError> {
        let s = self.ops[i];
        let open = s.find('(').ok_or_else(|| self.bad(s))?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(|| self.bad(s))?;
        let reg = parse_reg(inner.trim()).ok_or_else(|| self.bad(s))?;
        let off = s[..open].trim();
        let off = if off.is_empty() {
            0
        } else {
            parse_imm(off).ok_or_else(|| self.bad(s))?
        };
        Ok((off, reg))
    }
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic() || ch == '_' || ch == '.')
        && s.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '.')
}

fn alu_rr(m: &str) -> Option<AluOp> {
    Some(match m {
        "add" => AluOp::Add,
        "sub" => AluOp::Sub,
        "and" => AluOp::And,
        "or" => AluOp::Or,
        "xor" => AluOp::Xor,
        "slt" => AluOp::Slt,
        "sltu" => AluOp::Sltu,
        "sll" => AluOp::Sll,
        "srl" => AluOp::Srl,
        "sra" => AluOp::Sra,
        "mul" => AluOp::Mul,
        _ => return None,
    })
}

fn alu_ri(m: &str) -> Option<AluOp> {
    Some(match m {
        "addi" => AluOp::Add,
        "andi" => AluOp::And,
        "ori" => AluOp::Or,
        "xori" => AluOp::Xor,
        "slti" => AluOp::Slt,
        "sltiu" => AluOp::Sltu,
        "slli" => AluOp::Sll,
        "srli" => AluOp::Srl,
        "srai" => AluOp::Sra,
        _ => return None,
    })
}

fn branch(m: &str) -> Option<BranchCond> {
    Some(match m {
        "beq" => BranchCond::Eq,
        "bne" => BranchCond::Ne,
        "blt" => BranchCond::Lt,
        "bge" => BranchCond::Ge,
        "bltu" => BranchCond::Ltu,
        "bgeu" => BranchCond::Geu,
        _ => return None,
    })
}

fn load(m: &str) -> Option<(u8, bool)> {
    Some(match m {
        "ld" => (8, true),
        "lw" => (4, true),
        "lwu" => (4, false),
        "lh" => (2, true),
        "lhu" => (2, false),
        "lb" => (1, true),
        "lbu" => (1, false),
        _ => return None,
    })
}

fn store(m: &str) -> Option<u8> {
    Some(match m {
        "sd" => 8,
        "sw" => 4,
        "sh" => 2,
        "sb" => 1,
        _ => return None,
    })
}

fn instr(l: &Line) -> Result<Pending, AsmError> {
    use Pending::Done;
    let m = l.mnemonic;
    if let Some(op) = alu_rr(m) {
        l.arity(3)?;
        return Ok(Done(Instr::Alu { op, rd: l.x(0)?, rs1: l.x(1)?, rs2: l.x(2)? }));
    }
    if let Some(op) = alu_ri(m) {
        l.arity(3)?;
        return Ok(Done(Instr::AluImm { op, rd: l.x(0)?, rs1: l.x(1)?, imm: l.imm(2)? }));
    }
    if let Some(cond) = branch(m) {
        l.arity(3)?;
        return Ok(Pending::Branch { cond, rs1: l.x(0)?, rs2: l.x(1)?, target: l.label(2)? });
    }
    if let Some((size, signed)) = load(m) {
        l.arity(2)?;
        let (offset, rs1) = l.mem(1)?;
        return Ok(Done(Instr::Load { size, signed, rd: l.x(0)?, rs1, offset }));
    }
    if let Some(size) = store(m) {
        l.arity(2)?;
        let (offset, rs1) = l.mem(1)?;
        return Ok(Done(Instr::Store { size, rs1, rs2: l.x(0)?, offset }));
    }
    Ok(match m {
        "lui" | "auipc" => {
            l.arity(2)?;
            let (rd, imm) = (l.x(0)?, l.imm(1)?);
            Done(if m == "lui" { Instr::Lui { rd, imm } } else { Instr::Auipc { rd, imm } })
        }
        "jal" => match l.ops.len() {
            1 => Pending::Jal { rd: 1, target: l.label(0)? },
            _ => {
                l.arity(2)?;
                Pending::Jal { rd: l.x(0)?, target: l.label(1)? }
            }
        },
        "jalr" => {
            l.arity(2)?;
            let (offset, rs1) = l.mem(1)?;
            Done(Instr::Jalr { rd: l.x(0)?, rs1, offset })
        }
        "amoadd.w" | "amoadd.d" => {
            l.arity(3)?;
            let (off, rs1) = l.mem(2)?;
            if off != 0 {
                return Err(l.bad(l.ops[2]));
            }
            let size = if m == "amoadd.w" { 4 } else { 8 };
            Done(Instr::AmoAdd { size, rd: l.x(0)?, rs1, rs2: l.x(1)? })
        }
        "fence" => {
            l.arity(0)?;
            Done(Instr::Fence)
        }
        "halt" => {
            l.arity(0)?;
            Done(Instr::Halt)
        }
        "rdcycle" | "rdinstret" => {
            l.arity(1)?;
            let counter = if m == "rdcycle" { Counter::Cycle } else { Counter::Instret };
            Done(Instr::ReadCounter { rd: l.x(0)?, counter })
        }
        "vsetvli" => {
            if l.ops.len() < 3 {
                l.arity(4)?;
            }
            let (rd, rs1) = (l.x(0)?, l.x(1)?);
            let mut sew = None;
            let mut lmul = 1;
            for t in &l.ops[2..] {
                match *t {
                    "e8" => sew = Some(8),
                    "e16" => sew = Some(16),
                    "e32" => sew = Some(32),
                    "e64" => sew = Some(64),
                    "m1" => lmul = 1,
                    "m2" => lmul = 2,
                    "m4" => lmul = 4,
                    "m8" => lmul = 8,
                    "mf2" | "mf4" | "mf8" => lmul = 0,
                    "ta" | "tu" | "ma" | "mu" => {}
                    other => return Err(l.bad(other)),
                }
            }
            let sew = sew.ok_or_else(|| l.bad("missing SEW"))?;
            Done(Instr::Vsetvli { rd, rs1, sew, lmul })
        }
        "vle8.v" | "vse8.v" => {
            l.arity(2)?;
            let (off, rs1) = l.mem(1)?;
            if off != 0 {
                return Err(l.bad(l.ops[1]));
            }
            let v = l.v(0)?;
            Done(if m == "vle8.v" { Instr::Vle8 { vd: v, rs1 } } else { Instr::Vse8 { vs3: v, rs1 } })
        }
        "vadd.vv" => {
            l.arity(3)?;
            Done(Instr::VaddVV { vd: l.v(0)?, vs2: l.v(1)?, vs1: l.v(2)? })
        }
        "vadd.vx" => {
            l.arity(3)?;
            Done(Instr::VaddVX { vd: l.v(0)?, vs2: l.v(1)?, rs1: l.x(2)? })
        }
        "li" => {
            l.arity(2)?;
            Done(Instr::AluImm { op: AluOp::Add, rd: l.x(0)?, rs1: 0, imm: l.imm(1)? })
        }
        "la" => {
            l.arity(2)?;
            Pending::La { rd: l.x(0)?, sym: l.val(1)? }
        }
        "mv" => {
            l.arity(2)?;
            Done(Instr::AluImm { op: AluOp::Add, rd: l.x(0)?, rs1: l.x(1)?, imm: 0 })
        }
        "nop" => {
            l.arity(0)?;
            Done(Instr::AluImm { op: AluOp::Add, rd: 0, rs1: 0, imm: 0 })
        }
        "j" => {
            l.arity(1)?;
            Pending::Jal { rd: 0, target: l.label(0)? }
        }
        "beqz" | "bnez" => {
            l.arity(2)?;
            let cond = if m == "beqz" { BranchCond::Eq } else { BranchCond::Ne };
            Pending::Branch { cond, rs1: l.x(0)?, rs2: 0, target: l.label(1)? }
        }
        _ => {
            return Err(AsmError::UnknownMnemonic {
                line: l.no,
                mnemonic: m.into(),
            })
        }
    })
}

fn split_ops(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split(',').map(str::trim).collect()
}

pub fn assemble(text: &str) -> Result<Program, AsmError> {
    let mut pending: Vec<(usize, Pending)> = Vec::new();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut symbols: BTreeMap<String, u64> = BTreeMap::new();
    let mut data: BTreeMap<u64, u8> = BTreeMap::new();
    let mut in_data = false;
    let mut cursor = DATA_BASE;
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let mut line = raw.split(';').next().unwrap().trim();
        while let Some(colon) = line.find(':') {
            let name = line[..colon].trim();
            if !is_ident(name) {
                break;
            }
            let dup = if in_data {
                symbols.insert(name.into(), cursor).is_some()
            } else {
                labels.insert(name.into(), pending.len()).is_some()
            };
            if dup || (labels.contains_key(name) && symbols.contains_key(name)) {
                return Err(AsmError::DuplicateLabel { line: no, name: name.into() });
            }
            line = line[colon + 1..].trim();
        }
        if line.is_empty() {
            continue;
        }
        let (mnemonic, rest) = match line.find(char::is_whitespace) {
            Some(p) => (&line[..p], &line[p..]),
            None => (line, ""),
        };
        let l = Line { no, mnemonic, ops: split_ops(rest) };
        if mnemonic.starts_with('.') {
            match mnemonic {
                ".text" => in_data = false,
                ".data" => in_data = true,
                ".org" => {
                    l.arity(1)?;
                    cursor = l.imm(0)? as u64;
                }
                ".align" => {
                    l.arity(1)?;
                    let a = l.imm(0)? as u64;
                    if a == 0 || !a.is_power_of_two() {
                        return Err(l.bad(l.ops[0]));
                    }
                    cursor = cursor.div_ceil(a) * a;
                }
                ".zero" => {
                    l.arity(1)?;
                    for _ in 0..l.imm(0)? {
                        data.insert(cursor, 0);
                        cursor += 1;
                    }
                }
                ".byte" | ".half" | ".word" | ".dword" => {
                    let w = match mnemonic {
                        ".byte" => 1,
                        ".half" => 2,
                        ".word" => 4,
                        _ => 8,
                    };
                    for k in 0..l.ops.len() {
                        let v = l.imm(k)?;
                        for b in &v.to_le_bytes()[..w] {
                            data.insert(cursor, *b);
                            cursor += 1;
                        }
                    }
                }
                _ => {
                    return Err(AsmError::UnknownMnemonic {
                        line: no,
                        mnemonic: mnemonic.into(),
                    })
                }
            }
            continue;
        }
        pending.push((no, instr(&l)?));
    }
    let resolve = |name: &str| labels.get(name).copied().ok_or_else(|| AsmError::UnresolvedLabel(name.into()));
    let mut instrs = Vec::with_capacity(pending.len());
    for (_, p) in pending {
        instrs.push(match p {
            Pending::Done(i) => i,
            Pending::Branch { cond, rs1, rs2, target } => {
                Instr::Branch { cond, rs1, rs2, target: resolve(&target)? }
            }
            Pending::Jal { rd, target } => Instr::Jal { rd, target: resolve(&target)? },
            Pending::La { rd, sym } => {
                let addr = match sym {
                    Val::Imm(v) => v,
                    Val::Sym(s) => match symbols.get(&s) {
                        Some(a) => *a as i64,
                        None => crate::cpu::pc_of(resolve(&s)?) as i64,
                    },
                };
                Instr::AluImm { op: AluOp::Add, rd, rs1: 0, imm: addr }
            }
        });
    }
    // coalesce bytes into contiguous runs
    let mut segs: Vec<(u64, Vec<u8>)> = Vec::new();
    for (a, b) in data {
        if a >= TEXT_BASE {
            return Err(AsmError::DataOverlap(a));
        }
        match segs.last_mut() {
            Some((start, bytes)) if *start + bytes.len() as u64 == a => bytes.push(b),
            _ => segs.push((a, vec![b])),
        }
    }
    Ok(Program {
        instrs,
        labels,
        symbols,
        entry: 0,
        data: segs,
    })
}

fn xr(r: u8) -> String {
    format!("x{r}")
}

/// Canonical text for a program; re-assembling it yields the same program.
pub fn pretty_print(p: &Program) -> String {
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    for (n, i) in &p.labels {
        names.entry(*i).or_insert_with(|| n.clone());
    }
    for ins in &p.instrs {
        if let Instr::Branch { target, .. } | Instr::Jal { target, .. } = ins {
            names.entry(*target).or_insert_with(|| format!("L{target}"));
        }
    }
    let mut out = String::new();
    let target = |t: &usize| names[t].clone();
    for (i, ins) in p.instrs.iter().enumerate() {
        if let Some(n) = names.get(&i) {
            writeln!(out, "{n}:").unwrap();
        }
        let text = match *ins {
            Instr::Alu { op, rd, rs1, rs2 } => {
                format!("{} {}, {}, {}", alu_name(op), xr(rd), xr(rs1), xr(rs2))
            }
            Instr::AluImm { op, rd, rs1, imm } => {
                let m = match op {
                    AluOp::Sltu => "sltiu".to_string(),
                    o => format!("{}i", alu_name(o)),
                };
                format!("{m} {}, {}, {}", xr(rd), xr(rs1), imm)
            }
            Instr::Lui { rd, imm } => format!("lui {}, {imm}", xr(rd)),
            Instr::Auipc { rd, imm } => format!("auipc {}, {imm}", xr(rd)),
            Instr::Load { size, signed, rd, rs1, offset } => {
                let m = match (size, signed) {
                    (8, _) => "ld",
                    (4, true) => "lw",
                    (4, false) => "lwu",
                    (2, true) => "lh",
                    (2, false) => "lhu",
                    (1, true) => "lb",
                    _ => "lbu",
                };
                format!("{m} {}, {offset}({})", xr(rd), xr(rs1))
            }
            Instr::Store { size, rs1, rs2, offset } => {
                let m = ["", "sb", "sh", "", "sw", "", "", "", "sd"][size as usize];
                format!("{m} {}, {offset}({})", xr(rs2), xr(rs1))
            }
            Instr::Branch { cond, rs1, rs2, target: t } => {
                let m = match cond {
                    BranchCond::Eq => "beq",
                    BranchCond::Ne => "bne",
                    BranchCond::Lt => "blt",
                    BranchCond::Ge => "bge",
                    BranchCond::Ltu => "bltu",
                    BranchCond::Geu => "bgeu",
                };
                format!("{m} {}, {}, {}", xr(rs1), xr(rs2), target(&t))
            }
            Instr::Jal { rd, target: t } => format!("jal {}, {}", xr(rd), target(&t)),
            Instr::Jalr { rd, rs1, offset } => format!("jalr {}, {offset}({})", xr(rd), xr(rs1)),
            Instr::AmoAdd { size, rd, rs1, rs2 } => {
                let m = if size == 4 { "amoadd.w" } else { "amoadd.d" };
                format!("{m} {}, {}, ({})", xr(rd), xr(rs2), xr(rs1))
            }
            Instr::Fence => "fence".into(),
            Instr::Halt => "halt".into(),
            Instr::ReadCounter { rd, counter } => match counter {
                Counter::Cycle => format!("rdcycle {}", xr(rd)),
                Counter::Instret => format!("rdinstret {}", xr(rd)),
            },
            Instr::Vsetvli { rd, rs1, sew, lmul } => {
                let l = match lmul {
                    0 => "mf2".to_string(),
                    n => format!("m{n}"),
                };
                format!("vsetvli {}, {}, e{sew}, {l}", xr(rd), xr(rs1))
            }
            Instr::Vle8 { vd, rs1 } => format!("vle8.v v{vd}, ({})", xr(rs1)),
            Instr::Vse8 { vs3, rs1 } => format!("vse8.v v{vs3}, ({})", xr(rs1)),
            Instr::VaddVV { vd, vs2, vs1 } => format!("vadd.vv v{vd}, v{vs2}, v{vs1}"),
            Instr::VaddVX { vd, vs2, rs1 } => format!("vadd.vx v{vd}, v{vs2}, {}", xr(rs1)),
        };
        writeln!(out, "    {text}").unwrap();
    }
    if !p.data.is_empty() {
        writeln!(out, ".data").unwrap();
        let mut syms: BTreeMap<u64, Vec<&String>> = BTreeMap::new();
        for (n, a) in &p.symbols {
            syms.entry(*a).or_default().push(n);
        }
        let flush = |out: &mut String, run: &mut Vec<String>| {
            if !run.is_empty() {
                writeln!(out, ".byte {}", run.join(", ")).unwrap();
                run.clear();
            }
        };
        for (addr, bytes) in &p.data {
            writeln!(out, ".org {addr:#x}").unwrap();
            let mut run = Vec::new();
            for (off, b) in bytes.iter().enumerate() {
                if let Some(ns) = syms.get(&(addr + off as u64)) {
                    flush(&mut out, &mut run);
                    for n in ns {
                        writeln!(out, "{n}:").unwrap();
                    }
                }
                run.push(b.to_string());
                if run.len() == 16 {
                    flush(&mut out, &mut run);
                }
            }
            flush(&mut out, &mut run);
        }
    }
    out
}

fn alu_name(op: AluOp) -> &'static str {
    match op {
        AluOp::Add => "add",
        AluOp::Sub => "sub",
        AluOp::And => "and",
        AluOp::Or => "or",
        AluOp::Xor => "xor",
        AluOp::Slt => "slt",
        AluOp::Sltu => "sltu",
        AluOp::Sll => "sll",
        AluOp::Srl => "srl",
        AluOp::Sra => "sra",
        AluOp::Mul => "mul",
    }
}
