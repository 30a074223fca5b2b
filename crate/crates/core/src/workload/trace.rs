//! CSV memory traces: `core,op,addr,size,gap` per line. A header line
//! starting with `core` and `#` comment lines are skipped. `addr` is decimal
//! or `0x` hex; `gap` (think time in cycles before the access) may be empty.

use super::asm::parse_imm;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {0}: malformed trace record")]
    MalformedTraceLine(usize),
    #[error("line {lineno}: address {addr:#x}+{size} outside memory")]
    AddressOutOfBounds { lineno: usize, addr: u64, size: u64 },
    #[error("line {lineno}: core {core} out of range (have {ncores})")]
    CoreOutOfRange { lineno: usize, core: u32, ncores: u32 },
    #[error("cannot read trace: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceOp {
    Load,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub core: u32,
    pub op: TraceOp,
    pub addr: u64,
    pub size: u64,
    pub gap: u64,
}

pub fn parse_trace(text: &str, ncores: u32, memory_size: u64) -> Result<Vec<Vec<TraceRecord>>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut streams = vec![Vec::new(); ncores as usize];
    for row in rdr.records() {
        let row = row.map_err(|e| {
            TraceError::MalformedTraceLine(e.position().map_or(0, |p| p.line() as usize))
        })?;
        let lineno = row.position().map_or(0, |p| p.line() as usize);
        if row.get(0) == Some("core") {
            continue;
        }
        let bad = || TraceError::MalformedTraceLine(lineno);
        if row.len() < 4 || row.len() > 5 {
            return Err(bad());
        }
        let num = |i: usize| -> Result<u64, TraceError> {
            parse_imm(&row[i]).filter(|v| *v >= 0).map(|v| v as u64).ok_or_else(bad)
        };
        let core = num(0)? as u32;
        let op = match &row[1] {
            "load" | "L" | "R" => TraceOp::Load,
            "store" | "S" | "W" => TraceOp::Store,
            _ => return Err(bad()),
        };
        let addr = num(2)?;
        let size = num(3)?;
        let gap = match row.get(4) {
            Some("") | None => 0,
            Some(_) => num(4)?,
        };
        if ![1, 2, 4, 8].contains(&size) || addr % size != 0 {
            return Err(bad());
        }
        if core >= ncores {
            return Err(TraceError::CoreOutOfRange { lineno, core, ncores });
        }
        if addr.checked_add(size).is_none_or(|e| e > memory_size) {
            return Err(TraceError::AddressOutOfBounds { lineno, addr, size });
        }
        streams[core as usize].push(TraceRecord { core, op, addr, size, gap });
    }
    Ok(streams)
}

pub fn load_trace(path: &Path, ncores: u32, memory_size: u64) -> Result<Vec<Vec<TraceRecord>>, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io(format!("{}: {e}", path.display())))?;
    parse_trace(&text, ncores, memory_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_load() {
        let s = parse_trace("0,load,0x100,8,0", 4, 1 << 20).unwrap();
        assert_eq!(
            s[0],
            vec![TraceRecord { core: 0, op: TraceOp::Load, addr: 0x100, size: 8, gap: 0 }]
        );
        assert!(s[1].is_empty());
    }

    #[test]
    fn core_out_of_range() {
        assert!(matches!(
            parse_trace("9,load,0x100,8,0", 4, 1 << 20),
            Err(TraceError::CoreOutOfRange { core: 9, .. })
        ));
    }

    #[test]
    fn malformed_address() {
        assert_eq!(
            parse_trace("0,store,0xZZZ,8,0", 4, 1 << 20),
            Err(TraceError::MalformedTraceLine(1))
        );
    }

    #[test]
    fn header_comments_and_bounds() {
        let t = "core,op,addr,size,gap\n# warmup\n1,store,64,4,\n2,load,0x40,1,3\n";
        let s = parse_trace(t, 4, 1 << 20).unwrap();
        assert_eq!(s[1][0].gap, 0);
        assert_eq!(s[2][0].gap, 3);
        assert!(matches!(
            parse_trace("0,load,0xffff8,16,0", 1, 1 << 20),
            Err(TraceError::MalformedTraceLine(1))
        ));
        assert!(matches!(
            parse_trace("0,load,0x100000,8,0", 1, 1 << 20),
            Err(TraceError::AddressOutOfBounds { .. })
        ));
    }
}
