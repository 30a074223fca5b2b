//! Programs for the cores: assembler, built-in kernels with host-side
//! oracles, and the CSV memory-trace frontend.

mod asm;
mod kernels;
mod trace;

pub use asm::{assemble, pretty_print, AsmError};
pub use kernels::{gen_kernel, ep_jump, lcg_next, Kernel, KernelError, KernelName, KernelParams, Oracle, LCG_A, LCG_C};
pub use trace::{load_trace, parse_trace, TraceError, TraceOp, TraceRecord};

use crate::cpu::Instr;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DATA_BASE: u64 = 0x1000_0000;

/// Assembled program. Every core runs the same text; `a0` holds the core id
/// and `a1` the core count on entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    pub instrs: Vec<Instr>,
    pub labels: BTreeMap<String, usize>,
    pub symbols: BTreeMap<String, u64>,
    pub entry: usize,
    /// Initial memory image as (address, bytes) runs.
    pub data: Vec<(u64, Vec<u8>)>,
}

impl Program {
    pub fn symbol(&self, name: &str) -> Option<u64> {
        self.symbols.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::{run_to_halt, CoreState, IdealPort, TEXT_BASE};
    use crate::config::VsetvlMode;

    #[test]
    fn single_instruction() {
        let p = assemble("addi x1, x0, 5").unwrap();
        assert_eq!(p.instrs.len(), 1);
    }

    #[test]
    fn rejects_unsupported_mnemonic() {
        assert!(matches!(
            assemble("vmul.vv v1,v2,v3"),
            Err(AsmError::UnknownMnemonic { line: 1, .. })
        ));
    }

    #[test]
    fn unresolved_label() {
        assert_eq!(
            assemble("beq x1, x2, missing"),
            Err(AsmError::UnresolvedLabel("missing".into()))
        );
    }

    #[test]
    fn arity_checked() {
        assert!(matches!(
            assemble("add x1, x2"),
            Err(AsmError::OperandArity { line: 1, .. })
        ));
    }

    #[test]
    fn data_directives_and_la() {
        let p = assemble(
            "la a2, tbl\n ld a3, 8(a2)\n halt\n.data\n.org 0x2000\ntbl: .dword 7, 9\n.byte 1",
        )
        .unwrap();
        assert_eq!(p.symbol("tbl"), Some(0x2000));
        assert_eq!(p.data.len(), 1);
        assert_eq!(p.data[0].1.len(), 17);
        let mut port = IdealPort::new(1);
        for (a, b) in &p.data {
            port.write(*a, b);
        }
        let mut c = CoreState::new(0, 128, VsetvlMode::Renaming);
        run_to_halt(&mut c, &p.instrs, &mut port, 100).unwrap();
        assert_eq!(c.xregs[13], 9);
    }

    #[test]
    fn data_cannot_overlap_text() {
        assert!(matches!(
            assemble(&format!(".data\n.org {TEXT_BASE}\n.byte 1")),
            Err(AsmError::DataOverlap(_))
        ));
    }

    #[test]
    fn pretty_print_round_trip() {
        let src = "start: li t0, 0x123456789\n lb x0, 4(t0)\nloop: addi t0, t0, -1\n \
                   sltiu t1, t0, 3\n bnez t0, loop\n vsetvli t1, t0, e8, m1\n vle8.v v1, (t0)\n \
                   vadd.vx v2, v1, t1\n amoadd.d t2, t1, (t0)\n jal ra, start\n jalr x0, 0(ra)\n \
                   rdcycle a5\n halt\n.data\nbuf: .byte 1, 2, 3\n";
        let p1 = assemble(src).unwrap();
        let t1 = pretty_print(&p1);
        let p2 = assemble(&t1).unwrap();
        assert_eq!(p1.instrs, p2.instrs);
        assert_eq!(p1.data, p2.data);
        assert_eq!(p1.symbols, p2.symbols);
        assert_eq!(pretty_print(&p2), t1);
    }
}
