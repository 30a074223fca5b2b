//! Cycle-approximate simulator of a tiled RISC-V multicore: in-order RV64
//! cores with a small vector unit, private L1I/L1D/L1.5 caches, a shared
//! distributed L2 with a MESI directory, and three 2D-mesh NoCs.

pub mod cache;
pub mod cli;
pub mod coherence;
pub mod config;
pub mod cpu;
pub mod noc;
pub mod simkernel;
pub mod workload;
