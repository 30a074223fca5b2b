//! Built-in evaluation kernels. Each generator returns the program and an
//! oracle: the memory contents the run must end with, computed on the host
//! without reference to the simulator.

use super::{assemble, Program, DATA_BASE};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LCG_A: u64 = 6364136223846793005;
pub const LCG_C: u64 = 1442695040888963407;
/// Software prefetch distance of the vector kernel, in bytes.
pub const PREFETCH_DISTANCE: u64 = 512;
const MAX_N: u64 = 1 << 26;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("unknown kernel '{0}'")]
    UnknownKernel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum KernelName {
    VecaddScalar,
    VecaddVector,
    EpParallel,
    SharedReduce,
}

impl KernelName {
    pub const ALL: [KernelName; 4] = [
        KernelName::VecaddScalar,
        KernelName::VecaddVector,
        KernelName::EpParallel,
        KernelName::SharedReduce,
    ];
    pub fn as_str(self) -> &'static str {
        match self {
            KernelName::VecaddScalar => "vecadd_scalar",
            KernelName::VecaddVector => "vecadd_vector",
            KernelName::EpParallel => "ep_parallel",
            KernelName::SharedReduce => "shared_reduce",
        }
    }
}

impl std::str::FromStr for KernelName {
    type Err = KernelError;
    fn from_str(s: &str) -> Result<Self, KernelError> {
        KernelName::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| KernelError::UnknownKernel(s.into()))
    }
}

impl std::fmt::Display for KernelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelParams {
    pub n: u64,
    pub ncores: u32,
    pub seed: u64,
}

/// Expected final memory contents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Oracle {
    pub regions: Vec<(u64, Vec<u8>)>,
}

impl Oracle {
    /// Test hook: make the oracle wrong on purpose.
    pub fn corrupt(&mut self) {
        if let Some((_, bytes)) = self.regions.first_mut() {
            bytes[0] ^= 0xff;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Kernel {
    pub name: KernelName,
    pub params: KernelParams,
    pub program: Program,
    pub oracle: Oracle,
}

/// One LCG step.
pub fn lcg_next(x: u64) -> u64 {
    x.wrapping_mul(LCG_A).wrapping_add(LCG_C)
}

/// State after `k` LCG steps from `x`, by repeated squaring of the affine map.
pub fn ep_jump(x: u64, mut k: u64) -> u64 {
    let (mut a, mut c) = (LCG_A, LCG_C);
    let (mut ra, mut rc) = (1u64, 0u64);
    while k > 0 {
        if k & 1 == 1 {
            ra = ra.wrapping_mul(a);
            rc = rc.wrapping_mul(a).wrapping_add(c);
        }
        c = c.wrapping_mul(a).wrapping_add(c);
        a = a.wrapping_mul(a);
        k >>= 1;
    }
    x.wrapping_mul(ra).wrapping_add(rc)
}

fn split(n: u64, ncores: u32, k: u32) -> (u64, u64) {
    let nc = ncores as u64;
    (k as u64 * n / nc, (k as u64 + 1) * n / nc)
}

fn table(rows: impl Iterator<Item = (u64, u64)>) -> Vec<u8> {
    rows.flat_map(|(a, b)| {
        let mut v = a.to_le_bytes().to_vec();
        v.extend(b.to_le_bytes());
        v
    })
    .collect()
}

pub const ARRAY_BASE: u64 = DATA_BASE + 0x1_0000;

/// Distance between the a, b and c arrays. The extra 17 blocks keep a[i],
/// b[i] and c[i] in different L1 sets.
pub fn vecadd_stride(n: u64) -> u64 {
    n.div_ceil(4096) * 4096 + 17 * 64
}

fn vecadd(params: KernelParams, vector: bool) -> Result<(Program, Oracle), KernelError> {
    let n = params.n;
    let d = vecadd_stride(n);
    let body = if vector {
        format!(
            "    sub s2, s1, s0
    beqz s2, done
loop:
    vsetvli t1, s2, e8, m1
    lb x0, {pf}(s0)
    lb x0, {pfb}(s0)
    vle8.v v1, (s0)
    addi t2, s0, {d}
    vle8.v v2, (t2)
    vadd.vv v3, v1, v2
    addi t3, s0, {d2}
    vse8.v v3, (t3)
    add s0, s0, t1
    sub s2, s2, t1
    bnez s2, loop
",
            pf = PREFETCH_DISTANCE,
            pfb = PREFETCH_DISTANCE + d,
            d2 = 2 * d
        )
    } else {
        format!(
            "    beq s0, s1, done
loop:
    lb t2, 0(s0)
    lb t3, {d}(s0)
    add t2, t2, t3
    sb t2, {d2}(s0)
    addi s0, s0, 1
    bne s0, s1, loop
",
            d2 = 2 * d
        )
    };
    let text = format!(
        "; c[i] = a[i] + b[i], core range from the bounds table
    li t0, {DATA_BASE}
    slli t1, a0, 4
    add t0, t0, t1
    ld s0, 0(t0)
    ld s1, 8(t0)
{body}done:
    halt
"
    );
    let mut prog = assemble(&text).expect("kernel text assembles");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut a = vec![0u8; n as usize];
    let mut b = vec![0u8; n as usize];
    rng.fill_bytes(&mut a);
    rng.fill_bytes(&mut b);
    let bounds = (0..params.ncores).map(|k| {
        let (s, e) = split(n, params.ncores, k);
        (ARRAY_BASE + s, ARRAY_BASE + e)
    });
    prog.data.push((DATA_BASE, table(bounds)));
    let c: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x.wrapping_add(*y)).collect();
    prog.data.push((ARRAY_BASE, a));
    prog.data.push((ARRAY_BASE + d, b));
    Ok((prog, Oracle { regions: vec![(ARRAY_BASE + 2 * d, c)] }))
}

pub const EP_PARTIALS: u64 = DATA_BASE + 0x1000;
pub const SYNC_COUNTER: u64 = DATA_BASE + 0x2000;
pub const SYNC_FLAG: u64 = DATA_BASE + 0x2040;
pub const EP_RESULT: u64 = DATA_BASE + 0x2080;

fn ep_parallel(params: KernelParams) -> Result<(Program, Oracle), KernelError> {
    let text = format!(
        "; each core advances its slice of one LCG stream and sums x >> 33
    li t0, {DATA_BASE}
    slli t1, a0, 4
    add t0, t0, t1
    ld s2, 0(t0)
    ld s1, 8(t0)
    li s4, {LCG_A}
    li s5, {LCG_C}
    li s3, 0
    beqz s1, reduce
loop:
    mul s2, s2, s4
    add s2, s2, s5
    srli t0, s2, 33
    add s3, s3, t0
    addi s1, s1, -1
    bnez s1, loop
reduce:
    li t0, {EP_PARTIALS}
    slli t1, a0, 6
    add t0, t0, t1
    sd s3, 0(t0)
    li t2, {SYNC_COUNTER}
    li t3, 1
    amoadd.d t4, t3, (t2)
    addi t4, t4, 1
    li t5, {SYNC_FLAG}
    bne t4, a1, spin
    sd t3, 0(t5)          ; last to arrive releases everyone
spin:
    ld t6, 0(t5)
    beqz t6, spin
    bnez a0, done
    li t0, {EP_PARTIALS}
    li s6, 0
    li s7, 0
sum:
    ld t1, 0(t0)
    add s6, s6, t1
    addi t0, t0, 64
    addi s7, s7, 1
    bne s7, a1, sum
    li t2, {EP_RESULT}
    sd s6, 0(t2)
done:
    halt
"
    );
    let mut prog = assemble(&text).expect("kernel text assembles");
    let rows = (0..params.ncores).map(|k| {
        let (s, e) = split(params.n, params.ncores, k);
        (ep_jump(params.seed, s), e - s)
    });
    prog.data.push((DATA_BASE, table(rows)));
    // Sequential reference over the whole stream.
    let mut x = params.seed;
    let mut sum = 0u64;
    for _ in 0..params.n {
        x = lcg_next(x);
        sum = sum.wrapping_add(x >> 33);
    }
    let oracle = Oracle {
        regions: vec![
            (EP_RESULT, sum.to_le_bytes().to_vec()),
            (SYNC_COUNTER, (params.ncores as u64).to_le_bytes().to_vec()),
            (SYNC_FLAG, 1u64.to_le_bytes().to_vec()),
        ],
    };
    Ok((prog, oracle))
}

fn shared_reduce(params: KernelParams) -> Result<(Program, Oracle), KernelError> {
    let text = format!(
        "; every core bumps one shared counter once per item
    li t0, {DATA_BASE}
    slli t1, a0, 4
    add t0, t0, t1
    ld s1, 8(t0)
    li t2, {SYNC_COUNTER}
    li t3, 1
    beqz s1, done
loop:
    amoadd.d x0, t3, (t2)
    addi s1, s1, -1
    bnez s1, loop
done:
    halt
"
    );
    let mut prog = assemble(&text).expect("kernel text assembles");
    let rows = (0..params.ncores).map(|k| {
        let (s, e) = split(params.n, params.ncores, k);
        (s, e - s)
    });
    prog.data.push((DATA_BASE, table(rows)));
    let oracle = Oracle {
        regions: vec![(SYNC_COUNTER, params.n.to_le_bytes().to_vec())],
    };
    Ok((prog, oracle))
}

pub fn gen_kernel(name: KernelName, params: KernelParams) -> Result<Kernel, KernelError> {
    if params.n == 0 || params.n > MAX_N {
        return Err(KernelError::ParamOutOfRange(format!(
            "n = {} (must be 1..={MAX_N})",
            params.n
        )));
    }
    if params.ncores == 0 || params.ncores > crate::config::MAX_TILES {
        return Err(KernelError::ParamOutOfRange(format!("ncores = {}", params.ncores)));
    }
    let (program, oracle) = match name {
        KernelName::VecaddScalar => vecadd(params, false)?,
        KernelName::VecaddVector => vecadd(params, true)?,
        KernelName::EpParallel => ep_parallel(params)?,
        KernelName::SharedReduce => shared_reduce(params)?,
    };
    Ok(Kernel {
        name,
        params,
        program,
        oracle,
    })
}
