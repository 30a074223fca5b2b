//! Experiment driver: single runs with oracle checking, parameter sweeps,
//! speedup tables and protocol model checking.

mod check;

pub use check::{model_check, CheckConfig, CheckError, CheckResult, Violation, ViolationKind};

use crate::cache::CacheStats;
use crate::coherence::HomeStats;
use crate::config::{validate, ConfigError, SimConfig, ValidatedConfig};
use crate::cpu::PerfCounters;
use crate::noc::NetStats;
use crate::simkernel::{check_access_log, Machine, MachineStats, RunOutcome, SimError, Workload};
use crate::workload::{
    assemble, gen_kernel, load_trace, AsmError, KernelError, KernelName, KernelParams, Oracle,
    TraceError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("oracle mismatch at {addr:#x}: expected {expected:02x?}, got {got:02x?}")]
    OracleMismatch {
        addr: u64,
        expected: Vec<u8>,
        got: Vec<u8>,
    },
    #[error("data-value check failed: {0}")]
    AccessOrderViolation(String),
    #[error("simulation did not finish within {0} cycles")]
    CycleLimit(u64),
    #[error("unknown sweep axis '{0}'")]
    UnknownAxis(String),
    #[error("bad value '{value}' for {axis}: {reason}")]
    BadAxisValue {
        axis: String,
        value: String,
        reason: String,
    },
    #[error("reports describe different workloads: '{0}' vs '{1}'")]
    WorkloadMismatch(String, String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// 1 for correctness failures, 2 for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::OracleMismatch { .. }
            | CliError::AccessOrderViolation(_)
            | CliError::CycleLimit(_) => 1,
            CliError::Sim(
                SimError::DeadlockDetected { .. } | SimError::Protocol(_) | SimError::Noc(_) | SimError::Cache(_),
            ) => 1,
            _ => 2,
        }
    }
}

/// What to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadSpec {
    Kernel {
        name: KernelName,
        n: u64,
        ncores: u32,
        seed: u64,
    },
    Trace {
        path: PathBuf,
        ncores: u32,
    },
    Asm {
        path: PathBuf,
        ncores: u32,
    },
}

impl WorkloadSpec {
    /// Identity used to match reports for speedup tables; excludes the core
    /// count.
    pub fn identity(&self) -> String {
        match self {
            WorkloadSpec::Kernel { name, n, seed, .. } => format!("{name} n={n} seed={seed}"),
            WorkloadSpec::Trace { path, .. } => format!("trace {}", path.display()),
            WorkloadSpec::Asm { path, .. } => format!("asm {}", path.display()),
        }
    }

    pub fn ncores(&self) -> u32 {
        match self {
            WorkloadSpec::Kernel { ncores, .. }
            | WorkloadSpec::Trace { ncores, .. }
            | WorkloadSpec::Asm { ncores, .. } => *ncores,
        }
    }

    /// Generate (or load) the workload and its oracle, if it has one.
    pub fn build(&self, cfg: &ValidatedConfig) -> Result<(Workload, Option<Oracle>), CliError> {
        match self {
            WorkloadSpec::Kernel { name, n, ncores, seed } => {
                let k = gen_kernel(
                    *name,
                    KernelParams {
                        n: *n,
                        ncores: *ncores,
                        seed: *seed,
                    },
                )?;
                Ok((
                    Workload::Program {
                        program: k.program,
                        ncores: *ncores,
                    },
                    Some(k.oracle),
                ))
            }
            WorkloadSpec::Trace { path, ncores } => {
                let s = load_trace(path, *ncores, cfg.source().memory_size_bytes)?;
                Ok((Workload::Trace(s), None))
            }
            WorkloadSpec::Asm { path, ncores } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                Ok((
                    Workload::Program {
                        program: assemble(&text)?,
                        ncores: *ncores,
                    },
                    None,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Give up after this many cycles (0 = no limit).
    pub max_cycles: u64,
    /// Write delivered coherence messages here.
    pub trace: Option<PathBuf>,
    /// Save a checkpoint at this cycle into `checkpoint`.
    pub save_at: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    /// Resume from this checkpoint instead of building a fresh machine.
    pub restore: Option<PathBuf>,
    /// Also replay every access against a sequential memory.
    pub check_accesses: bool,
    /// Test hook: make the workload oracle wrong.
    pub corrupt_oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreReport {
    pub core: u32,
    pub counters: PerfCounters,
    pub ipc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub stats: CacheStats,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Report {
    pub stats: HomeStats,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileCaches {
    pub tile: u32,
    pub l1i: CacheReport,
    pub l1d: CacheReport,
    pub l15: CacheReport,
    pub l2: L2Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetReport {
    pub net: String,
    pub stats: NetStats,
    pub mean_latency: f64,
    pub mean_block_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemReport {
    pub reads: u64,
    pub writes: u64,
    pub l1d_miss_latency_total: u64,
    pub l1d_misses_serviced: u64,
    pub mean_l1d_miss_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub config: SimConfig,
    pub workload: String,
    pub ncores: u32,
    pub total_cycles: u64,
    pub cores: Vec<CoreReport>,
    pub caches: Vec<TileCaches>,
    pub noc: Vec<NetReport>,
    pub memory: MemReport,
    pub events_delivered: u64,
    pub oracle_verified: bool,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn l2_miss_rate(s: &HomeStats) -> f64 {
    ratio(s.l2_misses, s.l2_hits + s.l2_misses)
}

impl StatsReport {
    fn from_stats(config: SimConfig, workload: String, ncores: u32, s: &MachineStats) -> Self {
        let cache = |c: &CacheStats| CacheReport {
            stats: c.clone(),
            miss_rate: c.miss_rate(),
        };
        StatsReport {
            config,
            workload,
            ncores,
            total_cycles: s.cycles,
            cores: s.cores[..ncores as usize]
                .iter()
                .enumerate()
                .map(|(i, c)| CoreReport {
                    core: i as u32,
                    counters: *c,
                    ipc: ratio(c.instructions_retired, c.cycles),
                })
                .collect(),
            caches: (0..s.l1d.len())
                .map(|t| TileCaches {
                    tile: t as u32,
                    l1i: cache(&s.l1i[t]),
                    l1d: cache(&s.l1d[t]),
                    l15: cache(&s.l15[t]),
                    l2: L2Report {
                        stats: s.l2[t].clone(),
                        miss_rate: l2_miss_rate(&s.l2[t]),
                    },
                })
                .collect(),
            noc: s
                .noc
                .iter()
                .enumerate()
                .map(|(i, n)| NetReport {
                    net: format!("noc{}", i + 1),
                    stats: n.clone(),
                    mean_latency: n.mean_latency(),
                    mean_block_latency: n.mean_block_latency(),
                })
                .collect(),
            memory: MemReport {
                reads: s.mem_reads,
                writes: s.mem_writes,
                l1d_miss_latency_total: s.l1d_miss_latency_total,
                l1d_misses_serviced: s.l1d_miss_count,
                mean_l1d_miss_latency: s.mean_l1d_miss_latency(),
            },
            events_delivered: s.events_delivered,
            oracle_verified: false,
        }
    }

    /// Every derived metric matches its raw counters.
    pub fn is_consistent(&self) -> bool {
        let eq = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        self.cores
            .iter()
            .all(|c| eq(c.ipc, ratio(c.counters.instructions_retired, c.counters.cycles)))
            && self.caches.iter().all(|t| {
                [&t.l1i, &t.l1d, &t.l15]
                    .iter()
                    .all(|c| eq(c.miss_rate, c.stats.miss_rate()))
                    && eq(t.l2.miss_rate, l2_miss_rate(&t.l2.stats))
            })
            && self.noc.iter().all(|n| {
                eq(n.mean_latency, ratio(n.stats.latency_total, n.stats.msgs_delivered))
                    && eq(
                        n.mean_block_latency,
                        ratio(n.stats.block_latency_total, n.stats.block_msgs),
                    )
            })
            && eq(
                self.memory.mean_l1d_miss_latency,
                ratio(self.memory.l1d_miss_latency_total, self.memory.l1d_misses_serviced),
            )
    }

    pub fn instructions(&self) -> u64 {
        self.cores.iter().map(|c| c.counters.instructions_retired).sum()
    }

    fn sum_caches(&self, f: impl Fn(&TileCaches) -> (u64, u64)) -> f64 {
        let (m, a) = self
            .caches
            .iter()
            .map(f)
            .fold((0, 0), |(x, y), (m, a)| (x + m, y + a));
        ratio(m, a)
    }

    pub fn l1d_miss_rate(&self) -> f64 {
        self.sum_caches(|t| (t.l1d.stats.misses, t.l1d.stats.accesses))
    }

    pub fn l15_miss_rate(&self) -> f64 {
        self.sum_caches(|t| (t.l15.stats.misses, t.l15.stats.accesses))
    }

    pub fn l2_miss_rate(&self) -> f64 {
        self.sum_caches(|t| (t.l2.stats.l2_misses, t.l2.stats.l2_hits + t.l2.stats.l2_misses))
    }

    pub fn mean_noc_latency(&self) -> f64 {
        let (l, m) = self.noc.iter().fold((0, 0), |(l, m), n| {
            (l + n.stats.latency_total, m + n.stats.msgs_delivered)
        });
        ratio(l, m)
    }

    pub fn mean_block_latency(&self) -> f64 {
        let (l, m) = self.noc.iter().fold((0, 0), |(l, m), n| {
            (l + n.stats.block_latency_total, m + n.stats.block_msgs)
        });
        ratio(l, m)
    }

    pub fn flits(&self) -> u64 {
        self.noc.iter().map(|n| n.stats.flits_delivered).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn verify(m: &Machine, oracle: Option<&Oracle>, check_accesses: bool) -> Result<bool, CliError> {
    if check_accesses {
        if let Some(log) = m.access_log() {
            check_access_log(m.initial_image(), log).map_err(CliError::AccessOrderViolation)?;
        }
    }
    let Some(oracle) = oracle else {
        return Ok(false);
    };
    let bs = m.config().block_size();
    for (addr, expected) in &oracle.regions {
        let got = m.read_coherent(*addr, expected.len());
        if &got != expected {
            // Report the first differing block-sized window.
            let i = got.iter().zip(expected).position(|(a, b)| a != b).unwrap();
            let lo = i / bs * bs;
            let hi = (lo + bs).min(got.len());
            return Err(CliError::OracleMismatch {
                addr: addr + lo as u64,
                expected: expected[lo..hi].to_vec(),
                got: got[lo..hi].to_vec(),
            });
        }
    }
    Ok(true)
}

/// Build (or restore) a machine, run it to completion, verify the oracle
/// and return the report.
pub fn run_experiment(
    cfg: &ValidatedConfig,
    spec: &WorkloadSpec,
    opts: &RunOptions,
) -> Result<StatsReport, CliError> {
    let (mut m, ncores) = match &opts.restore {
        Some(path) => {
            let m = Machine::restore_checkpoint(path)?;
            let n = m.tiles.iter().filter(|t| !matches!(t.front, crate::simkernel::Frontend::Idle)).count();
            (m, n as u32)
        }
        None => {
            let (w, oracle) = spec.build(cfg)?;
            let mut m = Machine::new(cfg, w)?;
            m.tag = spec.identity();
            m.oracle = oracle;
            if opts.check_accesses {
                m.enable_access_log();
            }
            if opts.trace.is_some() {
                m.enable_protocol_trace();
            }
            (m, spec.ncores())
        }
    };
    if opts.corrupt_oracle {
        if let Some(o) = &mut m.oracle {
            o.corrupt();
        }
    }
    let limit = if opts.max_cycles == 0 { u64::MAX } else { opts.max_cycles };
    if let (Some(at), Some(path)) = (opts.save_at, &opts.checkpoint) {
        if m.cycle() <= at && m.run_until(at.min(limit))? == RunOutcome::StopCycle {
            m.save_checkpoint(path)?;
        }
    }
    if m.run_until(limit)? != RunOutcome::AllHalted {
        return Err(CliError::CycleLimit(limit));
    }
    let stats = m.stats();
    m.drain_all(1_000_000)?;
    if let Some(path) = &opts.trace {
        let text = m.protocol_trace().unwrap_or(&[]).join("\n");
        std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    let verified = verify(&m, m.oracle.as_ref(), opts.check_accesses)?;
    let mut r = StatsReport::from_stats(m.config().source().clone(), m.tag.clone(), ncores, &stats);
    r.oracle_verified = verified;
    Ok(r)
}

/// Axes that change the workload rather than the machine.
pub const WORKLOAD_AXES: &[&str] = &["ncores", "n", "seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub report: StatsReport,
}

pub const SWEEP_COLUMNS: &[&str] = &[
    "axis",
    "value",
    "workload",
    "ncores",
    "total_cycles",
    "instructions",
    "ipc",
    "l1d_miss_rate",
    "l15_miss_rate",
    "l2_miss_rate",
    "mean_l1d_miss_latency",
    "mean_noc_latency",
    "mean_block_latency",
    "flits",
];

fn apply_axis(
    base: &SimConfig,
    spec: &WorkloadSpec,
    axis: &str,
    value: &str,
) -> Result<(ValidatedConfig, WorkloadSpec), CliError> {
    let bad = |reason: String| CliError::BadAxisValue {
        axis: axis.into(),
        value: value.into(),
        reason,
    };
    let mut cfg = base.clone();
    let mut spec = spec.clone();
    if WORKLOAD_AXES.contains(&axis) {
        let v: u64 = value.trim().parse().map_err(|_| bad("not an integer".into()))?;
        match (&mut spec, axis) {
            (WorkloadSpec::Kernel { ncores, .. }, "ncores")
            | (WorkloadSpec::Trace { ncores, .. }, "ncores")
            | (WorkloadSpec::Asm { ncores, .. }, "ncores") => *ncores = v as u32,
            (WorkloadSpec::Kernel { n, .. }, "n") => *n = v,
            (WorkloadSpec::Kernel { seed, .. }, "seed") => *seed = v,
            _ => return Err(bad("axis does not apply to this workload".into())),
        }
    } else if SimConfig::FIELDS.contains(&axis) || axis == "mshrs" {
        cfg.set_field(axis, value).map_err(bad)?;
    } else {
        return Err(CliError::UnknownAxis(axis.into()));
    }
    Ok((validate(&cfg)?, spec))
}

/// One run per value, in parallel; rows come back sorted by axis value.
pub fn sweep(
    base: &SimConfig,
    spec: &WorkloadSpec,
    axis: &str,
    values: &[String],
    opts: &RunOptions,
) -> Result<Vec<SweepRow>, CliError> {
    let runs = values
        .iter()
        .map(|v| apply_axis(base, spec, axis, v).map(|r| (v.clone(), r)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = runs
        .into_par_iter()
        .map(|(v, (cfg, spec))| {
            run_experiment(&cfg, &spec, opts).map(|report| SweepRow {
                axis: axis.into(),
                value: v,
                report,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| match (a.value.parse::<f64>(), b.value.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.value.cmp(&b.value),
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS).unwrap();
    for r in rows {
        let p = &r.report;
        w.write_record([
            r.axis.clone(),
            r.value.clone(),
            p.workload.clone(),
            p.ncores.to_string(),
            p.total_cycles.to_string(),
            p.instructions().to_string(),
            format!("{:.6}", ratio(p.instructions(), p.total_cycles)),
            format!("{:.6}", p.l1d_miss_rate()),
            format!("{:.6}", p.l15_miss_rate()),
            format!("{:.6}", p.l2_miss_rate()),
            format!("{:.6}", p.memory.mean_l1d_miss_latency),
            format!("{:.6}", p.mean_noc_latency()),
            format!("{:.6}", p.mean_block_latency()),
            p.flits().to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub ncores: u32,
    pub total_cycles: u64,
    pub speedup: f64,
}

/// `baseline.total_cycles / other.total_cycles` for each report; the
/// baseline itself is the first row.
pub fn compute_speedup(
    baseline: &StatsReport,
    others: &[StatsReport],
) -> Result<Vec<SpeedupRow>, CliError> {
    let mut rows = vec![SpeedupRow {
        ncores: baseline.ncores,
        total_cycles: baseline.total_cycles,
        speedup: 1.0,
    }];
    for o in others {
        if o.workload != baseline.workload {
            return Err(CliError::WorkloadMismatch(
                baseline.workload.clone(),
                o.workload.clone(),
            ));
        }
        rows.push(SpeedupRow {
            ncores: o.ncores,
            total_cycles: o.total_cycles,
            speedup: ratio(baseline.total_cycles, o.total_cycles),
        });
    }
    Ok(rows)
}

/// Plot-ready `threads,speedup` table.
pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threads", "total_cycles", "speedup"]).unwrap();
    for r in rows {
        w.write_record([
            r.ncores.to_string(),
            r.total_cycles.to_string(),
            format!("{:.6}", r.speedup),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn read_report(path: &Path) -> Result<StatsReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
