use super::*;
use crate::config::{validate, SimConfig};
use crate::workload::{assemble, gen_kernel, parse_trace, KernelName, KernelParams};

fn cfg2x2() -> ValidatedConfig {
    validate(&SimConfig::default()).unwrap()
}

fn run_kernel(name: KernelName, n: u64, ncores: u32) -> Machine {
    let k = gen_kernel(name, KernelParams { n, ncores, seed: 7 }).unwrap();
    let mut m = Machine::new(&cfg2x2(), Workload::Program { program: k.program, ncores }).unwrap();
    m.enable_access_log();
    assert_eq!(m.run_until(50_000_000).unwrap(), RunOutcome::AllHalted);
    m.drain_all(100_000).unwrap();
    assert!(m.is_drained());
    for (a, bytes) in &k.oracle.regions {
        assert_eq!(&m.read_coherent(*a, bytes.len()), bytes, "{name} region {a:#x}");
    }
    check_access_log(m.initial_image(), m.access_log().unwrap()).unwrap();
    m
}

#[test]
fn fresh_run_until_zero() {
    let p = assemble("halt").unwrap();
    let mut m = Machine::new(&cfg2x2(), Workload::Program { program: p, ncores: 1 }).unwrap();
    assert_eq!(m.run_until(0).unwrap(), RunOutcome::StopCycle);
    assert_eq!(m.events_delivered(), 0);
    assert_eq!(m.cycle(), 0);
}

#[test]
fn store_then_load_through_hierarchy() {
    let p = assemble(
        "li t0, 0x10000040\n li t1, 1234\n sd t1, 0(t0)\n ld t2, 0(t0)\n addi t2, t2, 1\n sd t2, 8(t0)\n halt",
    )
    .unwrap();
    let mut m = Machine::new(&cfg2x2(), Workload::Program { program: p, ncores: 1 }).unwrap();
    m.enable_access_log();
    assert_eq!(m.run_until(100_000).unwrap(), RunOutcome::AllHalted);
    assert_eq!(m.core(0).unwrap().xregs[7], 1235);
    m.drain_all(10_000).unwrap();
    assert_eq!(m.read_coherent(0x1000_0048, 8), 1235u64.to_le_bytes());
    check_access_log(m.initial_image(), m.access_log().unwrap()).unwrap();
}

#[test]
fn kernels_match_oracles() {
    run_kernel(KernelName::VecaddScalar, 300, 1);
    run_kernel(KernelName::VecaddVector, 300, 1);
    run_kernel(KernelName::EpParallel, 64, 4);
    run_kernel(KernelName::SharedReduce, 64, 4);
}

#[test]
fn small_mshr_file_still_correct() {
    let mut s = SimConfig::default();
    s.l1d_mshrs = 1;
    s.block_size_bytes = 16;
    s.vlen_bits = 256;
    let cfg = validate(&s).unwrap();
    let k = gen_kernel(KernelName::VecaddVector, KernelParams { n: 200, ncores: 1, seed: 1 }).unwrap();
    let mut m = Machine::new(&cfg, Workload::Program { program: k.program, ncores: 1 }).unwrap();
    assert_eq!(m.run_until(10_000_000).unwrap(), RunOutcome::AllHalted);
    m.drain_all(100_000).unwrap();
    for (a, bytes) in &k.oracle.regions {
        assert_eq!(&m.read_coherent(*a, bytes.len()), bytes);
    }
}

#[test]
fn deterministic() {
    let a = run_kernel(KernelName::SharedReduce, 32, 4);
    let b = run_kernel(KernelName::SharedReduce, 32, 4);
    assert_eq!(a.stats(), b.stats());
}

#[test]
fn dropped_inv_ack_is_a_deadlock() {
    let t = "0,load,0x100000,8,0\n2,load,0x100000,8,200\n1,store,0x100000,8,600\n";
    let streams = parse_trace(t, 3, 1 << 30).unwrap();
    let mut m = Machine::new(&cfg2x2(), Workload::Trace(streams)).unwrap();
    m.inject_message_drop(MsgKind::InvAck);
    match m.run_until(100_000) {
        Err(SimError::DeadlockDetected { waiting, .. }) => {
            assert!(waiting.iter().any(|w| w.contains("L1.5 MSHR 0x100000")), "{waiting:?}");
        }
        other => panic!("expected deadlock, got {other:?}"),
    }
    assert_eq!(m.dropped.len(), 1);
}

#[test]
fn trace_stores_reach_memory() {
    let t = "0,store,0x2000,8,0\n1,load,0x2000,8,400\n";
    let streams = parse_trace(t, 2, 1 << 30).unwrap();
    let mut m = Machine::new(&cfg2x2(), Workload::Trace(streams)).unwrap();
    m.enable_access_log();
    assert_eq!(m.run_until(100_000).unwrap(), RunOutcome::AllHalted);
    let log = m.access_log().unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log[0].bytes, log[1].bytes);
    check_access_log(&[], log).unwrap();
}

#[test]
fn checkpoint_is_transparent() {
    let k = gen_kernel(KernelName::EpParallel, KernelParams { n: 64, ncores: 4, seed: 3 }).unwrap();
    let w = Workload::Program { program: k.program, ncores: 4 };
    let mut straight = Machine::new(&cfg2x2(), w.clone()).unwrap();
    straight.run_until(u64::MAX).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut a = Machine::new(&cfg2x2(), w).unwrap();
    assert_eq!(a.run_until(1000).unwrap(), RunOutcome::StopCycle);
    a.save_checkpoint(&path).unwrap();
    let mut b = Machine::restore_checkpoint(&path).unwrap();
    assert_eq!(b.cycle(), 1000);
    b.run_until(u64::MAX).unwrap();
    assert_eq!(b.stats(), straight.stats());
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert!(matches!(
        Machine::restore_checkpoint(&missing),
        Err(SimError::FileNotFound(_))
    ));
    let p = assemble("halt").unwrap();
    let m = Machine::new(&cfg2x2(), Workload::Program { program: p, ncores: 1 }).unwrap();
    let path = dir.path().join("ck.json");
    m.save_checkpoint(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["format_version"] = (CHECKPOINT_VERSION as u64 + 1).into();
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(
        Machine::restore_checkpoint(&path),
        Err(SimError::VersionMismatch { .. })
    ));
    std::fs::write(&path, "{\"format_version\": 1, \"cycle\": 0").unwrap();
    assert!(matches!(
        Machine::restore_checkpoint(&path),
        Err(SimError::CorruptCheckpoint(_))
    ));
}

#[test]
fn too_many_cores() {
    let p = assemble("halt").unwrap();
    assert!(matches!(
        Machine::new(&cfg2x2(), Workload::Program { program: p, ncores: 5 }),
        Err(SimError::TooManyCores { .. })
    ));
}
