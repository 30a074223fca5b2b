use std::path::Path;
use std::process::{Command, Output};

fn reptiles(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reptiles"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_prints_verified_report() {
    let out = reptiles(&["run", "--workload", "ep_parallel", "--n", "1024", "--ncores", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["oracle_verified"], true);
    assert_eq!(r["ncores"], 2);
    assert!(r["total_cycles"].as_u64().unwrap() > 0);
}

#[test]
fn config_flags_and_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"block_size_bytes": 32}"#).unwrap();
    let out = reptiles(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--noc-width-bits",
        "128",
        "--n",
        "256",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["config"]["block_size_bytes"], 32);
    assert_eq!(r["config"]["noc_width_bits"], 128);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(reptiles(&["run", "--block-size-bytes", "24"]).status.code(), Some(2));
    assert_eq!(reptiles(&["run", "--workload", "nbody"]).status.code(), Some(2));
    assert_eq!(reptiles(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        reptiles(&["sweep", "--axis", "colour", "--values", "1,2"]).status.code(),
        Some(2)
    );
}

#[test]
fn check_passes_and_mutation_fails() {
    let ok = reptiles(&["check", "--tiles", "2", "--blocks", "1", "--ops", "2"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).starts_with("PASS"));
    let bad = reptiles(&["check", "--mutation", "silent-upgrade"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = stdout(&bad);
    assert!(text.starts_with("FAIL"), "{text}");
    assert!(text.lines().count() > 2, "counterexample trace printed");
}

#[test]
fn sweep_then_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = reptiles(&[
        "sweep",
        "--workload",
        "ep_parallel",
        "--n",
        "2048",
        "--axis",
        "ncores",
        "--values",
        "2,1,4",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let values: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["1", "2", "4"]);

    let report = |n: &str| {
        let p = dir.path().join(format!("r{n}.json"));
        let out = reptiles(&[
            "run", "--workload", "ep_parallel", "--n", "2048", "--ncores", n, "--out",
            p.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        p
    };
    let (r1, r4) = (report("1"), report("4"));
    let out = reptiles(&["speedup", r1.to_str().unwrap(), r4.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("threads,total_cycles,speedup"));
    let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert_eq!(last[0], "4");
    assert!(last[2].parse::<f64>().unwrap() > 2.0);
}

#[test]
fn checkpoint_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    let args = ["run", "--workload", "shared_reduce", "--n", "128", "--ncores", "4"];
    let straight = reptiles(&args);
    let mut save = args.to_vec();
    save.extend(["--save-at", "700", "--checkpoint", ck.to_str().unwrap()]);
    assert!(reptiles(&save).status.success());
    assert!(ck.exists());
    let resumed = reptiles(&["run", "--restore", ck.to_str().unwrap()]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(stdout(&resumed), stdout(&straight));
}

#[test]
fn asm_run_and_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("count.s");
    std::fs::write(
        &src,
        "    li t0, 0x200000
    li t1, 1
    amoadd.d x0, t1, (t0)
    halt
",
    )
    .unwrap();
    let trace = dir.path().join("msgs.txt");
    let out = reptiles(&[
        "asm-run",
        src.to_str().unwrap(),
        "--ncores",
        "4",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["ncores"], 4);
    let msgs = std::fs::read_to_string(&trace).unwrap();
    assert!(msgs.lines().count() >= 4, "{msgs}");
    assert!(!Path::new("checkpoint.json").exists());
}

#[test]
fn trace_workload() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.csv");
    std::fs::write(&t, "core,op,addr,size,gap\n0,store,0x4000,8,0\n1,load,0x4000,8,300\n").unwrap();
    let w = format!("trace:{}", t.display());
    let out = reptiles(&["run", "--workload", &w, "--ncores", "2", "--check-accesses"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
