use clap::{ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use reptiles_core::cli::{
    compute_speedup, model_check, read_report, run_experiment, speedup_csv, sweep, sweep_csv,
    CheckConfig, CliError, RunOptions, WorkloadSpec,
};
use reptiles_core::coherence::Mutation;
use reptiles_core::config::{validate, SimConfig};
use reptiles_core::workload::KernelName;
use std::path::PathBuf;
use std::process::ExitCode;

/// Every config field as `--field-name value`, applied over `--config`.
#[derive(Debug, Clone, Default)]
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

fn flag(field: &str) -> String {
    field.replace('_', "-")
}

fn config_fields() -> impl Iterator<Item = &'static str> {
    SimConfig::FIELDS.iter().copied()
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd.arg(
            clap::Arg::new("config")
                .long("config")
                .value_name("JSON")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Configuration file (defaults for anything missing)"),
        );
        for f in config_fields() {
            cmd = cmd.arg(
                clap::Arg::new(f)
                    .long(&*flag(f).leak())
                    .value_name("VALUE")
                    .help_heading("Configuration"),
            );
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(ConfigArgs {
            file: m.get_one::<PathBuf>("config").cloned(),
            overrides: config_fields()
                .filter_map(|f| m.get_one::<String>(f).map(|v| (f.to_string(), v.clone())))
                .collect(),
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<SimConfig, CliError> {
        let mut cfg = match &self.file {
            Some(p) => SimConfig::load(p)?,
            None => SimConfig::default(),
        };
        for (k, v) in &self.overrides {
            cfg.set_field(k, v).map_err(|reason| CliError::BadAxisValue {
                axis: k.clone(),
                value: v.clone(),
                reason,
            })?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
struct WorkloadArgs {
    /// Kernel name (vecadd_scalar, vecadd_vector, ep_parallel,
    /// shared_reduce), `trace:PATH` or `asm:PATH`.
    #[arg(long, default_value = "vecadd_scalar")]
    workload: String,
    #[arg(long, default_value_t = 4096)]
    n: u64,
    #[arg(long, default_value_t = 1)]
    ncores: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl WorkloadArgs {
    fn spec(&self) -> Result<WorkloadSpec, CliError> {
        if let Some(p) = self.workload.strip_prefix("trace:") {
            return Ok(WorkloadSpec::Trace {
                path: p.into(),
                ncores: self.ncores,
            });
        }
        if let Some(p) = self.workload.strip_prefix("asm:") {
            return Ok(WorkloadSpec::Asm {
                path: p.into(),
                ncores: self.ncores,
            });
        }
        let name: KernelName = self
            .workload
            .parse()
            .map_err(|e: reptiles_core::workload::KernelError| CliError::Kernel(e))?;
        Ok(WorkloadSpec::Kernel {
            name,
            n: self.n,
            ncores: self.ncores,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// Stop with an error after this many cycles (0 = unlimited).
    #[arg(long, default_value_t = 0)]
    max_cycles: u64,
    /// Write delivered coherence messages to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Save a checkpoint at this cycle (to --checkpoint).
    #[arg(long, requires = "checkpoint")]
    save_at: Option<u64>,
    #[arg(long, default_value = "checkpoint.json")]
    checkpoint: Option<PathBuf>,
    /// Resume from a checkpoint.
    #[arg(long)]
    restore: Option<PathBuf>,
    /// Replay every access against sequential memory.
    #[arg(long)]
    check_accesses: bool,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            max_cycles: self.max_cycles,
            trace: self.trace.clone(),
            save_at: self.save_at,
            checkpoint: self.checkpoint.clone(),
            restore: self.restore.clone(),
            check_accesses: self.check_accesses,
            corrupt_oracle: false,
        }
    }
}

#[derive(Parser)]
#[command(name = "reptiles", version, about = "Tiled RISC-V multicore simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one workload and print (or write) the JSON report.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        work: WorkloadArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run once per value of a config or workload parameter; CSV output.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        work: WorkloadArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 0)]
        max_cycles: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Speedup of each report over the baseline; plot-ready CSV.
    Speedup {
        baseline: PathBuf,
        others: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustively model-check the coherence protocol.
    Check {
        #[arg(long, default_value_t = 2)]
        tiles: u32,
        #[arg(long, default_value_t = 1)]
        blocks: u32,
        #[arg(long, default_value_t = 2)]
        ops: u32,
        #[arg(long, default_value_t = 64)]
        block_size: usize,
        /// skip-inv-ack, no-demote or silent-upgrade.
        #[arg(long)]
        mutation: Option<Mutation>,
        #[arg(long, default_value_t = 20_000_000)]
        max_states: usize,
    },
    /// Assemble and run a program; prints core 0's registers and the report.
    AsmRun {
        file: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        ncores: u32,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8, CliError> {
    match cmd {
        Cmd::Run { cfg, work, run, out } => {
            let cfg = validate(&cfg.load()?)?;
            let r = run_experiment(&cfg, &work.spec()?, &run.options())?;
            emit(&out, &(r.to_json() + "\n"))?;
            Ok(0)
        }
        Cmd::Sweep {
            cfg,
            work,
            axis,
            values,
            max_cycles,
            out,
        } => {
            let opts = RunOptions {
                max_cycles,
                ..RunOptions::default()
            };
            let rows = sweep(&cfg.load()?, &work.spec()?, &axis, &values, &opts)?;
            emit(&out, &sweep_csv(&rows))?;
            Ok(0)
        }
        Cmd::Speedup { baseline, others, out } => {
            let base = read_report(&baseline)?;
            let others = others.iter().map(|p| read_report(p)).collect::<Result<Vec<_>, _>>()?;
            emit(&out, &speedup_csv(&compute_speedup(&base, &others)?))?;
            Ok(0)
        }
        Cmd::Check {
            tiles,
            blocks,
            ops,
            block_size,
            mutation,
            max_states,
        } => {
            let r = model_check(&CheckConfig {
                tiles,
                blocks,
                ops_per_core: ops,
                block_size,
                mutation,
                max_states,
            })?;
            match &r.violation {
                None => {
                    println!("PASS: {} states, {} transitions", r.states, r.transitions);
                    Ok(0)
                }
                Some(v) => {
                    println!("FAIL: {:?}: {}", v.kind, v.detail);
                    for (i, step) in v.trace.iter().enumerate() {
                        println!("  {:3}. {step}", i + 1);
                    }
                    Ok(1)
                }
            }
        }
        Cmd::AsmRun {
            file,
            cfg,
            ncores,
            run,
            out,
        } => {
            let cfg = validate(&cfg.load()?)?;
            let spec = WorkloadSpec::Asm { path: file, ncores };
            let r = run_experiment(&cfg, &spec, &run.options())?;
            let c = &r.cores[0].counters;
            eprintln!(
                "core 0: {} instructions in {} cycles",
                c.instructions_retired, c.cycles
            );
            emit(&out, &(r.to_json() + "\n"))?;
            Ok(0)
        }
    }
}
