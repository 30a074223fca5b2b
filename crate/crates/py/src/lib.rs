//! Python bindings: configure, run and checkpoint simulations, model-check
//! the protocol. Reports come back as plain dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use reptiles_core::cli::{
    self, model_check as check, CheckConfig, CliError, RunOptions, StatsReport, WorkloadSpec,
};
use reptiles_core::coherence::{MsgKind, Mutation};
use reptiles_core::config::{validate, SimConfig, ValidatedConfig};
use reptiles_core::simkernel::{Machine, RunOutcome};
use reptiles_core::workload::KernelName;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    if e.exit_code() == 2 {
        value_err(e)
    } else {
        runtime_err(e)
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// Machine configuration. Keyword arguments override the defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: SimConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = PyConfig {
            inner: SimConfig::default(),
        };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                c.set(&k.extract::<String>()?, &v.str()?.to_string())?;
            }
        }
        Ok(c)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: SimConfig::from_json(text).map_err(value_err)?,
        })
    }

    fn set(&mut self, name: &str, value: &str) -> PyResult<()> {
        self.inner.set_field(name, value).map_err(value_err)
    }

    fn get<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
        let v = serde_json::to_value(&self.inner).map_err(runtime_err)?;
        let field = v
            .get(name)
            .ok_or_else(|| value_err(format!("unknown field '{name}'")))?;
        to_py(py, field)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Raises ValueError if the configuration is not buildable.
    fn validate(&self) -> PyResult<()> {
        validate(&self.inner).map(|_| ()).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Config({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

fn validated(cfg: Option<&PyConfig>) -> PyResult<ValidatedConfig> {
    let c = cfg.map(|c| c.inner.clone()).unwrap_or_default();
    validate(&c).map_err(value_err)
}

fn spec(workload: &str, n: u64, ncores: u32, seed: u64) -> PyResult<WorkloadSpec> {
    if let Some(p) = workload.strip_prefix("trace:") {
        return Ok(WorkloadSpec::Trace { path: p.into(), ncores });
    }
    if let Some(p) = workload.strip_prefix("asm:") {
        return Ok(WorkloadSpec::Asm { path: p.into(), ncores });
    }
    let name: KernelName = workload.parse().map_err(value_err)?;
    Ok(WorkloadSpec::Kernel { name, n, ncores, seed })
}

/// Run a workload to completion, check its oracle and return the report.
#[pyfunction]
#[pyo3(signature = (workload, config=None, n=4096, ncores=1, seed=1, check_accesses=false, max_cycles=0))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    workload: &str,
    config: Option<PyConfig>,
    n: u64,
    ncores: u32,
    seed: u64,
    check_accesses: bool,
    max_cycles: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = validated(config.as_ref())?;
    let spec = spec(workload, n, ncores, seed)?;
    let opts = RunOptions {
        check_accesses,
        max_cycles,
        ..RunOptions::default()
    };
    let r = py.detach(|| cli::run_experiment(&cfg, &spec, &opts)).map_err(cli_err)?;
    to_py(py, &r)
}

/// A machine that can be stepped, inspected and checkpointed.
#[pyclass(unsendable)]
struct Simulator {
    m: Machine,
}

#[pymethods]
impl Simulator {
    #[new]
    #[pyo3(signature = (workload, config=None, n=4096, ncores=1, seed=1))]
    fn new(workload: &str, config: Option<PyConfig>, n: u64, ncores: u32, seed: u64) -> PyResult<Self> {
        let cfg = validated(config.as_ref())?;
        let spec = spec(workload, n, ncores, seed)?;
        let (w, oracle) = spec.build(&cfg).map_err(cli_err)?;
        let mut m = Machine::new(&cfg, w).map_err(value_err)?;
        m.tag = spec.identity();
        m.oracle = oracle;
        Ok(Simulator { m })
    }

    #[staticmethod]
    fn restore(path: &str) -> PyResult<Self> {
        Ok(Simulator {
            m: Machine::restore_checkpoint(path.as_ref()).map_err(value_err)?,
        })
    }

    #[getter]
    fn cycle(&self) -> u64 {
        self.m.cycle()
    }

    /// Run up to `cycle`; True once every core has halted.
    fn run_until(&mut self, cycle: u64) -> PyResult<bool> {
        Ok(self.m.run_until(cycle).map_err(runtime_err)? == RunOutcome::AllHalted)
    }

    fn save_checkpoint(&self, path: &str) -> PyResult<()> {
        self.m.save_checkpoint(path.as_ref()).map_err(runtime_err)
    }

    /// Coherent view of memory, as the next reader would see it.
    fn read(&self, addr: u64, len: usize) -> Vec<u8> {
        self.m.read_coherent(addr, len)
    }

    /// Statistics so far; frozen at the halt cycle once every core is done.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.m.stats())
    }

    /// True if every oracle region holds its expected bytes.
    fn verify(&mut self) -> PyResult<bool> {
        self.m.drain_all(1_000_000).map_err(runtime_err)?;
        let Some(o) = &self.m.oracle else {
            return Ok(false);
        };
        Ok(o.regions.iter().all(|(a, want)| &self.m.read_coherent(*a, want.len()) == want))
    }
}

/// Exhaustively model-check the coherence protocol.
#[pyfunction]
#[pyo3(signature = (tiles=2, blocks=1, ops=2, block_size=64, mutation=None, max_states=20_000_000))]
fn model_check<'py>(
    py: Python<'py>,
    tiles: u32,
    blocks: u32,
    ops: u32,
    block_size: usize,
    mutation: Option<&str>,
    max_states: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mutation = mutation.map(str::parse::<Mutation>).transpose().map_err(value_err)?;
    let cfg = CheckConfig {
        tiles,
        blocks,
        ops_per_core: ops,
        block_size,
        mutation,
        max_states,
    };
    let r = py.detach(|| check(&cfg)).map_err(value_err)?;
    to_py(py, &r)
}

/// Flits needed for one message of `kind` (e.g. "DataS", "GetX").
#[pyfunction]
fn flit_count(kind: &str, block_size: usize, width_bits: u32) -> PyResult<usize> {
    let kind: MsgKind = serde_json::from_value(serde_json::Value::String(kind.into())).map_err(value_err)?;
    Ok(reptiles_core::noc::flit_count(kind, block_size, width_bits))
}

/// Speedup table for reports returned by `run`: list of
/// (ncores, total_cycles, speedup).
#[pyfunction]
fn speedup(baseline: &Bound<'_, PyAny>, others: Vec<Bound<'_, PyAny>>) -> PyResult<Vec<(u32, u64, f64)>> {
    let base: StatsReport = from_py(baseline)?;
    let others = others.iter().map(from_py).collect::<PyResult<Vec<StatsReport>>>()?;
    let rows = cli::compute_speedup(&base, &others).map_err(cli_err)?;
    Ok(rows.into_iter().map(|r| (r.ncores, r.total_cycles, r.speedup)).collect())
}

#[pymodule]
fn reptiles(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<Simulator>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(model_check, m)?)?;
    m.add_function(wrap_pyfunction!(flit_count, m)?)?;
    m.add_function(wrap_pyfunction!(speedup, m)?)?;
    Ok(())
}
