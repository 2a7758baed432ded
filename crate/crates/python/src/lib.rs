use ehvirt_core::assemble::{parse_module, ProtectedModule};
use ehvirt_core::harness::programs::gen_program_case;
use ehvirt_core::harness::scenarios::build_eh_scenarios;
use ehvirt_core::harness::suites::{run_eh_suite, run_isa_suite, run_program_suite, run_shadow_suite};
use ehvirt_core::pipeline::{self, ObfuscateOptions, ProgramManifest};
use ehvirt_core::process::{OutcomeKind, RunState, DEFAULT_STEP_LIMIT};
use ehvirt_core::shadow::diversity_report;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A program: functions, data, type table, entry and protect list.
#[pyclass(name = "Manifest", module = "ehvirt", from_py_object)]
#[derive(Clone)]
struct PyManifest {
    inner: ProgramManifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ProgramManifest::from_json(text).map(|inner| PyManifest { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn entry(&self) -> String {
        self.inner.entry.clone()
    }

    #[getter]
    fn protect(&self) -> Vec<String> {
        self.inner.protect.clone()
    }

    #[getter]
    fn functions(&self) -> Vec<(String, u64, u64)> {
        self.inner.functions.iter().map(|f| (f.name.clone(), f.fid, f.addr)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Manifest(entry={:?}, functions={}, protect={:?})", self.inner.entry, self.inner.functions.len(), self.inner.protect)
    }
}

/// A protected module (XJPM container).
#[pyclass(name = "Module", module = "ehvirt", from_py_object)]
#[derive(Clone)]
struct PyModuleObj {
    inner: ProtectedModule,
}

#[pymethods]
impl PyModuleObj {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        parse_module(data).map(|inner| PyModuleObj { inner }).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.serialize())
    }

    #[getter]
    fn eh_protected(&self) -> bool {
        self.inner.eh_protected()
    }

    #[getter]
    fn handler_count(&self) -> usize {
        self.inner.handlers.len()
    }

    #[getter]
    fn cell_count(&self) -> usize {
        self.inner.cell_count()
    }

    /// (fid, LSHandler, shadow code count) per shadowed function.
    #[getter]
    fn shadow(&self) -> Vec<(u64, u64, usize)> {
        self.inner.shadow.iter().map(|s| (s.fid(), s.handler, s.codes.len())).collect()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Module(eh_protected={}, handlers={}, cells={})",
            self.inner.eh_protected(),
            self.inner.handlers.len(),
            self.inner.cell_count()
        )
    }
}

#[pyclass(name = "RunResult", module = "ehvirt", get_all)]
struct PyRunResult {
    /// "return", "redirect", "exception" or "fault".
    kind: String,
    detail: String,
    rip: u64,
    gpr: Vec<u64>,
    flags: u64,
    checksum: Option<u64>,
    dispatches: u64,
    fallbacks: u64,
    interceptor_calls: u64,
    frames_per_raise: Vec<u64>,
}

#[pymethods]
impl PyRunResult {
    fn __repr__(&self) -> String {
        format!("RunResult(kind={:?}, rip={:#x}, dispatches={})", self.kind, self.rip, self.dispatches)
    }
}

#[pyfunction]
#[pyo3(signature = (manifest, seed=0, shadow_len=5, eh_protect=true))]
fn obfuscate(manifest: &PyManifest, seed: u64, shadow_len: usize, eh_protect: bool) -> PyResult<PyModuleObj> {
    let opts = ObfuscateOptions { seed, shadow_len, eh_protect, ..Default::default() };
    pipeline::obfuscate(&manifest.inner, &opts).map(|inner| PyModuleObj { inner }).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (manifest, module=None, entry=None, max_steps=DEFAULT_STEP_LIMIT))]
fn run(manifest: &PyManifest, module: Option<&PyModuleObj>, entry: Option<&str>, max_steps: u64) -> PyResult<PyRunResult> {
    let m = &manifest.inner;
    let (out, env) =
        pipeline::run_manifest(m, module.map(|x| x.inner.clone()), entry, RunState::new(max_steps)).map_err(err)?;
    let (kind, detail) = match &out.kind {
        OutcomeKind::NormalReturn => ("return", String::new()),
        OutcomeKind::TailRedirect(t) => ("redirect", format!("{:#x}", t)),
        OutcomeKind::ExceptionRaised(e) => ("exception", format!("type {} payload {:#x}", e.type_id, e.payload)),
        OutcomeKind::Fault(f) => ("fault", f.to_string()),
    };
    Ok(PyRunResult {
        kind: kind.into(),
        detail,
        rip: out.state.rip,
        gpr: out.state.gpr.to_vec(),
        flags: out.state.flags.to_bits(),
        checksum: m.checksum_addr.and_then(|a| env.memory.read_u64(a).ok()),
        dispatches: out.stats.dispatches,
        fallbacks: out.stats.fallbacks,
        interceptor_calls: out.stats.interceptor_calls,
        frames_per_raise: out.stats.frames_per_raise,
    })
}

/// (leaked function names, functions scanned, functions with a bad LSHandler).
#[pyfunction]
fn leak_scan(manifest: &PyManifest, module: &PyModuleObj) -> PyResult<(Vec<String>, usize, Vec<String>)> {
    let r = pipeline::leak_scan(&manifest.inner, &module.inner).map_err(err)?;
    Ok((r.leaked, r.scanned, r.bad_handlers))
}

/// JSON report of one suite: "isa", "program", "eh" or "shadow".
#[pyfunction]
#[pyo3(signature = (suite, cases, seed=0))]
fn verify(suite: &str, cases: u64, seed: u64) -> PyResult<String> {
    let rep = match suite {
        "isa" => run_isa_suite(seed, cases),
        "program" => run_program_suite(seed, cases),
        "eh" => run_eh_suite(seed, cases),
        "shadow" => run_shadow_suite(seed, cases as usize),
        _ => return Err(err(format!("unknown suite {}", suite))),
    };
    serde_json::to_string(&rep).map_err(err)
}

/// (distinct sequences, distinct type signatures).
#[pyfunction]
fn diversity(length: usize, samples: usize, seed: u64) -> (usize, usize) {
    let r = diversity_report(length, samples.max(1), seed);
    (r.distinct_sequences, r.distinct_signatures)
}

#[pyfunction]
fn gen_program(seed: u64, index: u64) -> PyManifest {
    PyManifest { inner: gen_program_case(seed, index).manifest }
}

#[pyfunction]
fn scenarios() -> Vec<(String, PyManifest)> {
    build_eh_scenarios().into_iter().map(|s| (s.name, PyManifest { inner: s.manifest })).collect()
}

#[pymodule]
fn ehvirt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifest>()?;
    m.add_class::<PyModuleObj>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(obfuscate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(leak_scan, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(gen_program, m)?)?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    Ok(())
}
