//! Python bindings for `fracfem`.
//!
//! ```python
//! import fracfem_py
//! s = fracfem_py.run("configs/regular.cfg")
//! print(s.p_min, s.p_max, [(f.id, f.side, f.total) for f in s.fluxes])
//! ```

use std::path::Path;

use fracfem::cli_io::{self, RunState};
use fracfem::flow::FluxResult;
use fracfem::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(get_all, frozen, from_py_object)]
#[derive(Clone, Debug)]
pub struct Flux {
    pub id: String,
    pub side: String,
    pub total: f64,
    pub dirichlet_share: f64,
    pub balance_residual: f64,
}

impl From<&FluxResult> for Flux {
    fn from(r: &FluxResult) -> Self {
        Flux {
            id: r.id.clone(),
            side: r.side.name().to_string(),
            total: r.total,
            dirichlet_share: r.dirichlet_share,
            balance_residual: r.balance_residual,
        }
    }
}

#[pymethods]
impl Flux {
    fn __repr__(&self) -> String {
        format!("Flux(id={:?}, side={:?}, total={:e})", self.id, self.side, self.total)
    }
}

#[pyclass(get_all, frozen, skip_from_py_object)]
#[derive(Clone, Debug)]
pub struct Summary {
    pub config_hash: String,
    pub cells: usize,
    pub nodes: usize,
    pub hanging: usize,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
    /// Dirichlet boundary flux followed by every interface side.
    pub fluxes: Vec<Flux>,
    /// Extremes of the concentration over all transport steps.
    pub c_min: Option<f64>,
    pub c_max: Option<f64>,
    pub pressure: Vec<f64>,
    pub files: Vec<String>,
}

#[pymethods]
impl Summary {
    fn __repr__(&self) -> String {
        format!("Summary(cells={}, nodes={}, hanging={}, fluxes={})", self.cells, self.nodes, self.hanging, self.fluxes.len())
    }
}

pub fn summarize(hash: &str, st: &RunState) -> Summary {
    let (p_min, p_max) = match &st.flow {
        Some(f) => {
            let (a, b) = f.min_max();
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let (c_min, c_max) = match &st.transport {
        Some(t) => {
            let lo = t.monitor.iter().map(|m| m.min).fold(f64::INFINITY, f64::min);
            let hi = t.monitor.iter().map(|m| m.max).fold(f64::NEG_INFINITY, f64::max);
            (Some(lo), Some(hi))
        }
        None => (None, None),
    };
    Summary {
        config_hash: hash.to_string(),
        cells: st.mesh.num_cells(),
        nodes: st.mesh.num_nodes(),
        hanging: st.mesh.num_hanging(),
        p_min,
        p_max,
        fluxes: st.dirichlet.iter().chain(&st.fluxes).map(Flux::from).collect(),
        c_min,
        c_max,
        pressure: st.flow.as_ref().map(|f| f.all.clone()).unwrap_or_default(),
        files: st.files.iter().map(|p| p.display().to_string()).collect(),
    }
}

/// Parses and validates a configuration file, returning its SHA-256.
#[pyfunction]
fn validate(path: &str) -> PyResult<String> {
    Ok(cli_io::load_config(Path::new(path)).map_err(to_py)?.hash)
}

/// Builds the mesh and writes `mesh.vtk`.
#[pyfunction]
fn mesh(py: Python<'_>, path: &str) -> PyResult<Summary> {
    let cfg = cli_io::load_config(Path::new(path)).map_err(to_py)?;
    let st = py.detach(|| cli_io::mesh_only(&cfg)).map_err(to_py)?;
    Ok(summarize(&cfg.hash, &st))
}

/// Full run: flow, flux post-processing and transport when configured.
#[pyfunction]
#[pyo3(signature = (path, interface=None))]
fn run(py: Python<'_>, path: &str, interface: Option<&str>) -> PyResult<Summary> {
    let cfg = cli_io::load_config(Path::new(path)).map_err(to_py)?;
    let st = py.detach(|| cli_io::run(&cfg, interface)).map_err(to_py)?;
    Ok(summarize(&cfg.hash, &st))
}

/// `(Q over side 1, Q over side 2)` for one interface.
#[pyfunction]
fn flux(py: Python<'_>, path: &str, interface: &str) -> PyResult<(f64, f64)> {
    let s = run(py, path, Some(interface))?;
    let q: Vec<f64> = s.fluxes.iter().filter(|f| f.id == interface).map(|f| f.total).collect();
    match q[..] {
        [a, b] => Ok((a, b)),
        _ => Err(PyRuntimeError::new_err(format!("interface '{interface}' produced {} flux records", q.len()))),
    }
}

#[pymodule]
fn fracfem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Flux>()?;
    m.add_class::<Summary>()?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(mesh, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(flux, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
