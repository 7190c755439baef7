//! Python bindings for the `madmm` solver crate.
//!
//! Exposes the two built-in control problems, the three ADMM drivers, and
//! the error/EOC helpers behind two classes:
//!
//! - [`PyProblem`] (`madmm_py.Problem`): a mesh hierarchy plus assembled
//!   finite-element levels for one problem; owns every solve.
//! - [`PyRunRecord`] (`madmm_py.RunRecord`): the per-iteration log and final
//!   iterate of one driver run, with JSON/CSV export.
//!
//! Vectors cross the boundary as plain `list[float]` (nodal coefficients in
//! mesh node order), keeping the module dependency-free on the Python side.
//!
//! Build with `cargo build --release -p madmm-py` and import the produced
//! `libmadmm_py.so` as `madmm_py` (see `python/smoke_test.py`).

// pyo3 0.22's generated trampolines trip this lint under newer clippy.
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::str::FromStr;

use madmm::admm::{
    run_classical, run_inexact, run_madmm, Algorithm, RunRecord, SolverConfig, Termination,
};
use madmm::problems::{self, ProblemInstance};

fn runtime_err(e: madmm::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// One of the built-in optimal-control problems on its mesh chain.
#[pyclass(name = "Problem", module = "madmm_py")]
pub struct PyProblem {
    inner: ProblemInstance,
    name: String,
}

#[pymethods]
impl PyProblem {
    /// Builds `example1` (disk) or `example2` (square) with mesh levels
    /// `0..=top_level`. For `example2`, `reference_level` sets the level on
    /// which the desired state's data term is sampled (default
    /// `top_level + 2`, the minimum the constructor accepts).
    #[new]
    #[pyo3(signature = (name, top_level, reference_level = None))]
    fn new(name: &str, top_level: u32, reference_level: Option<u32>) -> PyResult<Self> {
        let spec = match name {
            "example1" => problems::example1(),
            "example2" => problems::example2(reference_level.unwrap_or(top_level + 2))
                .map_err(runtime_err)?,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown problem `{other}` (expected `example1` or `example2`)"
                )))
            }
        };
        let inner = ProblemInstance::new(spec, top_level).map_err(runtime_err)?;
        Ok(PyProblem {
            inner,
            name: name.to_string(),
        })
    }

    /// Problem identifier (`example1` or `example2`).
    #[getter]
    fn name(&self) -> &str {
        &self.name
    }

    /// Tikhonov weight α.
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.spec().alpha
    }

    /// Box bounds `(a, b)`.
    #[getter]
    fn bounds(&self) -> (f64, f64) {
        self.inner.spec().bounds
    }

    /// Finest available mesh level.
    #[getter]
    fn top_level(&self) -> u32 {
        (self.inner.hierarchy().num_levels() - 1) as u32
    }

    /// `(state_dofs, control_dofs)` of one level.
    fn dofs(&self, level: u32) -> PyResult<(usize, usize)> {
        let a = self.inner.assembled(level).map_err(runtime_err)?;
        Ok((a.state_count(), a.control_count()))
    }

    /// Longest triangle edge of one level's mesh.
    fn mesh_size(&self, level: u32) -> PyResult<f64> {
        let hierarchy = self.inner.hierarchy();
        if level as usize >= hierarchy.num_levels() {
            return Err(PyValueError::new_err(format!(
                "level {level} out of range (top level {})",
                hierarchy.num_levels() - 1
            )));
        }
        Ok(hierarchy.level(level as usize).mesh_size())
    }

    /// Runs one driver (`madmm`, `inexact`, or `classical`) to `target_level`.
    #[pyo3(signature = (algorithm, target_level, eta_tol = 1e-6, max_iter = 500,
                        sigma = None, tau = None, xi_scale = 1e-3, start_level = None))]
    #[allow(clippy::too_many_arguments)]
    fn solve(
        &self,
        py: Python<'_>,
        algorithm: &str,
        target_level: u32,
        eta_tol: f64,
        max_iter: usize,
        sigma: Option<f64>,
        tau: Option<f64>,
        xi_scale: f64,
        start_level: Option<u32>,
    ) -> PyResult<PyRunRecord> {
        let algorithm = Algorithm::from_str(algorithm)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let mut config = SolverConfig::new(algorithm);
        config.eta_tol = eta_tol;
        config.max_iter = max_iter;
        config.sigma = sigma;
        config.tau = tau;
        config.xi_scale = xi_scale;
        config.start_level = start_level;
        let record = py
            .allow_threads(|| match algorithm {
                Algorithm::Madmm => run_madmm(&self.inner, &config, target_level),
                Algorithm::Inexact => run_inexact(&self.inner, target_level, &config),
                Algorithm::Classical => run_classical(&self.inner, target_level, &config),
            })
            .map_err(runtime_err)?;
        Ok(PyRunRecord { inner: record })
    }

    /// `L²` distance of a control iterate to the manufactured exact control
    /// (`example2` only).
    fn error_vs_exact(&self, level: u32, u: Vec<f64>) -> PyResult<f64> {
        self.inner.error_vs_exact(level, &u).map_err(runtime_err)
    }

    /// High-accuracy control on `fine_level` for use as a reference.
    fn reference_solution(&self, py: Python<'_>, fine_level: u32) -> PyResult<Vec<f64>> {
        let config = SolverConfig::new(Algorithm::Madmm);
        py.allow_threads(|| problems::reference_solution(&self.inner, fine_level, &config))
            .map_err(runtime_err)
    }

    /// `L²` distance between a level iterate and a finer-level reference,
    /// both prolonged to the reference level.
    fn error_vs_reference(
        &self,
        level: u32,
        u: Vec<f64>,
        reference_level: u32,
        reference: Vec<f64>,
    ) -> PyResult<f64> {
        self.inner
            .error_vs_reference(level, &u, reference_level, &reference)
            .map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(name='{}', top_level={}, alpha={})",
            self.name,
            self.top_level(),
            self.alpha()
        )
    }
}

/// Log of one driver run: iteration rows plus the final iterate.
#[pyclass(name = "RunRecord", module = "madmm_py")]
pub struct PyRunRecord {
    inner: RunRecord,
}

#[pymethods]
impl PyRunRecord {
    /// Driver that produced the record.
    #[getter]
    fn algorithm(&self) -> String {
        self.inner.algorithm.to_string()
    }

    /// Problem identifier echo.
    #[getter]
    fn problem(&self) -> &str {
        &self.inner.problem
    }

    /// Target (finest) level of the run.
    #[getter]
    fn target_level(&self) -> u32 {
        self.inner.target_level
    }

    /// Number of logged iterations.
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations()
    }

    /// `"tolerance"` if the η test passed, `"max_iter"` if the cap hit.
    #[getter]
    fn termination(&self) -> &'static str {
        match self.inner.termination {
            Termination::Tolerance => "tolerance",
            Termination::MaxIter => "max_iter",
        }
    }

    /// `max(η₁..η₅)` of the last iteration.
    #[getter]
    fn final_eta(&self) -> f64 {
        self.inner.final_eta()
    }

    /// Wall-clock seconds of the whole run.
    #[getter]
    fn total_wall_time(&self) -> f64 {
        self.inner.total_wall_time
    }

    /// Final control iterate (control-node coefficients).
    #[getter]
    fn u(&self) -> Vec<f64> {
        self.inner.final_state.u.clone()
    }

    /// Final splitting variable; always box-feasible.
    #[getter]
    fn z(&self) -> Vec<f64> {
        self.inner.final_state.z.clone()
    }

    /// Final multiplier.
    #[getter]
    fn multiplier(&self) -> Vec<f64> {
        self.inner.final_state.lambda.clone()
    }

    /// Final state iterate (interior-node coefficients).
    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.final_state.y.clone()
    }

    /// Per-iteration `max(η₁..η₅)`.
    fn eta_history(&self) -> Vec<f64> {
        self.inner.rows.iter().map(|r| r.eta).collect()
    }

    /// Per-iteration mesh level.
    fn level_history(&self) -> Vec<u32> {
        self.inner.rows.iter().map(|r| r.level).collect()
    }

    /// All logged rows as dictionaries (one per iteration).
    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new_bound(py);
                d.set_item("k", r.k)?;
                d.set_item("level", r.level)?;
                d.set_item("dofs", r.dofs)?;
                d.set_item("eta1", r.eta1)?;
                d.set_item("eta2", r.eta2)?;
                d.set_item("eta3", r.eta3)?;
                d.set_item("eta4", r.eta4)?;
                d.set_item("eta5", r.eta5)?;
                d.set_item("eta", r.eta)?;
                d.set_item("R", r.r)?;
                d.set_item("delta_norm", r.delta_norm)?;
                d.set_item("inner_iterations", r.inner_iterations)?;
                Ok(d)
            })
            .collect()
    }

    /// Full record as a JSON document (schema shared with the CLI).
    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(runtime_err)
    }

    /// Parses a record previously produced by [`to_json`](Self::to_json).
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyRunRecord {
            inner: RunRecord::from_json(text).map_err(runtime_err)?,
        })
    }

    /// Iteration rows as CSV (same columns as the CLI's per-run files).
    fn csv(&self) -> String {
        self.inner.csv_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunRecord(algorithm='{}', target_level={}, iterations={}, termination='{}')",
            self.algorithm(),
            self.inner.target_level,
            self.inner.iterations(),
            self.termination()
        )
    }
}

/// Experimental order of convergence from two `(h, error)` pairs.
#[pyfunction]
fn eoc(h1: f64, e1: f64, h2: f64, e2: f64) -> f64 {
    problems::eoc(h1, e1, h2, e2)
}

/// Module definition: classes plus the EOC helper.
#[pymodule]
fn madmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyRunRecord>()?;
    m.add_function(wrap_pyfunction!(eoc, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
