//! Python module `ufm_lab`. Matrices cross the boundary as lists of rows;
//! labels are 0-based.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ufm_lab::calibration::{self, LogitDataset};
use ufm_lab::closed_form::{self, partial_orthogonal};
use ufm_lab::descent::{self, OptimizerConfig};
use ufm_lab::nc_metrics::collapse_summary;
use ufm_lab::spectral::{self, HessianOptions, SpectrumReport};
use ufm_lab::theory_checks::{self, CheckOptions};
use ufm_lab::ufm::{self, ModelState};
use ufm_lab::UfmError;

type Rows = Vec<Vec<f64>>;
/// (lower, upper, mean confidence, accuracy, count)
type Bin = (f64, f64, f64, f64, usize);

fn py_err(e: UfmError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_row_iterator(
        r,
        c,
        rows.iter().flatten().copied(),
    ))
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(name = "ProblemConfig", frozen, from_py_object)]
#[derive(Clone)]
struct PyProblemConfig {
    inner: ufm::ProblemConfig,
}

#[pymethods]
impl PyProblemConfig {
    /// `lambda_h` and `lambda_b` default to `lambda_w`.
    #[new]
    #[pyo3(signature = (k, n, d, delta, lambda_w, lambda_h=None, lambda_b=None))]
    fn new(
        k: usize,
        n: usize,
        d: usize,
        delta: f64,
        lambda_w: f64,
        lambda_h: Option<f64>,
        lambda_b: Option<f64>,
    ) -> PyResult<Self> {
        let inner = ufm::ProblemConfig::new(
            k,
            n,
            d,
            delta,
            lambda_w,
            lambda_h.unwrap_or(lambda_w),
            lambda_b.unwrap_or(lambda_w),
        )
        .map_err(py_err)?;
        Ok(PyProblemConfig { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }
    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }
    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }
    #[getter]
    fn lambda_w(&self) -> f64 {
        self.inner.lambda_w
    }
    #[getter]
    fn lambda_h(&self) -> f64 {
        self.inner.lambda_h
    }
    #[getter]
    fn lambda_b(&self) -> f64 {
        self.inner.lambda_b
    }

    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }

    /// `sqrt(KN) λ_Z + δ`; the minimizer is trivial at or above 1.
    fn regime_threshold(&self) -> f64 {
        closed_form::regime_threshold(&self.inner)
    }

    fn logit_scale(&self) -> f64 {
        closed_form::logit_scale(&self.inner)
    }

    fn class_probabilities(&self) -> (f64, f64) {
        closed_form::class_probabilities(&self.inner)
    }

    fn optimal_loss(&self) -> PyResult<f64> {
        closed_form::optimal_loss(&self.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ProblemConfig(k={}, n={}, d={}, delta={}, lambda_w={}, lambda_h={}, lambda_b={})",
            c.k, c.n, c.d, c.delta, c.lambda_w, c.lambda_h, c.lambda_b
        )
    }
}

fn state_from(w: &Rows, h: &Rows, b: Vec<f64>) -> PyResult<ModelState> {
    Ok(ModelState {
        w: to_matrix(w)?,
        h: to_matrix(h)?,
        b: DVector::from_vec(b),
    })
}

/// `(W, H, b)` of the closed-form minimizer; `seed` picks a random embedding.
#[pyfunction]
#[pyo3(signature = (cfg, seed=None))]
fn global_minimizer(cfg: &PyProblemConfig, seed: Option<u64>) -> PyResult<(Rows, Rows, Vec<f64>)> {
    let c = &cfg.inner;
    let p = partial_orthogonal(c.d, c.k, seed).map_err(py_err)?;
    let s = closed_form::global_minimizer(c, &p).map_err(py_err)?;
    Ok((to_rows(&s.w), to_rows(&s.h), s.b.iter().copied().collect()))
}

#[pyfunction]
fn loss(cfg: &PyProblemConfig, w: Rows, h: Rows, b: Vec<f64>) -> PyResult<f64> {
    ufm::ufm_loss(&state_from(&w, &h, b)?, &cfg.inner).map_err(py_err)
}

#[pyfunction]
fn gradient(
    cfg: &PyProblemConfig,
    w: Rows,
    h: Rows,
    b: Vec<f64>,
) -> PyResult<(Rows, Rows, Vec<f64>)> {
    let g = ufm::ufm_gradient(&state_from(&w, &h, b)?, &cfg.inner).map_err(py_err)?;
    Ok((to_rows(&g.w), to_rows(&g.h), g.b.iter().copied().collect()))
}

/// NC1, NC2, NC3 and mean column norms; undefined entries are NaN.
#[pyfunction]
fn nc_metrics<'py>(
    py: Python<'py>,
    cfg: &PyProblemConfig,
    w: Rows,
    h: Rows,
    b: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = collapse_summary(&state_from(&w, &h, b)?, &cfg.inner).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("nc1", s.nc1)?;
    d.set_item("nc2", s.nc2)?;
    d.set_item("nc3", s.nc3)?;
    d.set_item("w_norm", s.norms.classifier)?;
    d.set_item("h_mean_norm", s.norms.class_means)?;
    Ok(d)
}

fn pairs(rep: &SpectrumReport) -> Vec<(f64, usize)> {
    rep.eigenpairs
        .iter()
        .map(|e| (e.value, e.multiplicity))
        .collect()
}

/// Analytic and numeric Hessian spectra at the closed-form minimizer.
#[pyfunction]
fn spectra<'py>(py: Python<'py>, cfg: &PyProblemConfig) -> PyResult<Bound<'py, PyDict>> {
    let c = &cfg.inner;
    let p = partial_orthogonal(c.d, c.k, None).map_err(py_err)?;
    let s = closed_form::global_minimizer(c, &p).map_err(py_err)?;
    let a = spectral::analyze(&s, c, HessianOptions::default()).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("feature_analytic", pairs(&a.feature_analytic))?;
    d.set_item("feature_numeric", pairs(&a.feature_numeric))?;
    d.set_item("classifier_analytic", pairs(&a.classifier_analytic))?;
    d.set_item("classifier_numeric", pairs(&a.classifier_numeric))?;
    d.set_item("kappa_feature", a.feature_analytic.condition_number)?;
    d.set_item("kappa_classifier", a.classifier_analytic.condition_number)?;
    d.set_item(
        "max_relative_deviation",
        a.feature_comparison
            .max_relative_deviation
            .max(a.classifier_comparison.max_relative_deviation),
    )?;
    d.set_item("degenerate", a.classifier_analytic.degenerate)?;
    Ok(d)
}

/// Gradient descent; returns the recorded trajectory and final state.
#[pyfunction]
#[pyo3(signature = (
    cfg, learning_rate=0.5, momentum=0.9, max_iters=50_000, loss_tol=1e-10,
    record_every=100, init_scale=1.0, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn run_descent<'py>(
    py: Python<'py>,
    cfg: &PyProblemConfig,
    learning_rate: f64,
    momentum: f64,
    max_iters: usize,
    loss_tol: f64,
    record_every: usize,
    init_scale: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let opt = OptimizerConfig {
        learning_rate,
        momentum,
        max_iters,
        loss_tol,
        record_every,
        init_scale,
        seed,
    };
    let out = descent::run(&cfg.inner, &opt).map_err(py_err)?;
    let rows = out
        .trajectory
        .rows
        .iter()
        .map(|r| {
            let row = PyDict::new(py);
            row.set_item("iter", r.iter)?;
            row.set_item("loss", r.loss)?;
            row.set_item("nc1", r.nc1)?;
            row.set_item("nc2", r.nc2)?;
            row.set_item("nc3", r.nc3)?;
            row.set_item("w_norm", r.w_norm)?;
            row.set_item("h_mean_norm", r.h_mean_norm)?;
            row.set_item("grad_norm", r.grad_norm)?;
            row.set_item("loss_gap", r.loss_gap)?;
            row.set_item("logit_gap", r.logit_gap)?;
            Ok(row)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let d = PyDict::new(py);
    d.set_item("converged", out.converged)?;
    d.set_item("iterations", out.iterations)?;
    d.set_item("optimal_loss", out.optimal_loss)?;
    d.set_item("trajectory", rows)?;
    d.set_item("w", to_rows(&out.state.w))?;
    d.set_item("h", to_rows(&out.state.h))?;
    d.set_item("b", out.state.b.iter().copied().collect::<Vec<_>>())?;
    Ok(d)
}

/// Logits as one row per sample.
fn dataset(logits: &Rows, labels: Vec<usize>) -> PyResult<LogitDataset> {
    LogitDataset::new(to_matrix(logits)?.transpose(), labels).map_err(py_err)
}

/// `(ece, [(lower, upper, confidence, accuracy, count)])`.
#[pyfunction]
#[pyo3(signature = (logits, labels, bins=calibration::DEFAULT_BINS))]
fn ece(logits: Rows, labels: Vec<usize>, bins: usize) -> PyResult<(f64, Vec<Bin>)> {
    let rep = calibration::ece(&dataset(&logits, labels)?, bins).map_err(py_err)?;
    let b = rep
        .bins
        .iter()
        .map(|b| (b.lower, b.upper, b.mean_confidence, b.accuracy, b.count))
        .collect();
    Ok((rep.ece, b))
}

/// `(temperature, nll_before, nll_after)`.
#[pyfunction]
fn fit_temperature(logits: Rows, labels: Vec<usize>) -> PyResult<(f64, f64, f64)> {
    let f = calibration::fit_temperature(&dataset(&logits, labels)?).map_err(py_err)?;
    Ok((f.temperature, f.nll_before, f.nll_after))
}

#[pyfunction]
fn prediction_entropy(logits: Rows) -> PyResult<f64> {
    let m = to_matrix(&logits)?;
    let labels = vec![0; m.nrows()];
    Ok(calibration::prediction_entropy(&dataset(&logits, labels)?))
}

#[pyfunction]
fn nuclear_norm(z: Rows) -> PyResult<f64> {
    Ok(theory_checks::nuclear_norm(&to_matrix(&z)?))
}

/// `[(name, passed, value)]` for every theory check.
#[pyfunction]
#[pyo3(signature = (perturbation=0.0, seed=0))]
fn run_checks(perturbation: f64, seed: u64) -> PyResult<Vec<(String, bool, f64)>> {
    let res = theory_checks::run_checks(&CheckOptions { perturbation, seed }).map_err(py_err)?;
    Ok(res
        .into_iter()
        .map(|c| (c.name, c.passed, c.value))
        .collect())
}

#[pymodule]
#[pyo3(name = "ufm_lab")]
fn ufm_lab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblemConfig>()?;
    m.add_function(wrap_pyfunction!(global_minimizer, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradient, m)?)?;
    m.add_function(wrap_pyfunction!(nc_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(spectra, m)?)?;
    m.add_function(wrap_pyfunction!(run_descent, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(fit_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(nuclear_norm, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
