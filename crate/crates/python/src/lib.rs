//! Python bindings: gate algebra, a DGConv layer type, and the CLI entry points.
//!
//! Tensors cross the boundary as flat lists in NCHW / (k, k, C_in, C_out) order.

use std::path::Path;

use dgconv::app::{self, VerifyOptions};
use dgconv::gates::{self, BinaryGates};
use dgconv::{compile, ConvGeometry, DGConvLayer, DgError, FeatureMap, GateVector, KernelTensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn err(e: DgError) -> PyErr {
    match e {
        DgError::Io(_) | DgError::Divergence { .. } | DgError::Invariant(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, S: serde::Serialize>(py: Python<'py>, v: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn bits(g: &[u8]) -> PyResult<BinaryGates> {
    if g.iter().any(|&b| b > 1) {
        return Err(PyValueError::new_err("binary gates must be 0 or 1"));
    }
    Ok(BinaryGates::from_bits(g))
}

/// Sign binarization: 1 where the gate is >= 0.
#[pyfunction]
fn binarize(tilde_g: Vec<f64>) -> PyResult<Vec<u32>> {
    Ok(gates::binarize(&tilde_g).map_err(err)?.to_bits().into_iter().map(u32::from).collect())
}

#[pyfunction]
fn group_count(g: Vec<u8>) -> PyResult<usize> {
    Ok(gates::group_count(&bits(&g)?))
}

#[pyfunction]
fn layer_complexity(g: Vec<u8>, channels: usize) -> PyResult<u64> {
    gates::layer_complexity(&bits(&g)?, channels).map_err(err)
}

/// Binary relationship matrix as nested rows of 0/1.
#[pyfunction]
fn relationship_matrix(g: Vec<u8>) -> PyResult<Vec<Vec<u32>>> {
    let u = gates::build_relationship_matrix(&bits(&g)?);
    Ok((0..u.rows()).map(|p| (0..u.cols()).map(|q| u.get(p, q) as u32).collect()).collect())
}

/// Channel order that makes the relationship matrix block diagonal.
#[pyfunction]
fn block_permutation(g: Vec<u8>) -> PyResult<Vec<usize>> {
    Ok(gates::block_diagonal_permutation(&bits(&g)?))
}

#[pyclass(name = "DGConvLayer")]
struct PyLayer {
    inner: DGConvLayer<f64>,
}

#[pymethods]
impl PyLayer {
    #[new]
    #[pyo3(signature = (kernel, k, in_channels, out_channels, gates, stride=1, padding=None))]
    fn new(
        kernel: Vec<f64>,
        k: usize,
        in_channels: usize,
        out_channels: usize,
        gates: Vec<f64>,
        stride: usize,
        padding: Option<usize>,
    ) -> PyResult<Self> {
        let w = KernelTensor::from_vec(k, in_channels, out_channels, kernel).map_err(err)?;
        let geom = ConvGeometry::new(stride, padding.unwrap_or(k / 2));
        let inner = DGConvLayer::new(w, GateVector::new(gates).map_err(err)?, geom).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn gates(&self) -> Vec<f64> {
        self.inner.gates().values().to_vec()
    }

    #[getter]
    fn groups(&self) -> usize {
        self.inner.group_count()
    }

    #[getter]
    fn complexity(&self) -> u64 {
        self.inner.complexity()
    }

    fn set_gates(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_gates(&values).map_err(err).map(|_| ())
    }

    /// Returns `(output, (n, c, h, w))`.
    fn forward(&self, x: Vec<f64>, n: usize, h: usize, w: usize) -> PyResult<(Vec<f64>, (usize, usize, usize, usize))> {
        let x = FeatureMap::from_vec(n, self.inner.in_channels(), h, w, x).map_err(err)?;
        let y = self.inner.forward(&x).map_err(err)?;
        Ok((y.data().to_vec(), y.shape()))
    }

    /// Same as `forward` through the compiled permuted group convolution.
    fn forward_compiled(&self, x: Vec<f64>, n: usize, h: usize, w: usize) -> PyResult<(Vec<f64>, (usize, usize, usize, usize))> {
        let x = FeatureMap::from_vec(n, self.inner.in_channels(), h, w, x).map_err(err)?;
        let y = compile(&self.inner).map_err(err)?.forward(&x).map_err(err)?;
        Ok((y.data().to_vec(), y.shape()))
    }

    /// Returns `(d_input, d_kernel, d_gates)` for upstream gradient `dy`.
    fn backward(&self, x: Vec<f64>, dy: Vec<f64>, n: usize, h: usize, w: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let xm = FeatureMap::from_vec(n, self.inner.in_channels(), h, w, x).map_err(err)?;
        let (_, _, oh, ow) = self.inner.forward(&xm).map_err(err)?.shape();
        let dym = FeatureMap::from_vec(n, self.inner.out_channels(), oh, ow, dy).map_err(err)?;
        let g = self.inner.backward(&xm, &dym).map_err(err)?;
        Ok((g.input.data().to_vec(), g.kernel.data().to_vec(), g.gates))
    }
}

/// Runs the oracle suite; returns a list of check dicts.
#[pyfunction]
fn verify(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    let report = app::run_verify(&VerifyOptions::default(), |_| {});
    to_py(py, &report.checks)
}

#[pyfunction]
fn train<'py>(py: Python<'py>, config: &str, out: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &app::cmd_train(Path::new(config), Path::new(out)).map_err(err)?)
}

#[pyfunction]
fn analyze<'py>(py: Python<'py>, ckpt: &str) -> PyResult<Bound<'py, PyAny>> {
    let ck = dgconv::Checkpoint::load(Path::new(ckpt)).map_err(err)?;
    to_py(py, &app::analyze_checkpoint(&ck).map_err(err)?)
}

#[pymodule]
fn pydgconv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(group_count, m)?)?;
    m.add_function(wrap_pyfunction!(layer_complexity, m)?)?;
    m.add_function(wrap_pyfunction!(relationship_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(block_permutation, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_class::<PyLayer>()?;
    Ok(())
}
