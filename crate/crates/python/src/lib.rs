//! Python bindings: cost arithmetic, ALF blocks, mask selection, deployed
//! containers and a one-call training entry point.
//!
//! Tensors cross the boundary as a flat row-major `list[float]` plus a
//! 4-tuple of dims (NHWC for activations).

use alf_core::cost::gain_to_f64;
use alf_core::factorizer;
use alf_core::{
    self as core, deploy, evaluate, Activation, ConvGeometry, LayerDesc, LayerKind, Layout, RunConfig, Tensor4,
    Trainer,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(alf_py, AlfError, PyException, "Error raised by the ALF core.");

fn py_err(e: core::AlfError) -> PyErr {
    AlfError::new_err(e.to_string())
}

type Dims = (usize, usize, usize, usize);

fn tensor(data: Vec<f32>, dims: Dims, layout: Layout) -> PyResult<Tensor4<f32>> {
    Tensor4::from_vec([dims.0, dims.1, dims.2, dims.3], data, layout).map_err(py_err)
}

fn unpack(t: Tensor4<f32>) -> (Vec<f32>, Dims) {
    let [a, b, c, d] = t.dims();
    (t.into_data(), (a, b, c, d))
}

fn activation(name: &str) -> PyResult<Activation> {
    name.parse().map_err(py_err)
}

/// Largest code width that still saves parameters.
#[pyfunction]
fn code_max(ci: u64, co: u64, k: u64) -> u64 {
    core::code_max(ci, co, k)
}

/// Parameter gain of an ALF layer over a standard convolution.
#[pyfunction]
fn gain_ratio(ci: u64, co: u64, k: u64, code: u64) -> PyResult<f64> {
    core::gain_ratio(ci, co, k, code).map(|g| gain_to_f64(&g)).map_err(py_err)
}

/// Cost entry of one ALF layer as a dict.
#[pyfunction]
#[pyo3(signature = (ci, co, k, ho, wo, code))]
fn layer_cost<'py>(py: Python<'py>, ci: u64, co: u64, k: u64, ho: u64, wo: u64, code: u64) -> PyResult<Bound<'py, PyDict>> {
    let desc = LayerDesc {
        id: "layer".into(),
        kind: LayerKind::Alf,
        ci,
        co,
        k,
        ho,
        wo,
    };
    let e = core::layer_cost(&desc, code).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("c_code_eff", e.c_code_eff)?;
    d.set_item("c_code_max", e.c_code_max)?;
    d.set_item("params_standard", e.params_standard)?;
    d.set_item("params_alf", e.params_alf)?;
    d.set_item("ops_standard", e.ops_standard)?;
    d.set_item("ops_alf", e.ops_alf)?;
    d.set_item("gain_params", gain_to_f64(&e.gain_params))?;
    d.set_item("gain_ops", gain_to_f64(&e.gain_ops))?;
    d.set_item("economical", e.economical())?;
    Ok(d)
}

/// Number of code channels masked at pruning rate `pr`.
#[pyfunction]
fn masked_count(pr: f64, code_channels: usize) -> usize {
    factorizer::masked_count(pr, code_channels)
}

/// Keep-mask that drops the `masked_count(pr, n)` least important channels.
#[pyfunction]
fn mask_from_importances(importances: Vec<f64>, pr: f64) -> PyResult<Vec<bool>> {
    factorizer::mask_from_importances(&importances, pr).map_err(py_err)
}

/// Training-mode ALF layer.
#[pyclass(name = "AlfBlock")]
struct PyAlfBlock {
    inner: core::AlfBlock<f32>,
}

#[pymethods]
impl PyAlfBlock {
    #[new]
    #[pyo3(signature = (ci, co, code, kernel, stride=1, padding=0, sigma_inter="identity", sigma="identity", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        ci: usize,
        co: usize,
        code: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        sigma_inter: &str,
        sigma: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let geom = ConvGeometry::new(kernel, stride, padding).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = core::AlfBlock::init(ci, co, code, geom, activation(sigma_inter)?, activation(sigma)?, &mut rng)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn code_channels(&self) -> usize {
        self.inner.code_channels()
    }

    #[getter]
    fn active_channels(&self) -> usize {
        self.inner.active_channels()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.inner.mask().to_vec()
    }

    fn set_mask(&mut self, mask: Vec<bool>) -> PyResult<()> {
        self.inner.set_mask(mask).map_err(py_err)
    }

    /// Per-channel importance scores.
    fn importances(&self) -> Vec<f64> {
        factorizer::compute_importances(&self.inner)
    }

    fn reconstruction_loss(&self) -> f64 {
        self.inner.reconstruction_loss()
    }

    /// Forward pass on an NHWC batch; returns `(data, dims)`.
    fn forward(&self, data: Vec<f32>, dims: Dims) -> PyResult<(Vec<f32>, Dims)> {
        let x = tensor(data, dims, Layout::Nhwc)?;
        Ok(unpack(self.inner.forward(&x).map_err(py_err)?))
    }

    /// Masked code filters `(W_ref·E)⊙M` in KKIO layout.
    fn code_filters(&self) -> (Vec<f32>, Dims) {
        unpack(self.inner.encode_filters())
    }

    /// Compacted inference layer with masked channels removed.
    fn compact(&self) -> PyResult<(usize, usize)> {
        let c = deploy::compact(&self.inner).map_err(py_err)?;
        Ok((c.code_channels(), c.w_exp.dims()[3]))
    }
}

/// Compact inference model stored in the `ALF1` container.
#[pyclass(name = "DeployedModel")]
struct PyDeployedModel {
    inner: core::DeployedModel,
}

#[pymethods]
impl PyDeployedModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = core::DeployedModel::import(path.as_ref()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        let inner = core::DeployedModel::from_bytes(bytes).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.export(path.as_ref()).map_err(py_err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn input_dims(&self) -> (usize, usize, usize) {
        let i = self.inner.input;
        (i.height, i.width, i.channels)
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Code widths of the ALF layers in order.
    fn code_channels(&self) -> Vec<usize> {
        self.inner.alf_layers().map(|l| l.code_channels()).collect()
    }

    /// Logits for an NHWC batch; returns `(data, dims)`.
    fn forward(&self, data: Vec<f32>, dims: Dims) -> PyResult<(Vec<f32>, Dims)> {
        let x = tensor(data, dims, Layout::Nhwc)?;
        Ok(unpack(self.inner.forward(&x).map_err(py_err)?))
    }

    /// Cost report as CSV text.
    fn cost_csv(&self) -> PyResult<String> {
        let mut out = Vec::new();
        self.inner.cost_report().and_then(|r| r.write_csv(&mut out)).map_err(py_err)?;
        String::from_utf8(out).map_err(|e| AlfError::new_err(e.to_string()))
    }
}

/// Trains from a TOML run config. Returns `(metrics, model, accuracy)` where
/// `metrics` is a list of per-epoch dicts and `accuracy` is measured on the
/// deployed model.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<(Vec<Bound<'py, PyDict>>, PyDeployedModel, f64)> {
    let cfg = RunConfig::from_toml(config).map_err(py_err)?;
    let (train_set, test_set) = cfg.dataset.load().map_err(py_err)?;
    let mut trainer = Trainer::from_architecture(&cfg.architecture(), cfg.training.clone()).map_err(py_err)?;
    let metrics = trainer.train_loop(&train_set, &test_set).map_err(py_err)?;
    let deployed = deploy(&trainer.model).map_err(py_err)?;
    let accuracy = evaluate(&deployed, &test_set).map_err(py_err)?;
    let records = metrics
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("task_loss", r.task_loss)?;
            d.set_item("rec_loss", r.rec_loss)?;
            d.set_item("accuracy", r.accuracy)?;
            d.set_item("masked_count", r.masked_count.clone())?;
            d.set_item("gain", r.gain.clone())?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((records, PyDeployedModel { inner: deployed }, accuracy))
}

#[pymodule]
pub fn alf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AlfError", m.py().get_type::<AlfError>())?;
    m.add_function(wrap_pyfunction!(code_max, m)?)?;
    m.add_function(wrap_pyfunction!(gain_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(layer_cost, m)?)?;
    m.add_function(wrap_pyfunction!(masked_count, m)?)?;
    m.add_function(wrap_pyfunction!(mask_from_importances, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyAlfBlock>()?;
    m.add_class::<PyDeployedModel>()?;
    Ok(())
}
