//! Python bindings: tensors, the model, a few ops and the metrics.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use dasconv_core::audit::audit;
use dasconv_core::data::synth::synth_dataset;
use dasconv_core::data::io::write_corpus;
use dasconv_core::gradcheck::{check_all, check_op, GradcheckConfig};
use dasconv_core::metrics::{self, ConfusionMatrix};
use dasconv_core::ops::{self, ConvSpec, Mode};
use dasconv_core::{build_model, Error, Shape4};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense NCHW float32 tensor.
#[pyclass(module = "dasconv", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Tensor {
    inner: dasconv_core::Tensor4<f32>,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        let (n, c, h, w) = shape;
        let inner = dasconv_core::Tensor4::from_vec(Shape4::new(n, c, h, w), data).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        let (n, c, h, w) = shape;
        Self {
            inner: dasconv_core::Tensor4::zeros(Shape4::new(n, c, h, w)),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.c, s.h, s.w)
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor({})", self.inner.shape())
    }
}

/// Network built from a JSON config (the reference model when omitted).
#[pyclass(module = "dasconv", frozen)]
pub struct Model {
    inner: dasconv_core::Model,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config_json = None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(text) => dasconv_core::ModelConfig::from_json(text).map_err(py_err)?,
            None => dasconv_core::ModelConfig::default(),
        };
        Ok(Self {
            inner: build_model(&cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dasconv_core::Model::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn config_json(&self) -> String {
        self.inner.cfg.to_json()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Audit report as JSON for a batch of `batch` images at the config size.
    #[pyo3(signature = (batch = 1))]
    fn audit_json(&self, batch: usize) -> PyResult<String> {
        let report = audit(&self.inner, self.inner.input_shape(batch)).map_err(py_err)?;
        Ok(report.to_json())
    }

    /// Eval-mode logits and per-pixel class indices.
    fn forward(&self, x: &Tensor) -> PyResult<(Tensor, Vec<u8>)> {
        let (logits, labels) = self.inner.forward(&x.inner, Mode::Eval, 0).map_err(py_err)?;
        Ok((Tensor { inner: logits }, labels.data))
    }
}

#[pyfunction]
#[pyo3(signature = (x, weight, stride = 1, dilation = 1, padding = 0, groups = 1))]
fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, dilation: usize, padding: usize, groups: usize) -> PyResult<Tensor> {
    let ws = weight.inner.shape();
    let spec = ConvSpec {
        in_channels: x.inner.shape().c,
        out_channels: ws.n,
        kernel: (ws.h, ws.w),
        stride,
        dilation,
        padding,
        groups,
        has_bias: false,
    };
    let inner = ops::conv2d(&x.inner, &weight.inner, None, &spec).map_err(py_err)?;
    Ok(Tensor { inner })
}

#[pyfunction]
fn cosine_lr(t_cur: usize, t_max: usize, lr_min: f64, lr_max: f64) -> PyResult<f64> {
    if t_max == 0 || t_cur > t_max {
        return Err(PyValueError::new_err("need 0 <= t_cur <= t_max and t_max >= 1"));
    }
    Ok(dasconv_core::train::cosine_lr(t_cur, t_max, lr_min, lr_max))
}

#[pyfunction]
fn effectiveness(diff_miou: f64, params_millions: f64, gflops: f64) -> PyResult<f64> {
    metrics::effectiveness(diff_miou, params_millions, gflops).map_err(py_err)
}

/// Per-class IoU (None for absent classes) and their mean.
#[pyfunction]
fn miou(truth: Vec<u8>, pred: Vec<u8>, classes: usize) -> PyResult<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(&truth, &pred, None).map_err(py_err)?;
    let r = metrics::miou(&cm).map_err(py_err)?;
    Ok((r.per_class, r.mean))
}

/// `(op, max relative error, passed)` for each checked op.
#[pyfunction]
#[pyo3(signature = (op = None, cases = 5, seed = 0x5eed))]
fn gradcheck(op: Option<&str>, cases: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = GradcheckConfig {
        cases,
        seed,
        ..GradcheckConfig::default()
    };
    let reports = match op {
        Some(name) => vec![check_op(name, &cfg).map_err(py_err)?],
        None => check_all(&cfg).map_err(py_err)?,
    };
    Ok(reports.into_iter().map(|r| (r.op, r.max_rel_error, r.passed)).collect())
}

/// Writes a synthetic corpus to `out`.
#[pyfunction]
#[pyo3(signature = (out, n = 4, seed = 0, size = 512))]
fn synth(out: &str, n: usize, seed: u64, size: usize) -> PyResult<()> {
    let raw: Vec<_> = synth_dataset(n, seed, size).into_iter().map(|e| e.raw).collect();
    write_corpus(std::path::Path::new(out), &raw).map_err(py_err)
}

#[pymodule]
fn dasconv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(effectiveness, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add("NUM_CLASSES", dasconv_core::data::NUM_CLASSES)?;
    Ok(())
}
