//! Python bindings: models, encodings, attacks and metrics.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use spikeinv_core::attack::{self, AttackConfig, Method, Reconstruction};
use spikeinv_core::checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
use spikeinv_core::encoding::{self, SpikeTrain, StaticImage};
use spikeinv_core::metrics::{self, Scored};
use spikeinv_core::model::{self, ModelKind, ModelSpec, Scale};
use spikeinv_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence(_) | Error::AttackNan(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(s: &SpikeTrain) -> Vec<Vec<u8>> {
    s.data().chunks(s.features()).map(<[u8]>::to_vec).collect()
}

fn train_from_rows(rows: Vec<Vec<u8>>) -> PyResult<SpikeTrain> {
    let features = rows.first().map_or(0, Vec::len);
    let steps = rows.len();
    if rows.iter().any(|r| r.len() != features) {
        return Err(PyValueError::new_err("spike rows must all have the same length"));
    }
    SpikeTrain::new(steps, features, rows.concat()).map_err(to_py)
}

#[pyclass(name = "Model", module = "spikeinv_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh randomly initialised preset.
    #[new]
    #[pyo3(signature = (kind, height=28, width=28, classes=10, scale="desk", seed=0))]
    fn new(kind: &str, height: usize, width: usize, classes: usize, scale: &str, seed: u64) -> PyResult<Self> {
        let kind = ModelKind::parse(kind).map_err(to_py)?;
        let scale = Scale::parse(scale).map_err(to_py)?;
        let spec = ModelSpec::preset(kind, height, width, classes, scale);
        Ok(Self {
            inner: model::build_model(&spec, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path.as_ref()).map_err(to_py)?.model,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let meta = TrainMeta {
            seed: 0,
            epochs: 0,
            val_accuracy: f64::NAN,
        };
        save_checkpoint(&self.inner, &meta, path.as_ref()).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.spec.kind.to_string()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.spec.classes
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.spec.steps
    }

    #[getter]
    fn input_len(&self) -> usize {
        self.inner.spec.input_len()
    }

    #[getter]
    fn param_count(&self) -> PyResult<usize> {
        self.inner.spec.param_count().map_err(to_py)
    }

    /// Class posterior for one flat input (`steps × features` for spiking models).
    fn predict(&self, input: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict(&input).map_err(to_py)
    }

    fn predict_spikes(&self, spikes: Vec<Vec<u8>>) -> PyResult<Vec<f64>> {
        self.inner.predict(&train_from_rows(spikes)?.to_f64()).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.spec;
        format!("Model(kind='{}', input={}x{}, classes={}, steps={})", s.kind, s.height, s.width, s.classes, s.steps)
    }
}

#[pyclass(name = "AttackResult", module = "spikeinv_py", get_all)]
struct PyAttackResult {
    method: String,
    target: usize,
    confidence: f64,
    final_best_confidence: f64,
    loss_trace: Vec<f64>,
    best_trace: Vec<f64>,
    /// `[sample][t][feature]`
    spike_samples: Vec<Vec<Vec<u8>>>,
    image_samples: Vec<Vec<f64>>,
    /// BL-v2 Bernoulli parameters, flat `steps × features`.
    params: Option<Vec<f64>>,
}

#[pymethods]
impl PyAttackResult {
    #[getter]
    fn iterations(&self) -> usize {
        self.loss_trace.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "AttackResult(method='{}', target={}, iterations={}, confidence={:.4})",
            self.method,
            self.target,
            self.loss_trace.len(),
            self.confidence
        )
    }
}

/// Inverts `model` for one class with `miface`, `blv1` or `blv2`.
#[pyfunction]
#[pyo3(signature = (model, method, target, iterations=2000, population=8, xi=None, eta=None, rho=0.9, beta=0.9, samples=20, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_attack(
    py: Python<'_>,
    model: &PyModel,
    method: &str,
    target: usize,
    iterations: usize,
    population: usize,
    xi: Option<f64>,
    eta: Option<f64>,
    rho: f64,
    beta: f64,
    samples: usize,
    seed: u64,
) -> PyResult<PyAttackResult> {
    let method = Method::parse(method).map_err(to_py)?;
    let base = AttackConfig::for_method(method);
    let cfg = AttackConfig {
        target,
        iterations,
        population,
        xi: xi.unwrap_or(base.xi),
        eta: eta.unwrap_or(base.eta),
        rho,
        beta,
        samples,
        seed,
        ..base
    };
    let m = &model.inner;
    let r = py
        .detach(|| match method {
            Method::MiFace => attack::mi_face(m, &cfg),
            Method::Blv1 => attack::blv1_attack(m, &cfg),
            Method::Blv2 => attack::blv2_attack(m, &cfg),
        })
        .map_err(to_py)?;
    Ok(PyAttackResult {
        method: r.method.to_string(),
        target: r.target,
        confidence: r.confidence,
        final_best_confidence: r.final_best_confidence,
        spike_samples: r.spike_samples.iter().map(rows).collect(),
        params: match &r.reconstruction {
            Reconstruction::Params(p) => Some(p.clone()),
            _ => None,
        },
        image_samples: r.image_samples,
        loss_trace: r.loss_trace,
        best_trace: r.best_trace,
    })
}

/// Bernoulli rate coding of a `height × width` image in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, steps=25, seed=0))]
fn rate_encode(pixels: Vec<f64>, height: usize, width: usize, steps: usize, seed: u64) -> PyResult<Vec<Vec<u8>>> {
    let img = StaticImage::new(height, width, pixels, 0).map_err(to_py)?;
    Ok(rows(&encoding::rate_encode(&img, steps, seed).map_err(to_py)?))
}

#[pyfunction]
fn rate_decode(spikes: Vec<Vec<u8>>) -> PyResult<Vec<f64>> {
    Ok(train_from_rows(spikes)?.rate_decode())
}

#[pyfunction]
fn nes_gradient(losses: Vec<f64>, grads: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    attack::nes_gradient(&losses, &grads).map_err(to_py)
}

#[pyfunction]
fn clamp_scale(x: Vec<f64>) -> Vec<f64> {
    attack::clamp_scale(&x)
}

fn scored(true_classes: Vec<usize>, posteriors: Vec<Vec<f64>>) -> PyResult<Vec<Scored>> {
    if true_classes.len() != posteriors.len() {
        return Err(PyValueError::new_err("one true class per posterior is required"));
    }
    Ok(true_classes
        .into_iter()
        .zip(posteriors)
        .map(|(true_class, posterior)| Scored { true_class, posterior })
        .collect())
}

#[pyfunction]
fn attack_accuracy(true_classes: Vec<usize>, posteriors: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::attack_accuracy(&scored(true_classes, posteriors)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (true_classes, posteriors, k=3))]
fn topk_accuracy(true_classes: Vec<usize>, posteriors: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    metrics::topk_accuracy(&scored(true_classes, posteriors)?, k).map_err(to_py)
}

#[pyfunction]
fn avg_confidence(true_classes: Vec<usize>, posteriors: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::avg_confidence(&scored(true_classes, posteriors)?).map_err(to_py)
}

#[pyfunction]
fn daa(true_classes: Vec<usize>, posteriors: Vec<Vec<f64>>, classes: Vec<usize>) -> PyResult<f64> {
    metrics::daa(&scored(true_classes, posteriors)?, &classes).map_err(to_py)
}

#[pymodule]
fn spikeinv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_function(wrap_pyfunction!(run_attack, m)?)?;
    m.add_function(wrap_pyfunction!(rate_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rate_decode, m)?)?;
    m.add_function(wrap_pyfunction!(nes_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(clamp_scale, m)?)?;
    m.add_function(wrap_pyfunction!(attack_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(topk_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(avg_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(daa, m)?)?;
    Ok(())
}
