//! Python bindings: losses, metrics, datasets, networks, deferral models and
//! threshold sweeps. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use deferbench::data::{self, CorruptionKind, CorruptionLevels, CorruptionSpec, SplitTag, SynthGeometry, SynthSpec};
use deferbench::losses::{self, LossSpec, OneStageCost, TwoStageCost};
use deferbench::metrics::{self, ConfusionCounts, CurvePoint, Decision};
use deferbench::nnet::{self, NetConfig, SgdConfig};
use deferbench::pipelines::{self, Method, ModelSettings};
use deferbench::{sweep, uq, Error};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn one_stage(alpha: f64) -> PyResult<OneStageCost> {
    OneStageCost::new(alpha).map_err(err)
}

fn two_stage(beta: f64) -> PyResult<TwoStageCost> {
    TwoStageCost::new(beta).map_err(err)
}

#[pyfunction]
fn loss_cross_entropy(logits: Vec<f64>, target: usize) -> PyResult<f64> {
    losses::loss_cross_entropy(&logits, target).map_err(err)
}

#[pyfunction]
fn loss_one_stage(logits: Vec<f64>, target: usize, alpha: f64) -> PyResult<f64> {
    losses::loss_one_stage(&logits, target, one_stage(alpha)?).map_err(err)
}

#[pyfunction]
fn loss_two_stage(logits: Vec<f64>, target: usize, beta: f64) -> PyResult<f64> {
    losses::loss_two_stage(&logits, target, two_stage(beta)?).map_err(err)
}

#[pyfunction]
fn grad_cross_entropy(logits: Vec<f64>, target: usize) -> PyResult<Vec<f64>> {
    losses::grad_cross_entropy(&logits, target).map_err(err)
}

#[pyfunction]
fn grad_one_stage(logits: Vec<f64>, target: usize, alpha: f64) -> PyResult<Vec<f64>> {
    losses::grad_one_stage(&logits, target, one_stage(alpha)?).map_err(err)
}

#[pyfunction]
fn grad_two_stage(logits: Vec<f64>, target: usize, beta: f64) -> PyResult<Vec<f64>> {
    losses::grad_two_stage(&logits, target, two_stage(beta)?).map_err(err)
}

/// ROC AUC; None when one class is missing.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<usize>) -> Option<f64> {
    metrics::auc(&scores, &labels)
}

/// Partial AUC over FPR in [0, 0.1], divided by 0.1.
#[pyfunction]
fn pauc(scores: Vec<f64>, labels: Vec<usize>) -> Option<f64> {
    metrics::pauc(&scores, &labels)
}

#[pyfunction]
#[pyo3(signature = (tp, fp, tn, fn_))]
fn balanced_accuracy(tp: usize, fp: usize, tn: usize, fn_: usize) -> Option<f64> {
    metrics::balanced_accuracy(&ConfusionCounts { tp, fp, tn, fn_ })
}

#[pyfunction]
fn softmax_uncertainty(s1: f64) -> PyResult<f64> {
    uq::softmax_uncertainty(s1).map_err(err)
}

#[pyclass(name = "Dataset", module = "deferbench", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

fn split_tag(name: &str) -> PyResult<SplitTag> {
    match name {
        "train" => Ok(SplitTag::Train),
        "val" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        _ => Err(PyValueError::new_err(format!("unknown split '{name}' (train, val or test)"))),
    }
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Self> {
        let inner = data::Dataset::new(matrix(features)?, labels, None, "python").map_err(err)?;
        Ok(Self { inner })
    }

    /// Reads DFD1, or CSV for a `.csv` path.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: deferbench::config::read_dataset_file(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_dfd(&self.inner, &path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.features().to_owned())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn positives(&self) -> usize {
        self.inner.positives()
    }

    #[getter]
    fn is_split(&self) -> bool {
        self.inner.splits().is_some()
    }

    /// Stratified train/val/test split.
    fn split(&self, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: data::split(&self.inner, seed).map_err(err)? })
    }

    fn subset(&self, tag: &str) -> PyResult<Self> {
        Ok(Self { inner: self.inner.subset(split_tag(tag)?).map_err(err)? })
    }

    /// Corrupts the test rows (all rows if unsplit) with "noise" or "blur".
    fn corrupt(&self, kind: &str, level: u8, seed: u64) -> PyResult<Self> {
        let kind = match kind {
            "noise" => CorruptionKind::Noise,
            "blur" => CorruptionKind::Blur,
            _ => return Err(PyValueError::new_err(format!("unknown corruption '{kind}'"))),
        };
        let spec = CorruptionSpec::new(kind, level, &CorruptionLevels::default()).map_err(err)?;
        Ok(Self { inner: data::corrupt(&self.inner, spec, seed).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, dim={}, positives={})", self.inner.len(), self.inner.dim(), self.inner.positives())
    }
}

/// Synthetic dataset: 16x16 image patches by default, Gaussian blobs when
/// `blobs_dim` is given.
#[pyfunction]
#[pyo3(signature = (n_samples=10_000, positive_fraction=0.03, seed=0, separation=0.4, overlap_scale=0.15, blobs_dim=None))]
fn generate(
    n_samples: usize,
    positive_fraction: f64,
    seed: u64,
    separation: f64,
    overlap_scale: f64,
    blobs_dim: Option<usize>,
) -> PyResult<PyDataset> {
    let mut spec = SynthSpec { n_samples, positive_fraction, seed, separation, overlap_scale, ..SynthSpec::default() };
    if let Some(dim) = blobs_dim {
        spec.geometry = SynthGeometry::Blobs { dim };
    }
    Ok(PyDataset { inner: data::generate(&spec).map_err(err)? })
}

#[pyclass(name = "Network", module = "deferbench", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: nnet::Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims, output_dim, dropout_rate=0.0, seed=0))]
    fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, dropout_rate: f64, seed: u64) -> PyResult<Self> {
        let config = NetConfig::new(input_dim, hidden_dims, output_dim).with_dropout(dropout_rate).with_seed(seed);
        Ok(Self { inner: nnet::Network::new(config).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: deferbench::checkpoint::load_network(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        deferbench::checkpoint::save_network(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn get_params(&self) -> Vec<f64> {
        self.inner.get_params()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&params).map_err(err)
    }

    /// Logits without dropout.
    fn forward(&self, batch: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.forward(matrix(batch)?.view(), None).map_err(err)?))
    }

    fn positive_probability(&self, batch: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.positive_probability(matrix(batch)?.view(), None).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Network({})", self.inner.config())
    }
}

fn loss_spec(loss: &str, cost: Option<f64>) -> PyResult<LossSpec> {
    match (loss, cost) {
        ("cross_entropy", None) => Ok(LossSpec::CrossEntropy),
        ("one_stage", Some(a)) => Ok(LossSpec::OneStage(one_stage(a)?)),
        ("two_stage", Some(b)) => Ok(LossSpec::TwoStage(two_stage(b)?)),
        _ => Err(PyValueError::new_err(
            "loss must be 'cross_entropy' (no cost), 'one_stage' or 'two_stage' (with cost)",
        )),
    }
}

/// Momentum SGD with class-balanced sampling. Returns the trained network
/// and the mean training loss of every epoch.
#[pyfunction]
#[pyo3(signature = (network, features, labels, loss="cross_entropy", cost=None, epochs=30, learning_rate=0.01, batch_size=128, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    network: &PyNetwork,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    loss: &str,
    cost: Option<f64>,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<(PyNetwork, Vec<f64>)> {
    let spec = loss_spec(loss, cost)?;
    let x = matrix(features)?;
    let sgd = SgdConfig { epochs, learning_rate, batch_size, seed, ..SgdConfig::default() };
    let weights = data::oversample_weights(&labels).map_err(err)?;
    let out = nnet::train(network.inner.clone(), x.view(), &labels, spec, &sgd, &weights).map_err(err)?;
    let losses = out.checkpoints.iter().map(|c| c.train_loss).collect();
    Ok((PyNetwork { inner: out.network }, losses))
}

#[pyclass(name = "DeferralModel", module = "deferbench", skip_from_py_object)]
#[derive(Clone)]
struct PyDeferralModel {
    inner: pipelines::DeferralModel,
}

fn decision_code(d: Decision) -> i64 {
    match d {
        Decision::Class(c) => c as i64,
        Decision::Defer => -1,
    }
}

#[pymethods]
impl PyDeferralModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: pipelines::load_bundle(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        pipelines::save_bundle(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method().name()
    }

    /// (positive probability, uncertainty or deferral probability) per row.
    fn scores(&self, batch: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let r = self.inner.scores(matrix(batch)?.view()).map_err(err)?;
        Ok((r.positive_prob, r.uncertainty))
    }

    /// Class per row, -1 for deferred. UQ methods need a threshold.
    #[pyo3(signature = (batch, threshold=None))]
    fn predict(&self, batch: Vec<Vec<f64>>, threshold: Option<f64>) -> PyResult<Vec<i64>> {
        let model = match threshold {
            Some(t) => self.inner.clone().with_threshold(t),
            None => self.inner.clone(),
        };
        let p = model.predict(matrix(batch)?.view()).map_err(err)?;
        Ok(p.decisions.into_iter().map(decision_code).collect())
    }

    fn __repr__(&self) -> String {
        format!("DeferralModel({})", self.inner.method())
    }
}

fn settings_from(toml_text: Option<&str>) -> PyResult<ModelSettings> {
    let settings: ModelSettings = match toml_text {
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ModelSettings::default(),
    };
    settings.validate().map_err(err)?;
    Ok(settings)
}

/// Trains a deferral model on a split dataset. `cost` is alpha for
/// learned_one_stage; learned_two_stage needs the full benchmark runner.
/// `settings` is a TOML fragment with the `[model]` keys.
#[pyfunction]
#[pyo3(signature = (method, dataset, seed=0, cost=None, settings=None))]
fn train_model(
    method: &str,
    dataset: &PyDataset,
    seed: u64,
    cost: Option<f64>,
    settings: Option<&str>,
) -> PyResult<PyDeferralModel> {
    let method: Method = method.parse().map_err(err)?;
    let settings = settings_from(settings)?;
    let inner = match (method, cost) {
        (Method::LearnedOneStage, Some(alpha)) => pipelines::train_one_stage(&dataset.inner, &settings, seed, alpha),
        (Method::LearnedOneStage, None) => return Err(PyValueError::new_err("learned_one_stage needs cost=alpha")),
        (Method::LearnedTwoStage, _) => {
            return Err(PyValueError::new_err("learned_two_stage is trained by the benchmark runner"))
        }
        (m, _) => pipelines::train_uq(m, &dataset.inner, &settings, seed),
    }
    .map_err(err)?;
    Ok(PyDeferralModel { inner })
}

#[pyclass(name = "CurvePoint", module = "deferbench", skip_from_py_object, get_all)]
#[derive(Clone)]
struct PyCurvePoint {
    threshold: f64,
    deferral_rate: f64,
    bacc: Option<f64>,
    positive_deferred_fraction: f64,
    acc0: Option<f64>,
    acc1: Option<f64>,
}

impl PyCurvePoint {
    fn from_point(threshold: f64, p: &CurvePoint) -> Self {
        Self {
            threshold,
            deferral_rate: p.deferral_rate,
            bacc: p.bacc,
            positive_deferred_fraction: p.positive_deferred_fraction,
            acc0: p.acc0,
            acc1: p.acc1,
        }
    }
}

#[pymethods]
impl PyCurvePoint {
    fn __repr__(&self) -> String {
        format!("CurvePoint(rate={:.4}, bacc={:?})", self.deferral_rate, self.bacc)
    }
}

/// Threshold sweep of a UQ model over a dataset, in sweep order.
#[pyfunction]
#[pyo3(signature = (model, dataset, steps=200))]
fn uq_sweep(model: &PyDeferralModel, dataset: &PyDataset, steps: usize) -> PyResult<Vec<PyCurvePoint>> {
    let curve = sweep::uq_sweep(&model.inner, &dataset.inner, steps).map_err(err)?;
    Ok(curve.points.iter().map(|(t, p)| PyCurvePoint::from_point(*t, p)).collect())
}

#[pymodule]
#[pyo3(name = "deferbench")]
pub fn deferbench_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(loss_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(loss_one_stage, m)?)?;
    m.add_function(wrap_pyfunction!(loss_two_stage, m)?)?;
    m.add_function(wrap_pyfunction!(grad_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(grad_one_stage, m)?)?;
    m.add_function(wrap_pyfunction!(grad_two_stage, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(pauc, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(uq_sweep, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyDeferralModel>()?;
    m.add_class::<PyCurvePoint>()?;
    Ok(())
}
