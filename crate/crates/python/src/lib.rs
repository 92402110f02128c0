//! Python bindings: configs, models, training, checkpoints and ensembles.

use std::collections::HashMap;
use std::path::PathBuf;

use capsnet::capsule::Activation;
use capsnet::checkpoint::Checkpoint;
use capsnet::cli::load_dataset;
use capsnet::config::RunConfig;
use capsnet::data::{AugmentationConfig, DatasetSplit};
use capsnet::ensemble::Ensemble;
use capsnet::model::{CapsNet, ModelConfig};
use capsnet::tensor::Tensor;
use capsnet::train::{evaluate, MetricRecord, Trainer};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn record_dict(r: &MetricRecord) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("epoch", r.epoch as f64),
        ("margin_loss", r.margin),
        ("recon_loss", r.reconstruction),
        ("total_loss", r.total),
        ("val_accuracy", r.val_accuracy),
    ])
}

/// Flat `[B * C * H * W]` pixels in `[0, 1]` as a batch for `model`.
fn batch(model: &CapsNet<f32>, pixels: Vec<f32>) -> PyResult<Tensor<f32>> {
    let input = model.config().input;
    let per = input.pixels();
    if pixels.is_empty() || !pixels.len().is_multiple_of(per) {
        return Err(value_err(format!(
            "{} values is not a whole number of {}x{}x{} images",
            pixels.len(),
            input.channels,
            input.height,
            input.width
        )));
    }
    Tensor::from_vec([pixels.len() / per, input.channels, input.height, input.width], pixels).map_err(value_err)
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    t.data().chunks(t.shape()[1]).map(<[f32]>::to_vec).collect()
}

fn split_of(run: &RunConfig, data_dir: PathBuf, split: &str, limit: Option<usize>) -> PyResult<DatasetSplit> {
    let (train, val) =
        load_dataset(run.dataset, &data_dir, None, None).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let s = match split {
        "train" => train,
        "val" => val,
        other => return Err(value_err(format!("split must be 'train' or 'val', got {other:?}"))),
    };
    Ok(match limit {
        Some(n) if n < s.len() => s.head(n),
        _ => s,
    })
}

/// Run configuration in the `key = value` format used by the CLI.
#[pyclass(name = "RunConfig", module = "pycapsnet")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text =
            std::fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Self::new(&text)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn dataset(&self) -> &'static str {
        self.inner.dataset.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.model.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.model.seed = seed;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.train.epochs = epochs;
    }

    #[getter]
    fn train_limit(&self) -> Option<usize> {
        self.inner.train_limit
    }

    #[setter]
    fn set_train_limit(&mut self, n: Option<usize>) {
        self.inner.train_limit = n;
    }

    #[getter]
    fn val_limit(&self) -> Option<usize> {
        self.inner.val_limit
    }

    #[setter]
    fn set_val_limit(&mut self, n: Option<usize>) {
        self.inner.val_limit = n;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(dataset={}, seed={})", self.dataset(), self.seed())
    }
}

#[pyclass(name = "CapsNet", module = "pycapsnet")]
struct PyCapsNet {
    inner: CapsNet<f32>,
}

#[pymethods]
impl PyCapsNet {
    /// Builds a freshly initialized network from a named preset.
    #[new]
    #[pyo3(signature = (preset = "mnist-desk", seed = 0, nota = false))]
    fn new(preset: &str, seed: u64, nota: bool) -> PyResult<Self> {
        let cfg = ModelConfig::preset(preset).ok_or_else(|| value_err(format!("unknown preset {preset:?}")))?;
        let cfg = cfg.with_seed(seed).with_nota(nota);
        Ok(Self {
            inner: CapsNet::build(cfg).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_config(config: &PyRunConfig) -> PyResult<Self> {
        Ok(Self {
            inner: CapsNet::build(config.inner.model.clone()).map_err(value_err)?,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    /// `(channels, height, width)` of accepted images.
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let i = self.inner.config().input;
        (i.channels, i.height, i.width)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(n, _)| n.clone()).collect()
    }

    fn parameter_shape(&self, name: &str) -> PyResult<Vec<usize>> {
        self.inner
            .param(name)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| value_err(format!("no parameter named {name:?}")))
    }

    /// Real-class capsule lengths, one row per image.
    fn scores(&self, pixels: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        Ok(rows(
            &self.inner.scores(&batch(&self.inner, pixels)?).map_err(value_err)?,
        ))
    }

    fn predict(&self, pixels: Vec<f32>) -> PyResult<Vec<usize>> {
        let scores = self.inner.scores(&batch(&self.inner, pixels)?).map_err(value_err)?;
        Ok(self.inner.predict(&scores))
    }

    #[pyo3(signature = (data_dir, split = "val", limit = None))]
    fn evaluate(&self, data_dir: PathBuf, split: &str, limit: Option<usize>) -> PyResult<f64> {
        let run = RunConfig {
            dataset: dataset_for(&self.inner),
            ..RunConfig::default()
        };
        let s = split_of(&run, data_dir, split, limit)?;
        evaluate(&self.inner, &s, 128, &AugmentationConfig::default()).map_err(value_err)
    }
}

fn dataset_for(model: &CapsNet<f32>) -> capsnet::config::Dataset {
    if model.config().input.channels == 1 {
        capsnet::config::Dataset::Mnist
    } else {
        capsnet::config::Dataset::Cifar10
    }
}

#[pyclass(name = "Trainer", module = "pycapsnet", unsendable)]
struct PyTrainer {
    run: RunConfig,
    trainer: Trainer<f32>,
    train: DatasetSplit,
    val: DatasetSplit,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyRunConfig, data_dir: PathBuf) -> PyResult<Self> {
        let run = config.inner.clone();
        let (train, val) = load_dataset(run.dataset, &data_dir, run.train_limit, run.val_limit)
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        let model = CapsNet::build(run.model.clone()).map_err(value_err)?;
        let trainer = Trainer::new(model, run.train.clone()).map_err(value_err)?;
        Ok(Self {
            run,
            trainer,
            train,
            val,
        })
    }

    /// Resumes from a checkpoint written by the CLI or by `save`.
    #[staticmethod]
    fn resume(path: PathBuf, data_dir: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::<f32>::load(&path).map_err(value_err)?;
        let (train, val) = load_dataset(ck.run.dataset, &data_dir, ck.run.train_limit, ck.run.val_limit)
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        let trainer = Trainer::resume(ck.model, ck.run.train.clone(), ck.state).map_err(value_err)?;
        Ok(Self {
            run: ck.run,
            trainer,
            train,
            val,
        })
    }

    fn train_epoch(&mut self) -> PyResult<HashMap<&'static str, f64>> {
        let r = self.trainer.train_epoch(&self.train, &self.val).map_err(value_err)?;
        Ok(record_dict(&r))
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.trainer.state.epoch
    }

    fn history(&self) -> Vec<HashMap<&'static str, f64>> {
        self.trainer.state.history.iter().map(record_dict).collect()
    }

    fn model(&self) -> PyCapsNet {
        PyCapsNet {
            inner: self.trainer.model.clone(),
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            run: self.run.clone(),
            model: self.trainer.model.clone(),
            state: self.trainer.state.clone(),
        }
        .save(&path)
        .map_err(|e| PyIOError::new_err(e.to_string()))
    }
}

/// Loads the model stored in a checkpoint file.
#[pyfunction]
fn load_model(path: PathBuf) -> PyResult<PyCapsNet> {
    let ck = Checkpoint::<f32>::load(&path).map_err(value_err)?;
    Ok(PyCapsNet { inner: ck.model })
}

/// Metric history stored in a checkpoint file.
#[pyfunction]
fn checkpoint_history(path: PathBuf) -> PyResult<Vec<HashMap<&'static str, f64>>> {
    let ck = Checkpoint::<f32>::load(&path).map_err(value_err)?;
    Ok(ck.state.history.iter().map(record_dict).collect())
}

#[pyclass(name = "Ensemble", module = "pycapsnet")]
struct PyEnsemble {
    inner: Ensemble<f32>,
}

#[pymethods]
impl PyEnsemble {
    #[new]
    fn new(members: Vec<PyRef<PyCapsNet>>) -> PyResult<Self> {
        let models = members.iter().map(|m| m.inner.clone()).collect();
        Ok(Self {
            inner: Ensemble::new(models).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_manifest(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Ensemble::from_manifest(&path).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.members().len()
    }

    fn scores(&self, pixels: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let images = batch(&self.inner.members()[0], pixels)?;
        Ok(rows(&self.inner.scores(&images).map_err(value_err)?))
    }

    fn predict(&self, pixels: Vec<f32>) -> PyResult<Vec<usize>> {
        let images = batch(&self.inner.members()[0], pixels)?;
        self.inner.predict(&images).map_err(value_err)
    }

    #[pyo3(signature = (data_dir, split = "val", limit = None))]
    fn evaluate(&self, data_dir: PathBuf, split: &str, limit: Option<usize>) -> PyResult<f64> {
        let run = RunConfig {
            dataset: dataset_for(&self.inner.members()[0]),
            ..RunConfig::default()
        };
        let s = split_of(&run, data_dir, split, limit)?;
        self.inner
            .evaluate(&s, 128, &AugmentationConfig::default())
            .map_err(value_err)
    }
}

fn activate(kind: Activation, v: Vec<f64>) -> PyResult<Vec<f64>> {
    if v.is_empty() {
        return Err(value_err("empty vector"));
    }
    let n = v.len();
    Ok(kind
        .apply_tensor(&Tensor::from_vec([1, n], v).map_err(value_err)?)
        .into_data())
}

/// `‖s‖² / (1 + ‖s‖²) · s / ‖s‖`.
#[pyfunction]
fn squash(v: Vec<f64>) -> PyResult<Vec<f64>> {
    activate(Activation::Squash, v)
}

/// `(1 − e^{−‖s‖}) · s / ‖s‖`.
#[pyfunction]
fn custom_activation(v: Vec<f64>) -> PyResult<Vec<f64>> {
    activate(Activation::Custom, v)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    vec![
        "baseline",
        "caps64",
        "conv2",
        "recon0001",
        "stack",
        "custom-activation",
        "nota",
        "mnist-baseline",
        "mnist-desk",
        "cifar-desk",
        "cifar-desk-conv2",
    ]
}

#[pymodule]
pub fn pycapsnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCapsNet>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_history, m)?)?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(custom_activation, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
