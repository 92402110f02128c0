//! Adam, the epoch loop and per-epoch metrics.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{batches, eval_batches, AugmentationConfig, DatasetSplit};
use crate::model::{CapsNet, ModelError};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss in epoch {epoch}, batch {batch} (margin {margin}, reconstruction {reconstruction})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        margin: f64,
        reconstruction: f64,
    },
    #[error("training config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, step: 0, m, v }
    }

    /// One bias-corrected update of every parameter.
    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor<T>>, grads: &[Tensor<T>]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let nb1 = T::from_f64(1.0 - c.beta1);
        let nb2 = T::from_f64(1.0 - c.beta2);
        let lr_t = T::from_f64(c.lr / (1.0 - c.beta1.powi(t)));
        let v_corr = T::from_f64(1.0 / (1.0 - c.beta2.powi(t)));
        let eps = T::from_f64(c.eps);
        for (k, p) in params.enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + nb1 * g[i];
                v[i] = b2 * v[i] + nb2 * g[i] * g[i];
                *x = *x - lr_t * m[i] / ((v[i] * v_corr).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            adam: AdamConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(TrainError::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Training losses are example-weighted means over the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub margin: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,margin_loss,recon_loss,total_loss,val_accuracy";

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.6}",
            self.epoch, self.margin, self.reconstruction, self.total, self.val_accuracy
        )
    }
}

/// Header plus one row per record, newline-terminated.
pub fn metrics_csv(history: &[MetricRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in history {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Everything besides the parameters that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub adam: Adam<T>,
    pub history: Vec<MetricRecord>,
}

/// Seeds the shuffle stream independently of parameter initialization.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// `(margin, reconstruction, total)` for one batch.
pub type LossValues = (f64, f64, f64);

pub struct Trainer<T> {
    pub model: CapsNet<T>,
    pub config: TrainConfig,
    pub state: TrainState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: CapsNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState {
            epoch: 0,
            rng: shuffle_rng(model.config().seed),
            adam: Adam::new(config.adam, model.params().iter().map(|(_, t)| t)),
            history: Vec::new(),
        };
        Ok(Self { model, config, state })
    }

    pub fn resume(model: CapsNet<T>, config: TrainConfig, state: TrainState<T>) -> Result<Self> {
        config.validate()?;
        if state.adam.m.len() != model.params().len() {
            return Err(TrainError::Config(format!(
                "optimizer has {} moments for {} parameters",
                state.adam.m.len(),
                model.params().len()
            )));
        }
        Ok(Self { model, config, state })
    }

    /// Loss terms `(margin, reconstruction, total)` and parameter gradients for one batch.
    pub fn batch_gradients(&self, images: &Tensor<T>, labels: &[usize]) -> Result<(LossValues, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let vars = self.model.bind(&tape, true);
        let x = tape.constant(images.clone());
        let fwd = self.model.forward(&vars, x, None)?;
        let terms = self.model.losses(&vars, &fwd, x, labels)?;
        let item = |v: crate::tensor::Var<'_, T>| v.value().data()[0].as_f64();
        let values = (item(terms.margin), item(terms.reconstruction), item(terms.total));
        if !values.2.is_finite() {
            return Ok((values, Vec::new()));
        }
        let mut grads = tape.backward(terms.total).map_err(ModelError::from)?;
        let grads = vars.iter().map(|v| grads.take(v.id())).collect();
        Ok((values, grads))
    }

    /// One pass over `train` followed by validation accuracy on `val`.
    pub fn train_epoch(&mut self, train: &DatasetSplit, val: &DatasetSplit) -> Result<MetricRecord> {
        let epoch = self.state.epoch + 1;
        let epoch_seed = self.state.rng.next_u64();
        let mut sums = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for (batch_index, batch) in
            batches::<T>(train, self.config.batch_size, epoch_seed, &self.config.augmentation).enumerate()
        {
            let (losses, grads) = self.batch_gradients(&batch.images, &batch.labels)?;
            if grads.is_empty() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_index,
                    margin: losses.0,
                    reconstruction: losses.1,
                });
            }
            self.state.adam.update(self.model.params_mut(), &grads);
            let n = batch.labels.len() as f64;
            sums.0 += losses.0 * n;
            sums.1 += losses.1 * n;
            sums.2 += losses.2 * n;
            seen += batch.labels.len();
        }
        let n = seen.max(1) as f64;
        let record = MetricRecord {
            epoch,
            margin: sums.0 / n,
            reconstruction: sums.1 / n,
            total: sums.2 / n,
            val_accuracy: evaluate(&self.model, val, self.config.batch_size, &self.config.augmentation)?,
        };
        self.state.epoch = epoch;
        self.state.history.push(record);
        Ok(record)
    }
}

/// Real-class lengths `[N, num_classes]` for a whole split, in storage order.
pub fn split_scores<T: Scalar>(
    model: &CapsNet<T>,
    split: &DatasetSplit,
    batch_size: usize,
    aug: &AugmentationConfig,
) -> Result<Tensor<T>> {
    let k = model.config().num_classes;
    let mut data = Vec::with_capacity(split.len() * k);
    for batch in eval_batches::<T>(split, batch_size, aug) {
        data.extend_from_slice(model.scores(&batch.images)?.data());
    }
    Tensor::from_vec([split.len(), k], data).map_err(|e| TrainError::Model(e.into()))
}

/// Fraction of `labels` matched by the row-wise argmax of `scores`.
pub fn accuracy_of<T: Scalar>(scores: &Tensor<T>, labels: impl Iterator<Item = usize>) -> f64 {
    let k = scores.shape()[1];
    let (mut hits, mut n) = (0usize, 0usize);
    for (row, label) in scores.data().chunks(k).zip(labels) {
        hits += usize::from(crate::model::argmax(row) == label);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Accuracy of argmax over real-class capsule lengths.
pub fn evaluate<T: Scalar>(
    model: &CapsNet<T>,
    split: &DatasetSplit,
    batch_size: usize,
    aug: &AugmentationConfig,
) -> Result<f64> {
    let scores = split_scores(model, split, batch_size, aug)?;
    Ok(accuracy_of(&scores, split.labels()))
}
