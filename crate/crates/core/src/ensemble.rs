//! Test-time averaging of capsule lengths across independently trained models.

use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{AugmentationConfig, DatasetSplit};
use crate::model::{argmax, CapsNet, InputShape};
use crate::tensor::{Scalar, Tensor};
use crate::train::{accuracy_of, split_scores, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("ensemble config error: {0}")]
    Config(String),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("member {path}: {source}")]
    Member {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Eval(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

pub struct Ensemble<T> {
    members: Vec<CapsNet<T>>,
}

impl<T: Scalar> Ensemble<T> {
    /// Members must agree on the number of real classes and the input shape.
    pub fn new(members: Vec<CapsNet<T>>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(EnsembleError::Config("an ensemble needs at least one member".into()));
        };
        let key = |m: &CapsNet<T>| -> (usize, InputShape) { (m.config().num_classes, m.config().input) };
        let want = key(first);
        if let Some((i, m)) = members.iter().enumerate().find(|(_, m)| key(m) != want) {
            return Err(EnsembleError::Config(format!(
                "member {i} has {} classes on {:?}, member 0 has {} on {:?}",
                key(m).0,
                key(m).1,
                want.0,
                want.1
            )));
        }
        Ok(Self { members })
    }

    /// Loads every checkpoint listed in a manifest. One path per line,
    /// relative paths resolve against the manifest's directory, `#` starts
    /// a comment.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let paths = read_manifest(path)?;
        let members = paths
            .into_iter()
            .map(|p| {
                Checkpoint::load(&p)
                    .map(|c| c.model)
                    .map_err(|source| EnsembleError::Member { path: p, source })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn members(&self) -> &[CapsNet<T>] {
        &self.members
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].config().num_classes
    }

    /// Mean real-class capsule lengths `[B, num_classes]`.
    pub fn scores(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let per_member = self
            .members
            .iter()
            .map(|m| m.scores(images))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(TrainError::from)?;
        Ok(mean_scores(&per_member))
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let scores = self.scores(images)?;
        let k = scores.shape()[1];
        Ok(scores.data().chunks(k).map(argmax).collect())
    }

    pub fn evaluate(&self, split: &DatasetSplit, batch_size: usize, aug: &AugmentationConfig) -> Result<f64> {
        let per_member = self
            .members
            .iter()
            .map(|m| split_scores(m, split, batch_size, aug))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(accuracy_of(&mean_scores(&per_member), split.labels()))
    }
}

/// Element-wise mean of equally shaped score tables. Summation runs in
/// f64 over members sorted per element, so the result does not depend on
/// member order; equal entries are returned unchanged.
pub fn mean_scores<T: Scalar>(scores: &[Tensor<T>]) -> Tensor<T> {
    let n = scores.len() as f64;
    let mut column = Vec::with_capacity(scores.len());
    let data = (0..scores[0].numel())
        .map(|i| {
            column.clear();
            column.extend(scores.iter().map(|s| s.data()[i].as_f64()));
            column.sort_by(f64::total_cmp);
            if column[0] == column[column.len() - 1] {
                return scores[0].data()[i];
            }
            T::from_f64(column.iter().sum::<f64>() / n)
        })
        .collect();
    Tensor::from_vec(scores[0].shape(), data).expect("score tables share a shape")
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EnsembleError::Manifest {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect();
    if entries.is_empty() {
        return Err(EnsembleError::Config(format!(
            "manifest {} lists no checkpoints",
            path.display()
        )));
    }
    Ok(entries)
}
