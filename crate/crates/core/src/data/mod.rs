//! Datasets, split manifests, synthetic long-tail data, MedMNIST archives and
//! weak/strong augmentation.

pub mod augment;
pub mod medmnist;
pub mod split;
pub mod synth;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub use augment::{augment, AugmentConfig, AugmentedPair, ViewMode};
pub use medmnist::{load_medmnist, save_npz};
pub use split::{make_split, SplitManifest, TrainingView};
pub use synth::{synth_longtail, LongTailSpec};

/// Layout of one sample. Images are stored flattened in HWC order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleKind {
    Vector { dim: usize },
    Image { height: usize, width: usize, channels: usize },
}

impl SampleKind {
    pub fn len(&self) -> usize {
        match *self {
            SampleKind::Vector { dim } => dim,
            SampleKind::Image { height, width, channels } => height * width * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Enough to tell whether a manifest was made for a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub name: String,
    pub num_samples: usize,
    pub num_classes: usize,
}

/// In-memory labelled dataset with its shipped train/val/test partition.
///
/// Label reads through [`Dataset::label`] are counted per class so callers can
/// audit which labels a code path touched.
#[derive(Debug)]
pub struct Dataset<T> {
    pub name: String,
    pub kind: SampleKind,
    pub num_classes: usize,
    samples: Vec<T>,
    labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    label_reads: Vec<AtomicUsize>,
}

impl<T: Clone> Clone for Dataset<T> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            kind: self.kind,
            num_classes: self.num_classes,
            samples: self.samples.clone(),
            labels: self.labels.clone(),
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            label_reads: (0..self.num_classes).map(|_| AtomicUsize::new(0)).collect(),
        }
    }
}

impl<T: Scalar> Dataset<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        kind: SampleKind,
        num_classes: usize,
        samples: Vec<T>,
        labels: Vec<usize>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if samples.len() != n * kind.len() {
            return Err(Error::Dataset(format!(
                "{} sample values for {n} samples of length {}",
                samples.len(),
                kind.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: l, num_classes });
        }
        if let Some(&i) = train.iter().chain(&val).chain(&test).find(|&&i| i >= n) {
            return Err(Error::Dataset(format!("split index {i} out of range for {n} samples")));
        }
        Ok(Self {
            name: name.into(),
            kind,
            num_classes,
            samples,
            labels,
            train,
            val,
            test,
            label_reads: (0..num_classes).map(|_| AtomicUsize::new(0)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, id: usize) -> &[T] {
        let l = self.kind.len();
        &self.samples[id * l..(id + 1) * l]
    }

    /// Label of sample `id`; counted in the per-class read tally.
    pub fn label(&self, id: usize) -> usize {
        let y = self.labels[id];
        self.label_reads[y].fetch_add(1, Ordering::Relaxed);
        y
    }

    /// Reads recorded so far, per class.
    pub fn label_reads(&self) -> Vec<usize> {
        self.label_reads.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    /// Stacks samples into a batch matrix, one row per id.
    pub fn batch(&self, ids: &[usize]) -> Matrix<T> {
        let l = self.kind.len();
        let mut data = Vec::with_capacity(ids.len() * l);
        for &id in ids {
            data.extend_from_slice(self.sample(id));
        }
        Matrix::from_vec(ids.len(), l, data).expect("sample layout")
    }

    pub fn class_counts(&self, ids: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &id in ids {
            counts[self.labels[id]] += 1;
        }
        counts
    }

    pub fn fingerprint(&self) -> DatasetFingerprint {
        DatasetFingerprint {
            name: self.name.clone(),
            num_samples: self.len(),
            num_classes: self.num_classes,
        }
    }

    pub(crate) fn raw_labels(&self) -> &[usize] {
        &self.labels
    }

    #[cfg(test)]
    pub(crate) fn raw_samples(&self) -> &[T] {
        &self.samples
    }
}
