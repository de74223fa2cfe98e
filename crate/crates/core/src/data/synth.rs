//! Gaussian class blobs with power-law class sizes, a desk-scale stand-in for
//! long-tailed image datasets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SampleKind};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongTailSpec {
    pub num_classes: usize,
    /// training samples of the head class (class 0)
    pub max_count: usize,
    /// head count / tail count
    pub imbalance_ratio: f64,
    pub feature_dim: usize,
    /// distance of every class mean from the origin
    pub separation: f64,
    /// per-coordinate standard deviation around the class mean
    pub noise: f64,
    /// balanced validation split size; 0 ships no validation split
    pub val_per_class: usize,
    /// balanced test split size
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            num_classes: 7,
            max_count: 500,
            imbalance_ratio: 50.0,
            feature_dim: 16,
            separation: 2.5,
            noise: 1.0,
            val_per_class: 20,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_classes < 2 {
            out.push(format!("synth_num_classes: need at least 2, got {}", self.num_classes));
        }
        if self.max_count == 0 {
            out.push("synth_max_count: must be positive".into());
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            out.push(format!("synth_imbalance_ratio: must be >= 1, got {}", self.imbalance_ratio));
        }
        if self.feature_dim == 0 {
            out.push("synth_feature_dim: must be positive".into());
        }
        if !(self.separation >= 0.0 && self.noise > 0.0) {
            out.push("synth_separation must be >= 0 and synth_noise > 0".into());
        }
        if self.test_per_class == 0 {
            out.push("synth_test_per_class: must be positive".into());
        }
        out
    }

    /// `n_k = round(n_max · ρ^(−k/(K−1)))`.
    pub fn class_counts(&self) -> Vec<usize> {
        let k_total = self.num_classes;
        (0..k_total)
            .map(|k| {
                let expo = if k_total > 1 { -(k as f64) / (k_total - 1) as f64 } else { 0.0 };
                (self.max_count as f64 * self.imbalance_ratio.powf(expo)).round() as usize
            })
            .collect()
    }

    pub fn dataset_name(&self) -> String {
        format!(
            "synthetic-k{}-n{}-rho{}-d{}-seed{}",
            self.num_classes, self.max_count, self.imbalance_ratio, self.feature_dim, self.seed
        )
    }
}

/// Draws the dataset. Samples are laid out train, then val, then test, each
/// grouped by class; class means are seeded random directions scaled to
/// `separation`.
pub fn synth_longtail<T: Scalar>(spec: &LongTailSpec) -> Result<Dataset<T>> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    let dim = spec.feature_dim;
    let mut rng = rng_for(&[stream::SYNTH, spec.seed]);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x * spec.separation / norm).collect()
        })
        .collect();

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut draw = |class: usize, count: usize, rng: &mut crate::rng::Rng| -> Vec<usize> {
        let start = labels.len();
        for _ in 0..count {
            for &m in &means[class] {
                let z: f64 = rng.sample(StandardNormal);
                samples.push(T::lit(m + spec.noise * z));
            }
            labels.push(class);
        }
        (start..start + count).collect()
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (k, &n) in spec.class_counts().iter().enumerate() {
        train.extend(draw(k, n, &mut rng));
    }
    for k in 0..spec.num_classes {
        val.extend(draw(k, spec.val_per_class, &mut rng));
    }
    for k in 0..spec.num_classes {
        test.extend(draw(k, spec.test_per_class, &mut rng));
    }
    Dataset::new(
        spec.dataset_name(),
        SampleKind::Vector { dim },
        spec.num_classes,
        samples,
        labels,
        train,
        val,
        test,
    )
}
