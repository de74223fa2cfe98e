//! End-to-end runs from a [`RunConfig`]: dataset, split, training, and the
//! evaluation protocols, plus the cumulative ablation ladder.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_medmnist, make_split, synth_longtail, Dataset, SplitManifest};
use crate::error::Result;
use crate::evaluation::{report, threshold_sweep, MetricsReport, ScoreSource, ThresholdPoint};
use crate::model::ModelHeads;
use crate::scalar::Scalar;
use crate::training::{fit, FitOutcome, RunRecord};

/// Environment variable naming the directory relative dataset paths resolve
/// against.
pub const DATA_ROOT_ENV: &str = "LTOSR_DATA_ROOT";

pub fn resolve_dataset_path(dataset: &str, data_root: Option<&Path>) -> PathBuf {
    let p = PathBuf::from(dataset);
    match data_root {
        Some(root) if p.is_relative() => root.join(p),
        _ => p,
    }
}

pub fn load_dataset<T: Scalar>(cfg: &RunConfig, data_root: Option<&Path>) -> Result<Dataset<T>> {
    if cfg.is_synthetic() {
        synth_longtail(&cfg.synth_spec())
    } else {
        load_medmnist(&resolve_dataset_path(&cfg.dataset, data_root), cfg.dataset_sha256.as_deref())
    }
}

pub fn build_split<T: Scalar>(dataset: &Dataset<T>, cfg: &RunConfig) -> Result<SplitManifest> {
    make_split(dataset, &cfg.seen_classes, cfg.label_fraction, cfg.split_seed)
}

/// Rows of the cumulative ablation, each adding one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// semi-supervised training, no feature regularization, no weight
    /// decay, no max-norm
    BaselineCe,
    WeightDecay,
    FeatureReg,
    /// everything: also the max-norm projection
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [Variant::BaselineCe, Variant::WeightDecay, Variant::FeatureReg, Variant::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::BaselineCe => "baseline_ce",
            Variant::WeightDecay => "weight_decay",
            Variant::FeatureReg => "feature_reg",
            Variant::Full => "full",
        }
    }

    /// `base` with the components above this rung switched off. Components
    /// at or below it keep `base`'s settings.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let rung = Self::LADDER.iter().position(|v| v == self).expect("listed");
        if rung < 1 {
            cfg.weight_decay = 0.0;
            cfg.classifier_weight_decay = None;
        }
        if rung < 2 {
            cfg.lambda_reg = 0.0;
        }
        if rung < 3 {
            cfg.max_norm = false;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub report: MetricsReport,
    /// hard threshold on the max closed-set softmax at the best τ
    pub closed_softmax_threshold: ThresholdPoint,
    pub record: RunRecord,
}

/// Trains on `manifest` with `cfg` and evaluates the best-validation model.
pub fn run_experiment<T: Scalar>(
    dataset: &Dataset<T>,
    manifest: &SplitManifest,
    cfg: &RunConfig,
) -> Result<(ExperimentResult, FitOutcome<T>)> {
    cfg.validate()?;
    let spec = cfg.model_spec(dataset.kind, manifest.num_seen())?;
    let model = ModelHeads::<T>::new(spec)?;
    let snapshot = cfg.to_json_value();
    let outcome = fit(dataset, manifest, model, &cfg.train_config(), snapshot.clone())?;
    let report = report(&outcome.best_model, dataset, manifest, Some(snapshot))?;
    let closed_softmax_threshold = threshold_sweep(&outcome.best_model, dataset, manifest, ScoreSource::ClosedSoftmax)?;
    Ok((
        ExperimentResult {
            report,
            closed_softmax_threshold,
            record: outcome.record.clone(),
        },
        outcome,
    ))
}
