//! Flat TOML run configuration. Every key is optional; unknown keys and
//! ill-typed values are all reported at once.

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, LongTailSpec, SampleKind};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelSpec;
use crate::nn::BackboneSpec;
use crate::optim::LrSchedule;
use crate::regularizers::{DecaySchedule, MaxNormPolicy, WeightDecayPolicy};
use crate::training::TrainConfig;

/// Dataset value selecting the generated long-tail blobs.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub dataset_sha256: Option<String>,
    pub synth_num_classes: usize,
    pub synth_max_count: usize,
    pub synth_imbalance_ratio: f64,
    pub synth_feature_dim: usize,
    pub synth_separation: f64,
    pub synth_noise: f64,
    pub synth_val_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_seed: u64,

    pub seen_classes: Vec<usize>,
    pub label_fraction: f64,
    pub split_seed: u64,

    pub backbone: BackboneKind,
    pub mlp_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub conv_channels: Vec<usize>,
    pub conv_residual: bool,
    pub embedding_dim: usize,
    pub proj_hidden_dim: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub mu: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub lr_schedule: LrSchedule,

    pub lambda_sup: f64,
    pub lambda_reg: f64,
    pub lambda_mb: f64,
    pub lambda_o: f64,
    pub lambda_ui: f64,
    pub tau_r: f64,
    pub tau_p: f64,

    pub max_norm: bool,
    pub max_norm_radius: f64,
    pub weight_decay: f64,
    pub classifier_weight_decay: Option<f64>,
    pub decay_stage_epoch: Option<usize>,

    pub aug_weak_noise: f64,
    pub aug_strong_noise: f64,
    pub aug_cutout_fraction: f64,
    pub aug_max_shift: usize,

    pub seed: u64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = LongTailSpec::default();
        let train = TrainConfig::default();
        let aug = AugmentConfig::default();
        let w = LossWeights::default();
        Self {
            dataset: SYNTHETIC.into(),
            dataset_sha256: None,
            synth_num_classes: synth.num_classes,
            synth_max_count: synth.max_count,
            synth_imbalance_ratio: synth.imbalance_ratio,
            synth_feature_dim: synth.feature_dim,
            synth_separation: synth.separation,
            synth_noise: synth.noise,
            synth_val_per_class: synth.val_per_class,
            synth_test_per_class: synth.test_per_class,
            synth_seed: synth.seed,
            seen_classes: vec![0, 1, 2, 3, 4],
            label_fraction: 0.25,
            split_seed: 0,
            backbone: BackboneKind::Mlp,
            mlp_hidden: vec![64],
            feature_dim: 32,
            conv_channels: vec![16, 32],
            conv_residual: false,
            embedding_dim: 128,
            proj_hidden_dim: 128,
            epochs: train.epochs,
            batch_size: train.batch_size,
            mu: w.mu,
            lr: train.lr,
            momentum: train.momentum,
            nesterov: train.nesterov,
            lr_schedule: train.lr_schedule,
            lambda_sup: w.lambda_sup,
            lambda_reg: w.lambda_reg,
            lambda_mb: w.lambda_mb,
            lambda_o: w.lambda_o,
            lambda_ui: w.lambda_ui,
            tau_r: w.tau_r,
            tau_p: w.tau_p,
            max_norm: true,
            max_norm_radius: MaxNormPolicy::default().radius,
            weight_decay: WeightDecayPolicy::default().coefficient,
            classifier_weight_decay: None,
            decay_stage_epoch: None,
            aug_weak_noise: aug.weak_noise,
            aug_strong_noise: aug.strong_noise,
            aug_cutout_fraction: aug.cutout_fraction,
            aug_max_shift: aug.max_shift,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

/// Every key with a one-line description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("dataset", "\"synthetic\" or a MedMNIST .npz path (relative paths resolve against the data root)"),
    ("dataset_sha256", "expected SHA-256 of the .npz file (optional)"),
    ("synth_num_classes", "synthetic: number of classes"),
    ("synth_max_count", "synthetic: training samples of the head class"),
    ("synth_imbalance_ratio", "synthetic: head/tail count ratio"),
    ("synth_feature_dim", "synthetic: sample dimension"),
    ("synth_separation", "synthetic: distance of class means from the origin"),
    ("synth_noise", "synthetic: per-coordinate noise std"),
    ("synth_val_per_class", "synthetic: validation samples per class (0 = carve from labels)"),
    ("synth_test_per_class", "synthetic: test samples per class"),
    ("synth_seed", "synthetic: generator seed"),
    ("seen_classes", "original class indices seen during training"),
    ("label_fraction", "fraction of seen-class training samples that keep labels, in (0, 1]"),
    ("split_seed", "seed for the labelled subset"),
    ("backbone", "\"mlp\" or \"conv\""),
    ("mlp_hidden", "mlp: hidden layer widths"),
    ("feature_dim", "mlp: feature dimension d (needs d >= number of seen classes)"),
    ("conv_channels", "conv: channels per stage; the last is d"),
    ("conv_residual", "conv: add a residual block per stage"),
    ("embedding_dim", "projection head output width"),
    ("proj_hidden_dim", "projection head hidden width"),
    ("epochs", "training epochs (>= 1)"),
    ("batch_size", "labelled batch size M"),
    ("mu", "unlabelled batch size is mu * M"),
    ("lr", "initial learning rate"),
    ("momentum", "SGD momentum"),
    ("nesterov", "Nesterov momentum"),
    ("lr_schedule", "\"cosine\" or \"constant\""),
    ("lambda_sup", "weight of the supervised CE"),
    ("lambda_reg", "weight of the feature-center (ETF) loss"),
    ("lambda_mb", "weight of the multi-binary loss"),
    ("lambda_o", "weight of the open-set loss"),
    ("lambda_ui", "weight of the filtered pseudo-label loss"),
    ("tau_r", "open-set target confidence threshold"),
    ("tau_p", "pseudo-label confidence threshold"),
    ("max_norm", "project closed-head rows onto a ball after each step"),
    ("max_norm_radius", "radius a of that ball"),
    ("weight_decay", "L2 coefficient for all parameters"),
    ("classifier_weight_decay", "L2 coefficient for the closed head (defaults to weight_decay)"),
    ("decay_stage_epoch", "if set, only the closed head is decayed from this epoch on"),
    ("aug_weak_noise", "vector data: weak-view jitter std"),
    ("aug_strong_noise", "vector data: strong-view jitter std"),
    ("aug_cutout_fraction", "strong-view cutout size (fraction)"),
    ("aug_max_shift", "images: max weak-view translation in pixels"),
    ("seed", "model initialisation, batching and augmentation seed"),
    ("precision", "\"f32\" or \"f64\""),
];

impl RunConfig {
    /// Parses TOML, reporting every unknown or ill-typed key, then every
    /// semantic problem.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut problems = Vec::new();
        for (key, value) in &table {
            if !CONFIG_KEYS.iter().any(|(k, _)| k == key) {
                problems.push(format!("{key}: unknown key"));
                continue;
            }
            let mut single = toml::Table::new();
            single.insert(key.clone(), value.clone());
            if let Err(e) = toml::Value::Table(single).try_into::<RunConfig>() {
                problems.push(format!("{key}: {}", e.message().trim()));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn is_synthetic(&self) -> bool {
        self.dataset == SYNTHETIC
    }

    pub fn synth_spec(&self) -> LongTailSpec {
        LongTailSpec {
            num_classes: self.synth_num_classes,
            max_count: self.synth_max_count,
            imbalance_ratio: self.synth_imbalance_ratio,
            feature_dim: self.synth_feature_dim,
            separation: self.synth_separation,
            noise: self.synth_noise,
            val_per_class: self.synth_val_per_class,
            test_per_class: self.synth_test_per_class,
            seed: self.synth_seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_sup: self.lambda_sup,
            lambda_reg: self.lambda_reg,
            lambda_mb: self.lambda_mb,
            lambda_o: self.lambda_o,
            lambda_ui: self.lambda_ui,
            tau_r: self.tau_r,
            tau_p: self.tau_p,
            mu: self.mu,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            lr_schedule: self.lr_schedule,
            loss: self.loss_weights(),
            max_norm: self.max_norm.then_some(MaxNormPolicy { radius: self.max_norm_radius }),
            weight_decay: WeightDecayPolicy {
                coefficient: self.weight_decay,
                classifier_coefficient: self.classifier_weight_decay,
                schedule: match self.decay_stage_epoch {
                    Some(stage_epoch) => DecaySchedule::TwoStage { stage_epoch },
                    None => DecaySchedule::Uniform,
                },
            },
            augment: AugmentConfig {
                weak_noise: self.aug_weak_noise,
                strong_noise: self.aug_strong_noise,
                cutout_fraction: self.aug_cutout_fraction,
                max_shift: self.aug_max_shift,
            },
            seed: self.seed,
        }
    }

    /// Model layout for `num_seen` classes on samples of `kind`.
    pub fn model_spec(&self, kind: SampleKind, num_seen: usize) -> Result<ModelSpec> {
        let backbone = match (self.backbone, kind) {
            (BackboneKind::Mlp, kind) => BackboneSpec::Mlp {
                input_dim: kind.len(),
                hidden: self.mlp_hidden.clone(),
                feature_dim: self.feature_dim,
            },
            (BackboneKind::Conv, SampleKind::Image { height, width, channels }) => BackboneSpec::Conv {
                height,
                width,
                channels,
                stage_channels: self.conv_channels.clone(),
                residual: self.conv_residual,
            },
            (BackboneKind::Conv, SampleKind::Vector { .. }) => {
                return Err(Error::Config(vec!["backbone: \"conv\" needs image data".into()]))
            }
        };
        let spec = ModelSpec {
            backbone,
            num_classes: num_seen,
            embedding_dim: self.embedding_dim,
            proj_hidden_dim: self.proj_hidden_dim,
            seed: self.seed,
        };
        let problems = spec.problems();
        if problems.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train_config().problems();
        if self.is_synthetic() {
            out.extend(self.synth_spec().problems());
        }
        if self.seen_classes.len() < 2 {
            out.push(format!("seen_classes: need at least 2, got {:?}", self.seen_classes));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            out.push(format!("label_fraction: must lie in (0, 1], got {}", self.label_fraction));
        }
        if self.mlp_hidden.contains(&0) || self.conv_channels.contains(&0) || self.conv_channels.is_empty() {
            out.push("mlp_hidden / conv_channels: widths must be positive".into());
        }
        let d = match self.backbone {
            BackboneKind::Mlp => self.feature_dim,
            BackboneKind::Conv => self.conv_channels.last().copied().unwrap_or(0),
        };
        if d < self.seen_classes.len() {
            out.push(format!(
                "feature_dim: the ETF head needs d >= {} seen classes, got {d}",
                self.seen_classes.len()
            ));
        }
        if self.embedding_dim == 0 || self.proj_hidden_dim == 0 {
            out.push("embedding_dim / proj_hidden_dim: must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }

    /// Short hash of the canonical JSON form, embedded in artifacts.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_json_value()).expect("plain data");
        crate::data::medmnist::sha256_hex(canonical.as_bytes())[..16].to_string()
    }
}
