//! Joint optimisation over labelled and unlabelled batches.
//!
//! One step:
//! 1. labelled batch (weak view): supervised CE on the closed head, the
//!    feature-center loss against the fixed ETF, and the multi-binary loss;
//! 2. unlabelled weak view, no gradient: closed-set probabilities and
//!    binary pairs give the fused open-set targets and the filtered
//!    pseudo-labels;
//! 3. unlabelled strong view: open-set loss on the open head and the
//!    pseudo-label loss on the closed head;
//! 4. SGD step on the weighted sum, then max-norm on the closed head rows.

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, AugmentedPair, Dataset, SplitManifest, TrainingView, ViewMode};
use crate::error::{Error, Result};
use crate::evaluation::eval_closed;
use crate::linalg::Matrix;
use crate::losses::{
    filtered_inlier_loss, fuse_batch, multi_binary_loss_from_logits, open_set_loss, reg_loss, sup_ce, total_loss,
    LossTerms, LossWeights,
};
use crate::model::{apply_etf_head, feature_centers, FeatureBatch, HeadGrads, ModelHeads};
use crate::nn::Parameters;
use crate::optim::{LrSchedule, Sgd};
use crate::regularizers::{max_norm_project_in_place, MaxNormPolicy, WeightDecayPolicy};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// labelled batch size M; unlabelled batches hold `mu · M` samples
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub lr_schedule: LrSchedule,
    pub loss: LossWeights,
    /// `None` disables the projection
    pub max_norm: Option<MaxNormPolicy>,
    pub weight_decay: WeightDecayPolicy,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 0.03,
            momentum: 0.9,
            nesterov: false,
            lr_schedule: LrSchedule::Cosine,
            loss: LossWeights::default(),
            max_norm: Some(MaxNormPolicy::default()),
            weight_decay: WeightDecayPolicy::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("epochs: must be at least 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr: must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum: must lie in [0, 1), got {}", self.momentum));
        }
        if let Some(p) = self.max_norm {
            if !(p.radius > 0.0 && p.radius.is_finite()) {
                out.push(format!("max_norm_radius: must be positive, got {}", p.radius));
            }
        }
        out.extend(self.loss.problems());
        out.extend(self.weight_decay.problems());
        out.extend(self.augment.problems());
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

    pub fn unlabelled_batch_size(&self) -> usize {
        self.loss.mu * self.batch_size
    }
}

/// Weak-view quantities the unlabelled losses treat as constants.
#[derive(Clone, Debug)]
pub struct UnlabelledTargets<T> {
    pub closed_probs: Matrix<T>,
    pub pairs: Matrix<T>,
}

impl<T: Scalar> UnlabelledTargets<T> {
    pub fn from_weak(model: &ModelHeads<T>, weak: &Matrix<T>) -> Result<Self> {
        let out = model.predict(weak)?;
        Ok(Self {
            closed_probs: out.closed_probs(),
            pairs: out.binary_pairs(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub lr: f64,
    pub terms: LossTerms<f64>,
    pub total: f64,
    /// unlabelled samples passing the open-set gate / the inlier filter
    pub open_kept: usize,
    pub inlier_kept: usize,
}

/// Loss terms and their gradient for one step, with weak-view targets held
/// fixed. Gradients are accumulated into `grad` (which should start zeroed).
pub fn joint_loss_and_grad<T: Scalar>(
    model: &ModelHeads<T>,
    labelled: &Matrix<T>,
    labels: &[usize],
    unlabelled: Option<(&UnlabelledTargets<T>, &Matrix<T>)>,
    weights: &LossWeights,
    grad: &mut ModelHeads<T>,
) -> Result<StepRecord> {
    let k = model.num_classes();
    let lam = |v: f64| T::lit(v);
    let scaled = |mut m: Matrix<T>, w: f64| {
        m.scale(lam(w));
        m
    };

    let (out, cache) = model.forward(labelled)?;
    let sup = sup_ce(&out.closed_logits, labels)?;

    let batch = FeatureBatch::new(out.features.clone(), labels.to_vec(), k)?;
    let centers = feature_centers(&batch, k);
    let (etf_logits, present) = apply_etf_head(&centers, model.etf())?;
    let reg = reg_loss(&etf_logits, &present)?;
    // z̄ = v̄·N, so dv̄ = dz̄·Nᵀ
    let d_centers = reg.grad.matmul_nt(model.etf().vectors());
    let d_features = centers.backward(labels, &d_centers);

    let mb = multi_binary_loss_from_logits(&out.binary_logits, labels)?;

    let mut terms = LossTerms {
        sup: sup.value,
        reg: reg.value,
        mb: mb.value,
        open: T::zero(),
        inlier: T::zero(),
    };
    let mut record = StepRecord::default();

    let upstream = HeadGrads {
        closed: Some(scaled(sup.grad, weights.lambda_sup)),
        open: None,
        binary: (weights.lambda_mb != 0.0).then(|| scaled(mb.grad, weights.lambda_mb)),
        features: (weights.lambda_reg != 0.0).then(|| scaled(d_features, weights.lambda_reg)),
    };

    let mut strong_pass = None;
    if let Some((targets, strong)) = unlabelled {
        let (out_s, cache_s) = model.forward(strong)?;
        let fused = fuse_batch(&targets.closed_probs, &targets.pairs, lam(weights.tau_r))?;
        let open = open_set_loss(&fused, &out_s.open_logits, lam(weights.tau_r))?;
        let inlier = filtered_inlier_loss(&targets.closed_probs, &targets.pairs, &out_s.closed_logits, lam(weights.tau_p))?;
        terms.open = open.value;
        terms.inlier = inlier.value;
        record.open_kept = open.contributing;
        record.inlier_kept = inlier.contributing;
        let g = HeadGrads {
            closed: Some(scaled(inlier.grad, weights.lambda_ui)),
            open: Some(scaled(open.grad, weights.lambda_o)),
            binary: None,
            features: None,
        };
        strong_pass = Some((out_s, cache_s, g));
    }

    let total = total_loss(&terms, weights)?;
    model.backward(&out, &cache, &upstream, grad)?;
    if let Some((out_s, cache_s, g)) = strong_pass {
        model.backward(&out_s, &cache_s, &g, grad)?;
    }

    record.terms = LossTerms {
        sup: terms.sup.as_f64(),
        reg: terms.reg.as_f64(),
        mb: terms.mb.as_f64(),
        open: terms.open.as_f64(),
        inlier: terms.inlier.as_f64(),
    };
    record.total = total.as_f64();
    Ok(record)
}

/// Model plus optimizer state; owns the parameters during updates.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ModelHeads<T>,
    pub optimizer: Sgd<T>,
    pub config: TrainConfig,
    grad: ModelHeads<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelHeads<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(&model, config.momentum, config.nesterov);
        let grad = model.zeros_like();
        Ok(Self {
            model,
            optimizer,
            config,
            grad,
        })
    }

    /// One update. `unlabelled` is `(weak, strong)` views of the same samples.
    pub fn step(
        &mut self,
        labelled: &Matrix<T>,
        labels: &[usize],
        unlabelled: Option<(&Matrix<T>, &Matrix<T>)>,
        lr: f64,
        epoch: usize,
    ) -> Result<StepRecord> {
        let targets = match unlabelled {
            Some((weak, strong)) if !self.config.loss.supervised_only() => {
                Some((UnlabelledTargets::from_weak(&self.model, weak)?, strong))
            }
            _ => None,
        };
        self.grad.fill_zero();
        let mut record = joint_loss_and_grad(
            &self.model,
            labelled,
            labels,
            targets.as_ref().map(|(t, s)| (t, *s)),
            &self.config.loss,
            &mut self.grad,
        )?;
        record.lr = lr;
        self.optimizer
            .step(&mut self.model, &self.grad, lr, &self.config.weight_decay, epoch)?;
        if let Some(p) = self.config.max_norm {
            max_norm_project_in_place(&mut self.model.closed_head.weight, T::lit(p.radius))?;
        }
        Ok(record)
    }
}

/// Per-epoch means of the step records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// learning rate at the first step of the epoch
    pub lr: f64,
    pub steps: usize,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_reg: f64,
    pub loss_mb: f64,
    pub loss_open: f64,
    pub loss_inlier: f64,
    pub val_closed_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_sup,loss_reg,loss_mb,loss_open,loss_inlier,val_closed_acc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// index into `epochs` of the highest validation accuracy (earliest on ties)
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub config: serde_json::Value,
    pub source_revision: String,
    /// label reads of unseen classes during training; must be 0
    pub unseen_label_reads: usize,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch, e.lr, e.loss_total, e.loss_sup, e.loss_reg, e.loss_mb, e.loss_open, e.loss_inlier, e.val_closed_acc
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn source_revision() -> String {
    match option_env!("LTOSR_GIT_REV") {
        Some(rev) => format!("ltosr-core {} ({rev})", env!("CARGO_PKG_VERSION")),
        None => format!("ltosr-core {}", env!("CARGO_PKG_VERSION")),
    }
}

/// Everything needed to continue a run at an epoch boundary.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub trainer: Trainer<T>,
    /// next epoch to run (0-based)
    pub next_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<(usize, ModelHeads<T>)>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(model: ModelHeads<T>, config: TrainConfig) -> Result<Self> {
        Ok(Self {
            trainer: Trainer::new(model, config)?,
            next_epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }
}

/// Optional hooks into [`fit_with`].
#[derive(Default)]
pub struct FitOptions<'a, T> {
    /// stop after this many epochs in this call (for checkpoint/resume)
    pub max_epochs: Option<usize>,
    /// called after every step with the global step index
    pub on_step: Option<&'a mut dyn FnMut(usize, &StepRecord, &ModelHeads<T>)>,
    /// called after every epoch with the updated state
    pub on_epoch: Option<&'a mut dyn FnMut(&TrainState<T>) -> Result<()>>,
}

pub struct FitOutcome<T> {
    pub record: RunRecord,
    pub best_model: ModelHeads<T>,
    pub state: TrainState<T>,
}

/// Unlabelled ids for each step of `epoch` and the matching labelled batches.
fn epoch_plan(view: &TrainingView, cfg: &TrainConfig, epoch: usize) -> Vec<(Vec<(usize, usize)>, Vec<usize>)> {
    use rand::seq::SliceRandom;
    let mut rng = rng_for(&[stream::EPOCH, cfg.seed, epoch as u64]);
    let mut unlabelled = view.unlabelled.clone();
    unlabelled.shuffle(&mut rng);
    let ub = cfg.unlabelled_batch_size();
    let steps = unlabelled.len().div_ceil(ub).max(1);
    let mut queue: Vec<(usize, usize)> = Vec::new();
    (0..steps)
        .map(|s| {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size {
                if queue.is_empty() {
                    queue = view.labelled.clone();
                    queue.shuffle(&mut rng);
                }
                batch.push(queue.pop().expect("labelled set is non-empty"));
            }
            let end = ((s + 1) * ub).min(unlabelled.len());
            let ub_ids = unlabelled.get(s * ub..end).map(<[usize]>::to_vec).unwrap_or_default();
            (batch, ub_ids)
        })
        .collect()
}

fn views<T: Scalar>(
    dataset: &Dataset<T>,
    ids: &[usize],
    cfg: &AugmentConfig,
    rng: &mut crate::rng::Rng,
    strong: bool,
) -> (Matrix<T>, Option<Matrix<T>>) {
    let len = dataset.kind.len();
    let mut weak = Vec::with_capacity(ids.len() * len);
    let mut strong_v = Vec::with_capacity(if strong { ids.len() * len } else { 0 });
    for &id in ids {
        let x = dataset.sample(id);
        if strong {
            let pair = AugmentedPair::new(x, dataset.kind, cfg, rng);
            weak.extend(pair.weak);
            strong_v.extend(pair.strong);
        } else {
            weak.extend(crate::data::augment(x, dataset.kind, ViewMode::Weak, cfg, rng));
        }
    }
    let weak = Matrix::from_vec(ids.len(), len, weak).expect("sample layout");
    let strong_m = strong.then(|| Matrix::from_vec(ids.len(), len, strong_v).expect("sample layout"));
    (weak, strong_m)
}

pub fn fit<T: Scalar>(
    dataset: &Dataset<T>,
    manifest: &SplitManifest,
    model: ModelHeads<T>,
    config: &TrainConfig,
    config_snapshot: serde_json::Value,
) -> Result<FitOutcome<T>> {
    let state = TrainState::fresh(model, config.clone())?;
    fit_with(dataset, manifest, state, config_snapshot, FitOptions::default())
}

/// Runs the remaining epochs of `state`. Epoch `e` draws its batches and
/// augmentations from streams keyed by `(seed, e)`, so a run resumed at an
/// epoch boundary continues exactly as the uninterrupted one.
pub fn fit_with<T: Scalar>(
    dataset: &Dataset<T>,
    manifest: &SplitManifest,
    mut state: TrainState<T>,
    config_snapshot: serde_json::Value,
    mut options: FitOptions<'_, T>,
) -> Result<FitOutcome<T>> {
    let cfg = state.trainer.config.clone();
    cfg.validate()?;
    let model = &state.trainer.model;
    if model.num_classes() != manifest.num_seen() {
        return Err(Error::Mismatch(format!(
            "model has K={} closed-set outputs but the manifest lists {} seen classes",
            model.num_classes(),
            manifest.num_seen()
        )));
    }
    if model.backbone.input_len() != dataset.kind.len() {
        return Err(Error::Mismatch(format!(
            "backbone expects inputs of length {}, dataset samples have {}",
            model.backbone.input_len(),
            dataset.kind.len()
        )));
    }
    let reads_before = dataset.label_reads();
    let view = TrainingView::new(dataset, manifest)?;
    let val = if view.val.is_empty() { view.labelled.clone() } else { view.val.clone() };

    let steps_per_epoch = view.unlabelled.len().div_ceil(cfg.unlabelled_batch_size()).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;
    let use_unlabelled = !cfg.loss.supervised_only();
    let last = match options.max_epochs {
        Some(n) => (state.next_epoch + n).min(cfg.epochs),
        None => cfg.epochs,
    };

    for epoch in state.next_epoch..last {
        let plan = epoch_plan(&view, &cfg, epoch);
        let mut sums = StepRecord::default();
        let mut first_lr = None;
        for (s, (lab, unl)) in plan.iter().enumerate() {
            let global = epoch * steps_per_epoch + s;
            let lr = cfg.lr_schedule.lr_at(cfg.lr, global, total_steps);
            first_lr.get_or_insert(lr);
            let mut rng = rng_for(&[stream::AUGMENT, cfg.seed, epoch as u64, s as u64]);
            let ids: Vec<usize> = lab.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = lab.iter().map(|p| p.1).collect();
            let (x_l, _) = views(dataset, &ids, &cfg.augment, &mut rng, false);
            let unl_views = (use_unlabelled && !unl.is_empty()).then(|| views(dataset, unl, &cfg.augment, &mut rng, true));
            let unl_pair = unl_views.as_ref().map(|(w, s)| (w, s.as_ref().expect("strong view")));
            let rec = state.trainer.step(&x_l, &labels, unl_pair, lr, epoch)?;
            sums.total += rec.total;
            sums.terms.sup += rec.terms.sup;
            sums.terms.reg += rec.terms.reg;
            sums.terms.mb += rec.terms.mb;
            sums.terms.open += rec.terms.open;
            sums.terms.inlier += rec.terms.inlier;
            if let Some(cb) = options.on_step.as_mut() {
                cb(global, &rec, &state.trainer.model);
            }
        }
        let n = plan.len() as f64;
        let val_acc = eval_closed(&state.trainer.model, dataset, &val)?.closed_set_acc;
        state.history.push(EpochRecord {
            epoch,
            lr: first_lr.unwrap_or(cfg.lr),
            steps: plan.len(),
            loss_total: sums.total / n,
            loss_sup: sums.terms.sup / n,
            loss_reg: sums.terms.reg / n,
            loss_mb: sums.terms.mb / n,
            loss_open: sums.terms.open / n,
            loss_inlier: sums.terms.inlier / n,
            val_closed_acc: val_acc,
        });
        let improved = match &state.best {
            None => true,
            Some((b, _)) => val_acc > state.history[*b].val_closed_acc,
        };
        if improved {
            state.best = Some((state.history.len() - 1, state.trainer.model.clone()));
        }
        state.next_epoch = epoch + 1;
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&state)?;
        }
    }

    let reads_after = dataset.label_reads();
    let unseen_label_reads = manifest
        .unseen_classes
        .iter()
        .map(|&c| reads_after[c] - reads_before[c])
        .sum();
    let (best_epoch, best_model) = state
        .best
        .clone()
        .ok_or_else(|| Error::InvalidArgument("no epoch was run".into()))?;
    let record = RunRecord {
        best_val_acc: state.history[best_epoch].val_closed_acc,
        epochs: state.history.clone(),
        best_epoch,
        config: config_snapshot,
        source_revision: source_revision(),
        unseen_label_reads,
    };
    Ok(FitOutcome {
        record,
        best_model,
        state,
    })
}
