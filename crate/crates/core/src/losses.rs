//! Loss terms of the joint objective and the open-set target fusion.
//!
//! Every differentiable term returns its value together with the gradient
//! with respect to the logits it consumes. Targets built from the weak view
//! (fused open-set targets, pseudo-labels) are constants: no gradient flows
//! into them. All logarithms act on probabilities clamped below at
//! [`PROB_FLOOR`]; a clamped entry contributes no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax, Matrix};
use crate::scalar::{Scalar, PROB_FLOOR};

/// Term weights, confidence thresholds and the unlabelled/labelled batch ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sup: f64,
    pub lambda_reg: f64,
    pub lambda_mb: f64,
    pub lambda_o: f64,
    pub lambda_ui: f64,
    /// open-set target confidence threshold
    pub tau_r: f64,
    /// pseudo-label confidence threshold
    pub tau_p: f64,
    pub mu: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sup: 1.0,
            lambda_reg: 1.0,
            lambda_mb: 1.0,
            lambda_o: 1.0,
            lambda_ui: 1.0,
            tau_r: 0.5,
            tau_p: 0.95,
            mu: 1,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lambda_sup", self.lambda_sup),
            ("lambda_reg", self.lambda_reg),
            ("lambda_mb", self.lambda_mb),
            ("lambda_o", self.lambda_o),
            ("lambda_ui", self.lambda_ui),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name}: must be a finite nonnegative number, got {v}"));
            }
        }
        for (name, v) in [("tau_r", self.tau_r), ("tau_p", self.tau_p)] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name}: must lie in [0, 1], got {v}"));
            }
        }
        if self.mu == 0 {
            out.push("mu: must be a positive integer".into());
        }
        out
    }

    /// True when no term reads the unlabelled batch.
    pub fn supervised_only(&self) -> bool {
        self.lambda_o == 0.0 && self.lambda_ui == 0.0
    }
}

/// A loss value, its gradient w.r.t. the input logits, and how many samples
/// (or rows) actually contributed to it.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Matrix<T>,
    pub contributing: usize,
}

/// Cross-entropy of one logit row against a (possibly soft) target, with the
/// gradient scaled by `scale` written into `grad`.
fn soft_ce_row<T: Scalar>(logits: &[T], target: &[T], scale: T, grad: &mut [T]) -> T {
    let p = softmax(logits);
    let floor = T::lit(PROB_FLOOR);
    let mut loss = T::zero();
    let mut live_mass = T::zero();
    for (&pk, &tk) in p.iter().zip(target) {
        if pk >= floor {
            live_mass += tk;
        }
        loss -= tk * pk.clamped_ln(floor);
    }
    for ((g, &pj), &tj) in grad.iter_mut().zip(&p).zip(target) {
        let own = if pj >= floor { tj } else { T::zero() };
        *g = scale * (pj * live_mass - own);
    }
    loss
}

fn hard_ce_row<T: Scalar>(logits: &[T], label: usize, scale: T, grad: &mut [T]) -> T {
    let mut target = vec![T::zero(); logits.len()];
    target[label] = T::one();
    soft_ce_row(logits, &target, scale, grad)
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

fn check_rows<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// Mean cross-entropy of hard labels; gradient averaged over rows.
fn mean_hard_ce<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<LossValue<T>> {
    check_rows(logits, labels)?;
    check_labels(labels, logits.cols())?;
    let m = logits.rows();
    let scale = T::one() / T::lit(m as f64);
    let mut grad = Matrix::zeros(m, logits.cols());
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        total += hard_ce_row(logits.row(i), y, scale, grad.row_mut(i));
    }
    Ok(LossValue {
        value: total * scale,
        grad,
        contributing: m,
    })
}

/// Supervised cross-entropy over the labelled batch (M×K logits).
pub fn sup_ce<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<LossValue<T>> {
    mean_hard_ce(logits, labels)
}

/// Feature-center regularization: cross-entropy of the fixed-ETF logits of
/// each present class center against that class, averaged over the present
/// classes (one row per class, not per sample).
pub fn reg_loss<T: Scalar>(etf_logits: &Matrix<T>, present_labels: &[usize]) -> Result<LossValue<T>> {
    if etf_logits.rows() == 0 && present_labels.is_empty() {
        return Ok(LossValue {
            value: T::zero(),
            grad: etf_logits.clone(),
            contributing: 0,
        });
    }
    mean_hard_ce(etf_logits, present_labels)
}

/// Splits an M×2K matrix of interleaved per-class binary logits into
/// probability pairs `(o_k, ō_k)` (same interleaved layout).
pub fn binary_pairs<T: Scalar>(binary_logits: &Matrix<T>) -> Matrix<T> {
    let mut out = binary_logits.clone();
    for r in 0..out.rows() {
        for pair in out.row_mut(r).chunks_exact_mut(2) {
            let p = softmax(pair);
            pair.copy_from_slice(&p);
        }
    }
    out
}

/// Hardest negative for sample with label `y`: the class `k ≠ y` with the
/// smallest outlier probability `ō_k` (lowest index on ties).
fn hardest_negative<T: Scalar>(pairs_row: &[T], y: usize) -> usize {
    let mut best: Option<usize> = None;
    for k in 0..pairs_row.len() / 2 {
        if k == y {
            continue;
        }
        match best {
            Some(b) if pairs_row[2 * k + 1] >= pairs_row[2 * b + 1] => {}
            _ => best = Some(k),
        }
    }
    best.expect("at least two classes")
}

fn check_pairs<T: Scalar>(pairs: &Matrix<T>, labels: &[usize]) -> Result<usize> {
    check_rows(pairs, labels)?;
    if pairs.cols() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "binary pairs need an even number of columns, got {}",
            pairs.cols()
        )));
    }
    let k = pairs.cols() / 2;
    if k < 2 {
        return Err(Error::InvalidArgument(
            "multi-binary loss needs at least two classes (no negative exists)".into(),
        ));
    }
    check_labels(labels, k)?;
    Ok(k)
}

/// One-vs-rest loss with hard-negative mining, from probability pairs
/// (M×2K, interleaved `o_k, ō_k`):
/// `mean_i [ -ln o_{i,y} - min_{k≠y} ln ō_{i,k} ]`.
pub fn multi_binary_loss<T: Scalar>(pairs: &Matrix<T>, labels: &[usize]) -> Result<T> {
    check_pairs(pairs, labels)?;
    let floor = T::lit(PROB_FLOOR);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = pairs.row(i);
        let neg = hardest_negative(row, y);
        total += -row[2 * y].clamped_ln(floor) - row[2 * neg + 1].clamped_ln(floor);
    }
    Ok(total / T::lit(labels.len() as f64))
}

/// [`multi_binary_loss`] from binary logits, with the gradient w.r.t. them.
/// The min picks one negative per sample; the gradient is the subgradient
/// through that choice.
pub fn multi_binary_loss_from_logits<T: Scalar>(
    binary_logits: &Matrix<T>,
    labels: &[usize],
) -> Result<LossValue<T>> {
    check_pairs(binary_logits, labels)?;
    let pairs = binary_pairs(binary_logits);
    let value = multi_binary_loss(&pairs, labels)?;
    let floor = T::lit(PROB_FLOOR);
    let scale = T::one() / T::lit(labels.len() as f64);
    let mut grad = Matrix::zeros(pairs.rows(), pairs.cols());
    for (i, &y) in labels.iter().enumerate() {
        let p = pairs.row(i);
        let neg = hardest_negative(p, y);
        let g = grad.row_mut(i);
        // -ln o_y, o = σ(a - b)
        if p[2 * y] >= floor {
            g[2 * y] -= scale * p[2 * y + 1];
            g[2 * y + 1] += scale * p[2 * y + 1];
        }
        // -ln ō_k, ō = σ(b - a)
        if p[2 * neg + 1] >= floor {
            g[2 * neg] += scale * p[2 * neg];
            g[2 * neg + 1] -= scale * p[2 * neg];
        }
    }
    Ok(LossValue {
        value,
        grad,
        contributing: labels.len(),
    })
}

/// Fused (K+1)-way target for one unlabelled sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetTarget<T> {
    pub probs: Vec<T>,
    /// `max_k probs[k] > tau_r`
    pub confident: bool,
}

impl<T: Scalar> OpenSetTarget<T> {
    pub fn max_prob(&self) -> T {
        self.probs.iter().copied().fold(T::zero(), T::max)
    }
}

/// `r_k = z_k · o_k` for seen classes and `r_{K+1} = Σ_j z_j · ō_j`.
///
/// `closed_probs` has length K, `pairs` length 2K (interleaved `o, ō`).
pub fn fuse_open_set_targets<T: Scalar>(closed_probs: &[T], pairs: &[T], tau_r: T) -> Result<OpenSetTarget<T>> {
    let k = closed_probs.len();
    if pairs.len() != 2 * k {
        return Err(Error::Dimension(format!(
            "{k} closed-set probabilities need {} pair entries, got {}",
            2 * k,
            pairs.len()
        )));
    }
    let mut probs = Vec::with_capacity(k + 1);
    let mut outlier = T::zero();
    for (j, &z) in closed_probs.iter().enumerate() {
        probs.push(z * pairs[2 * j]);
        outlier += z * pairs[2 * j + 1];
    }
    probs.push(outlier);
    let confident = probs.iter().copied().fold(T::zero(), T::max) > tau_r;
    Ok(OpenSetTarget { probs, confident })
}

/// Row-wise [`fuse_open_set_targets`] over a batch.
pub fn fuse_batch<T: Scalar>(closed_probs: &Matrix<T>, pairs: &Matrix<T>, tau_r: T) -> Result<Vec<OpenSetTarget<T>>> {
    if closed_probs.rows() != pairs.rows() {
        return Err(Error::Dimension("closed probabilities and pairs disagree on batch size".into()));
    }
    (0..closed_probs.rows())
        .map(|i| fuse_open_set_targets(closed_probs.row(i), pairs.row(i), tau_r))
        .collect()
}

/// Which targets pass the open-set confidence gate.
pub fn open_set_mask<T: Scalar>(targets: &[OpenSetTarget<T>], tau_r: T) -> Vec<bool> {
    targets.iter().map(|t| t.max_prob() > tau_r).collect()
}

/// Soft-target cross-entropy between weak-view fused targets and the
/// strong-view open-set softmax, over confident samples only but averaged
/// over the whole unlabelled batch.
pub fn open_set_loss<T: Scalar>(
    targets: &[OpenSetTarget<T>],
    strong_open_logits: &Matrix<T>,
    tau_r: T,
) -> Result<LossValue<T>> {
    let n = targets.len();
    if strong_open_logits.rows() != n {
        return Err(Error::Dimension(format!(
            "{n} targets but {} strong-view rows",
            strong_open_logits.rows()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty unlabelled batch".into()));
    }
    if let Some(t) = targets.iter().find(|t| t.probs.len() != strong_open_logits.cols()) {
        return Err(Error::Dimension(format!(
            "target of length {} against {} open-set logits",
            t.probs.len(),
            strong_open_logits.cols()
        )));
    }
    let scale = T::one() / T::lit(n as f64);
    let mask = open_set_mask(targets, tau_r);
    let mut grad = Matrix::zeros(n, strong_open_logits.cols());
    let mut total = T::zero();
    let mut kept = 0;
    for (i, t) in targets.iter().enumerate() {
        if mask[i] {
            kept += 1;
            total += soft_ce_row(strong_open_logits.row(i), &t.probs, scale, grad.row_mut(i));
        }
    }
    Ok(LossValue {
        value: total * scale,
        grad,
        contributing: kept,
    })
}

/// Double filter for pseudo-labels: keep sample `i` iff its weak-view
/// closed-set confidence exceeds `tau_p` and the multi-binary head calls it
/// an inlier of the predicted class (`o_{k̂} > 0.5`). Returns the pseudo-label
/// for kept samples.
pub fn inlier_filter<T: Scalar>(closed_probs_weak: &Matrix<T>, pairs_weak: &Matrix<T>, tau_p: T) -> Vec<Option<usize>> {
    let half = T::lit(0.5);
    (0..closed_probs_weak.rows())
        .map(|i| {
            let z = closed_probs_weak.row(i);
            let k = argmax(z);
            (z[k] > tau_p && pairs_weak[(i, 2 * k)] > half).then_some(k)
        })
        .collect()
}

/// Cross-entropy of strong-view closed-set logits against filtered hard
/// pseudo-labels, averaged over the whole unlabelled batch.
pub fn filtered_inlier_loss<T: Scalar>(
    closed_probs_weak: &Matrix<T>,
    pairs_weak: &Matrix<T>,
    strong_closed_logits: &Matrix<T>,
    tau_p: T,
) -> Result<LossValue<T>> {
    let n = closed_probs_weak.rows();
    if pairs_weak.rows() != n || strong_closed_logits.rows() != n {
        return Err(Error::Dimension("weak and strong views must align per sample".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty unlabelled batch".into()));
    }
    let k = closed_probs_weak.cols();
    if pairs_weak.cols() != 2 * k || strong_closed_logits.cols() != k {
        return Err(Error::Dimension(format!(
            "expected {k} closed-set columns and {} pair columns",
            2 * k
        )));
    }
    let scale = T::one() / T::lit(n as f64);
    let mut grad = Matrix::zeros(n, k);
    let mut total = T::zero();
    let mut kept = 0;
    for (i, label) in inlier_filter(closed_probs_weak, pairs_weak, tau_p).into_iter().enumerate() {
        if let Some(y) = label {
            kept += 1;
            total += hard_ce_row(strong_closed_logits.row(i), y, scale, grad.row_mut(i));
        }
    }
    Ok(LossValue {
        value: total * scale,
        grad,
        contributing: kept,
    })
}

/// Unweighted values of the five terms for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub sup: T,
    pub reg: T,
    pub mb: T,
    pub open: T,
    pub inlier: T,
}

impl<T: Scalar> LossTerms<T> {
    pub fn named(&self) -> [(&'static str, T); 5] {
        [
            ("sup", self.sup),
            ("reg", self.reg),
            ("mb", self.mb),
            ("open", self.open),
            ("inlier", self.inlier),
        ]
    }
}

/// `λ_sup·L_sup + λ_reg·L_reg + λ_mb·L_mb + λ_o·L_o + λ_ui·L_ui`.
pub fn total_loss<T: Scalar>(terms: &LossTerms<T>, weights: &LossWeights) -> Result<T> {
    if let Some((name, _)) = terms.named().iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: format!("loss term `{name}`"),
        });
    }
    Ok(T::lit(weights.lambda_sup) * terms.sup
        + T::lit(weights.lambda_reg) * terms.reg
        + T::lit(weights.lambda_mb) * terms.mb
        + T::lit(weights.lambda_o) * terms.open
        + T::lit(weights.lambda_ui) * terms.inlier)
}
