//! Closed-set and open-set accuracy, the hard-threshold outlier protocol and
//! the metrics report.
//!
//! Accuracies are percentages. Argmax ties resolve to the lower index.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitManifest};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ModelHeads;
use crate::scalar::Scalar;

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Head outputs for a list of samples.
#[derive(Clone, Debug)]
pub struct Predictions<T> {
    pub closed_logits: Matrix<T>,
    pub open_logits: Matrix<T>,
    /// interleaved `(o_k, ō_k)`
    pub pairs: Matrix<T>,
}

impl<T: Scalar> Predictions<T> {
    pub fn closed_argmax(&self) -> Vec<usize> {
        self.closed_logits.argmax_rows()
    }

    pub fn open_argmax(&self) -> Vec<usize> {
        self.open_logits.argmax_rows()
    }

    pub fn scores(&self, source: ScoreSource) -> Vec<f64> {
        match source {
            ScoreSource::ClosedSoftmax => self
                .closed_logits
                .softmax_rows()
                .iter_rows()
                .map(|r| r.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64())))
                .collect(),
            ScoreSource::MultiBinary => self
                .pairs
                .iter_rows()
                .map(|r| r.iter().step_by(2).fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64())))
                .collect(),
        }
    }
}

fn stack<T: Scalar>(parts: Vec<Matrix<T>>, cols: usize) -> Matrix<T> {
    let rows = parts.iter().map(|m| m.rows()).sum();
    let data = parts.into_iter().flat_map(|m| m.into_vec()).collect();
    Matrix::from_vec(rows, cols, data).expect("consistent widths")
}

pub fn predict_ids<T: Scalar>(model: &ModelHeads<T>, dataset: &Dataset<T>, ids: &[usize]) -> Result<Predictions<T>> {
    let k = model.num_classes();
    let (mut closed, mut open, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let out = model.predict(&dataset.batch(chunk))?;
        pairs.push(out.binary_pairs());
        closed.push(out.closed_logits);
        open.push(out.open_logits);
    }
    Ok(Predictions {
        closed_logits: stack(closed, k),
        open_logits: stack(open, k + 1),
        pairs: stack(pairs, 2 * k),
    })
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Percentage of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty test set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(percent(correct, labels.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedEval {
    pub closed_set_acc: f64,
    /// `None` for classes with no test samples
    pub per_class_acc: Vec<Option<f64>>,
    pub total: usize,
}

pub fn closed_eval_from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ClosedEval> {
    let closed_set_acc = accuracy(predictions, labels)?;
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange { label: y, num_classes });
        }
        counts[y] += 1;
        hits[y] += usize::from(p == y);
    }
    Ok(ClosedEval {
        closed_set_acc,
        per_class_acc: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| (n > 0).then(|| percent(h, n)))
            .collect(),
        total: labels.len(),
    })
}

/// Argmax over the K closed-set outputs on seen-class samples given as
/// `(sample id, seen-class index)`.
pub fn eval_closed<T: Scalar>(model: &ModelHeads<T>, dataset: &Dataset<T>, samples: &[(usize, usize)]) -> Result<ClosedEval> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("closed-set evaluation needs seen-class test samples".into()));
    }
    let ids: Vec<usize> = samples.iter().map(|s| s.0).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.1).collect();
    let preds = predict_ids(model, dataset, &ids)?.closed_argmax();
    closed_eval_from_predictions(&preds, &labels, model.num_classes())
}

/// Percentage of rows whose argmax is the outlier slot (the last column).
pub fn open_acc_from_logits<T: Scalar>(open_logits: &Matrix<T>) -> Result<f64> {
    if open_logits.rows() == 0 {
        return Err(Error::InvalidArgument("open-set evaluation needs unseen-class test samples".into()));
    }
    let slot = open_logits.cols() - 1;
    let hits = open_logits.argmax_rows().iter().filter(|&&p| p == slot).count();
    Ok(percent(hits, open_logits.rows()))
}

/// Share of unseen-class samples the open-set head routes to the outlier slot.
pub fn eval_open<T: Scalar>(model: &ModelHeads<T>, dataset: &Dataset<T>, unseen_ids: &[usize]) -> Result<f64> {
    if unseen_ids.is_empty() {
        return Err(Error::InvalidArgument("open-set evaluation needs unseen-class test samples".into()));
    }
    open_acc_from_logits(&predict_ids(model, dataset, unseen_ids)?.open_logits)
}

/// Confidence score compared against the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// max closed-set softmax probability
    ClosedSoftmax,
    /// max multi-binary inlier probability `o_k`
    MultiBinary,
}

/// Percentage of scores declared outliers (`score ≤ tau`). Empty input gives 0.
pub fn threshold_detection(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    percent(scores.iter().filter(|&&s| s <= tau).count(), scores.len())
}

/// Hard-threshold outlier detection accuracy on (unseen-class) samples.
pub fn threshold_outlier_eval<T: Scalar>(
    model: &ModelHeads<T>,
    dataset: &Dataset<T>,
    ids: &[usize],
    tau: f64,
    source: ScoreSource,
) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let scores = predict_ids(model, dataset, ids)?.scores(source);
    Ok(threshold_detection(&scores, tau))
}

/// `0.00, 0.01, …, 1.00`.
pub fn tau_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub tau: f64,
    /// (K+1)-way accuracy over seen and unseen samples together
    pub joint_acc: f64,
    /// outlier detection on unseen samples
    pub open_set_acc: f64,
    /// seen samples kept and classified correctly
    pub closed_set_acc: f64,
}

fn threshold_point(seen_scores: &[f64], seen_correct: &[bool], unseen_scores: &[f64], tau: f64) -> ThresholdPoint {
    let seen_ok = seen_scores
        .iter()
        .zip(seen_correct)
        .filter(|(&s, &c)| s > tau && c)
        .count();
    let unseen_ok = unseen_scores.iter().filter(|&&s| s <= tau).count();
    let total = (seen_scores.len() + unseen_scores.len()).max(1);
    ThresholdPoint {
        tau,
        joint_acc: percent(seen_ok + unseen_ok, total),
        open_set_acc: threshold_detection(unseen_scores, tau),
        closed_set_acc: if seen_scores.is_empty() { 0.0 } else { percent(seen_ok, seen_scores.len()) },
    }
}

/// Picks the τ from `taus` with the best joint accuracy (earliest on ties).
/// Choosing by unseen-only detection would always pick τ = 1.
pub fn best_threshold(seen_scores: &[f64], seen_correct: &[bool], unseen_scores: &[f64], taus: &[f64]) -> Result<ThresholdPoint> {
    if seen_scores.len() != seen_correct.len() {
        return Err(Error::Dimension("one correctness flag per seen score".into()));
    }
    let mut best: Option<ThresholdPoint> = None;
    for &tau in taus {
        let p = threshold_point(seen_scores, seen_correct, unseen_scores, tau);
        if best.is_none_or(|b| p.joint_acc > b.joint_acc) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty threshold grid".into()))
}

/// Best-τ threshold protocol for a trained model on a manifest's test split.
pub fn threshold_sweep<T: Scalar>(
    model: &ModelHeads<T>,
    dataset: &Dataset<T>,
    manifest: &SplitManifest,
    source: ScoreSource,
) -> Result<ThresholdPoint> {
    let (seen, unseen) = partition_test(dataset, manifest);
    let seen_ids: Vec<usize> = seen.iter().map(|s| s.0).collect();
    let ps = predict_ids(model, dataset, &seen_ids)?;
    let correct: Vec<bool> = ps.closed_argmax().iter().zip(&seen).map(|(&p, s)| p == s.1).collect();
    let pu = predict_ids(model, dataset, &unseen)?;
    best_threshold(&ps.scores(source), &correct, &pu.scores(source), &tau_grid())
}

/// Test ids split into `(id, seen index)` pairs and unseen-class ids.
pub fn partition_test<T: Scalar>(dataset: &Dataset<T>, manifest: &SplitManifest) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for &id in &manifest.test_ids {
        match manifest.seen_index(dataset.label(id)) {
            Some(k) => seen.push((id, k)),
            None => unseen.push(id),
        }
    }
    (seen, unseen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    /// over seen-class test samples, argmax of the K closed-set outputs
    pub closed_set_acc: f64,
    /// over unseen-class test samples routed to the outlier slot; absent when
    /// the split has no unseen classes
    pub open_set_acc: Option<f64>,
    /// (K+1)-way accuracy of the open-set head over the joint test set, with
    /// every unseen class mapped to the outlier slot
    pub joint_open_head_acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
    /// rows: true class (seen indices, then the outlier slot); columns:
    /// open-set head argmax
    pub confusion: Vec<Vec<usize>>,
    pub config: Option<serde_json::Value>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.seen_classes.len();
        let names: Vec<String> = self
            .seen_classes
            .iter()
            .map(|c| format!("class_{c}"))
            .chain(std::iter::once("outlier".to_string()))
            .collect();
        let mut out = format!("true\\pred,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        debug_assert_eq!(self.confusion.len(), k + 1);
        out
    }

    /// Per-class closed-set accuracy as a bar chart.
    pub fn per_class_svg(&self) -> String {
        let (bar, gap, h) = (40.0, 10.0, 200.0);
        let width = 40.0 + self.per_class_acc.len() as f64 * (bar + gap);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\">\n",
            h + 40.0
        );
        let _ = writeln!(s, "<line x1=\"30\" y1=\"{h}\" x2=\"{width}\" y2=\"{h}\" stroke=\"black\"/>");
        for (i, (acc, class)) in self.per_class_acc.iter().zip(&self.seen_classes).enumerate() {
            let x = 35.0 + i as f64 * (bar + gap);
            let v = acc.unwrap_or(0.0);
            let bh = h * v / 100.0;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{}\" width=\"{bar}\" height=\"{bh}\" fill=\"steelblue\"><title>{v:.2}%</title></rect>",
                h - bh
            );
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">{class}</text>", x + 12.0, h + 16.0);
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("report.json", self.to_json()?),
            ("confusion.csv", self.confusion_csv()),
            ("per_class_acc.svg", self.per_class_svg()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Builds the confusion matrix from open-set head predictions. `truth` uses
/// seen indices `0..K` and `K` for outliers.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], num_seen: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_seen + 1]; num_seen + 1];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

/// Full evaluation of `model` on the manifest's test split.
pub fn report<T: Scalar>(
    model: &ModelHeads<T>,
    dataset: &Dataset<T>,
    manifest: &SplitManifest,
    config: Option<serde_json::Value>,
) -> Result<MetricsReport> {
    manifest.check_matches(dataset)?;
    let k = model.num_classes();
    if k != manifest.num_seen() {
        return Err(Error::Mismatch(format!(
            "model has K={k} closed-set outputs but the manifest lists {} seen classes",
            manifest.num_seen()
        )));
    }
    let (seen, unseen) = partition_test(dataset, manifest);
    let closed = eval_closed(model, dataset, &seen)?;
    let open_set_acc = if unseen.is_empty() {
        None
    } else {
        Some(eval_open(model, dataset, &unseen)?)
    };

    let mut ids: Vec<usize> = seen.iter().map(|s| s.0).collect();
    ids.extend(&unseen);
    let mut truth: Vec<usize> = seen.iter().map(|s| s.1).collect();
    truth.extend(std::iter::repeat_n(k, unseen.len()));
    let predicted = predict_ids(model, dataset, &ids)?.open_argmax();
    let joint_open_head_acc = accuracy(&predicted, &truth)?;

    Ok(MetricsReport {
        dataset: manifest.dataset.name.clone(),
        seen_classes: manifest.seen_classes.clone(),
        unseen_classes: manifest.unseen_classes.clone(),
        closed_set_acc: closed.closed_set_acc,
        open_set_acc,
        joint_open_head_acc,
        per_class_acc: closed.per_class_acc,
        confusion: confusion_matrix(&truth, &predicted, k),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_example() {
        let acc = accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap();
        assert!((acc - 66.666_666_666_666_67).abs() < 1e-9);
        assert_eq!(format!("{acc:.2}"), "66.67");
        assert_eq!(accuracy(&[2, 1], &[2, 1]).unwrap(), 100.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn per_class_breakdown() {
        let e = closed_eval_from_predictions(&[0, 1, 1, 2], &[0, 1, 0, 0], 3).unwrap();
        assert_eq!(e.per_class_acc[0].map(|v| (v * 100.0).round() / 100.0), Some(33.33));
        assert_eq!(e.per_class_acc[1], Some(100.0));
        assert_eq!(e.per_class_acc[2], None);
    }

    #[test]
    fn open_slot_routing() {
        let all = Matrix::<f64>::from_f64_rows(&[[0.0, 0.0, 5.0], [1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(open_acc_from_logits(&all).unwrap(), 100.0);
        let none = Matrix::<f64>::from_f64_rows(&[[3.0, 0.0, 1.0], [0.0, 3.0, 1.0]]).unwrap();
        assert_eq!(open_acc_from_logits(&none).unwrap(), 0.0);
        // a tie between a seen class and the outlier slot goes to the seen class
        let tie = Matrix::<f64>::from_f64_rows(&[[1.0, 0.0, 1.0]]).unwrap();
        assert_eq!(open_acc_from_logits(&tie).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_thresholds() {
        let scores = [0.3, 0.9, 0.55, 1.0];
        assert_eq!(threshold_detection(&scores, 1.0), 100.0);
        assert_eq!(threshold_detection(&[0.3, 0.9, 0.55], 0.0), 0.0);
        assert_eq!(threshold_detection(&scores, 0.55), 50.0);
    }

    #[test]
    fn best_threshold_prefers_joint_accuracy() {
        let seen = [0.9, 0.95, 0.8, 0.4];
        let correct = [true, true, true, false];
        let unseen = [0.5, 0.6, 0.85];
        let best = best_threshold(&seen, &correct, &unseen, &tau_grid()).unwrap();
        // τ in [0.60, 0.79] keeps the three correct seen samples and flags two outliers
        assert_eq!(best.tau, 0.6);
        assert!((best.joint_acc - 500.0 / 7.0).abs() < 1e-9);
        assert!((best.open_set_acc - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn confusion_rows_sum_to_counts() {
        let truth = [0, 0, 1, 2, 2, 2];
        let pred = [0, 2, 1, 2, 0, 2];
        let m = confusion_matrix(&truth, &pred, 2);
        let sums: Vec<usize> = m.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(sums, vec![2, 1, 3]);
        assert_eq!(m[2][2], 2);
    }

    #[test]
    fn report_roundtrip() {
        let r = MetricsReport {
            dataset: "toy".into(),
            seen_classes: vec![0, 2],
            unseen_classes: vec![1],
            closed_set_acc: 75.0,
            open_set_acc: Some(12.5),
            joint_open_head_acc: 60.0,
            per_class_acc: vec![Some(50.0), None],
            confusion: vec![vec![1, 1, 0], vec![0, 0, 0], vec![3, 0, 1]],
            config: Some(serde_json::json!({"lr": 0.03})),
        };
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.confusion_csv().lines().next().unwrap(), "true\\pred,class_0,class_2,outlier");
        assert!(r.per_class_svg().starts_with("<svg"));
    }
}
