//! Classifier weight normalization (per-row max-norm projection) and weight
//! decay policies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, Matrix};
use crate::scalar::Scalar;

/// Parameter-name prefix of the closed-set classifier.
pub const CLASSIFIER_PREFIX: &str = "closed_head.";

/// Rows of the closed-set classifier are kept inside a ball of this radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxNormPolicy {
    pub radius: f64,
}

impl Default for MaxNormPolicy {
    fn default() -> Self {
        Self { radius: 1.0 }
    }
}

/// Scales every row `w` with `‖w‖₂ > radius` by `radius/‖w‖₂`; rows inside
/// the ball (up to rounding) are left bit-for-bit untouched.
pub fn max_norm_project_in_place<T: Scalar>(weights: &mut Matrix<T>, radius: T) -> Result<()> {
    if !(radius > T::zero()) {
        return Err(Error::InvalidArgument(format!("max-norm radius must be positive, got {radius}")));
    }
    if !weights.is_finite() {
        return Err(Error::NonFinite {
            term: "classifier weights before max-norm projection".into(),
        });
    }
    // a freshly projected row may overshoot the radius by a few ulps; treating
    // that band as inside makes the projection exactly idempotent
    let limit = radius * (T::one() + T::lit(8.0) * T::epsilon());
    for r in 0..weights.rows() {
        let row = weights.row_mut(r);
        let norm = l2_norm(row);
        if norm > limit {
            let s = radius / norm;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(())
}

pub fn max_norm_project<T: Scalar>(weights: &Matrix<T>, radius: T) -> Result<Matrix<T>> {
    let mut w = weights.clone();
    max_norm_project_in_place(&mut w, radius)?;
    Ok(w)
}

/// `w ← w − lr·coefficient·w`, the decay part of one gradient step.
pub fn weight_decay_step<T: Scalar>(weights: &mut [T], coefficient: T, lr: T) {
    let shrink = T::one() - lr * coefficient;
    weights.iter_mut().for_each(|w| *w *= shrink);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecaySchedule {
    /// The same coefficients for the whole run.
    Uniform,
    /// Decay every parameter until `stage_epoch`, then only the classifier.
    TwoStage { stage_epoch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDecayPolicy {
    /// applied to every trainable parameter
    pub coefficient: f64,
    /// overrides `coefficient` on the closed-set classifier
    pub classifier_coefficient: Option<f64>,
    pub schedule: DecaySchedule,
}

impl Default for WeightDecayPolicy {
    fn default() -> Self {
        Self {
            coefficient: 5e-4,
            classifier_coefficient: None,
            schedule: DecaySchedule::Uniform,
        }
    }
}

impl WeightDecayPolicy {
    pub fn none() -> Self {
        Self {
            coefficient: 0.0,
            classifier_coefficient: None,
            schedule: DecaySchedule::Uniform,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.coefficient >= 0.0 && self.coefficient.is_finite()) {
            out.push(format!("weight_decay: must be nonnegative, got {}", self.coefficient));
        }
        if let Some(c) = self.classifier_coefficient {
            if !(c >= 0.0 && c.is_finite()) {
                out.push(format!("classifier_weight_decay: must be nonnegative, got {c}"));
            }
        }
        out
    }

    /// Coefficient for the named parameter during `epoch`.
    pub fn coefficient_for(&self, param: &str, epoch: usize) -> f64 {
        let is_classifier = param.starts_with(CLASSIFIER_PREFIX);
        let classifier = self.classifier_coefficient.unwrap_or(self.coefficient);
        match self.schedule {
            DecaySchedule::Uniform => {
                if is_classifier {
                    classifier
                } else {
                    self.coefficient
                }
            }
            DecaySchedule::TwoStage { stage_epoch } => match (epoch < stage_epoch, is_classifier) {
                (_, true) => classifier,
                (true, false) => self.coefficient,
                (false, false) => 0.0,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projects_outside_rows_only() {
        let w = Matrix::<f64>::from_f64_rows(&[[3.0, 4.0], [0.1, 0.1]]).unwrap();
        let p = max_norm_project(&w, 2.0).unwrap();
        assert!((p[(0, 0)] - 1.2).abs() < 1e-12 && (p[(0, 1)] - 1.6).abs() < 1e-12);
        assert_eq!(p.row(1), w.row(1));
    }

    #[test]
    fn rejects_bad_radius_and_nan() {
        let w = Matrix::<f64>::zeros(1, 2);
        assert!(max_norm_project(&w, 0.0).is_err());
        let nan = Matrix::from_f64_rows(&[[f64::NAN, 0.0]]).unwrap();
        assert!(matches!(max_norm_project(&nan, 1.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn decay_examples() {
        let mut w = [1.0f64, 0.0];
        weight_decay_step(&mut w, 0.0, 0.1);
        assert_eq!(w, [1.0, 0.0]);
        weight_decay_step(&mut w, 0.5, 0.1);
        assert!((w[0] - 0.95).abs() < 1e-15 && w[1] == 0.0);

        let mut v = [2.0f64, -1.0];
        let mut last = l2_norm(&v);
        for _ in 0..50 {
            weight_decay_step(&mut v, 0.5, 0.1);
            let n = l2_norm(&v);
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn two_stage_schedule() {
        let p = WeightDecayPolicy {
            coefficient: 1e-3,
            classifier_coefficient: Some(5e-3),
            schedule: DecaySchedule::TwoStage { stage_epoch: 10 },
        };
        assert_eq!(p.coefficient_for("backbone.layer0.weight", 3), 1e-3);
        assert_eq!(p.coefficient_for("backbone.layer0.weight", 10), 0.0);
        assert_eq!(p.coefficient_for("closed_head.weight", 12), 5e-3);
        let u = WeightDecayPolicy { schedule: DecaySchedule::Uniform, ..p };
        assert_eq!(u.coefficient_for("open_head.bias", 99), 1e-3);
    }

    fn na_gt(a: &[f64], radius: f64) -> bool {
        l2_norm(a) > radius * (1.0 + 1e-12)
    }

    proptest! {
        #[test]
        fn projection_contract(rows in 1usize..6, cols in 1usize..6, radius in 0.05f64..4.0,
                               data in proptest::collection::vec(-5.0f64..5.0, 36)) {
            let w = Matrix::from_vec(rows, cols, data[..rows * cols].to_vec()).unwrap();
            let p = max_norm_project(&w, radius).unwrap();
            prop_assert_eq!(&max_norm_project(&p, radius).unwrap(), &p);
            for r in 0..rows {
                let (a, b) = (w.row(r), p.row(r));
                prop_assert!(l2_norm(b) <= radius + 1e-9);
                if na_gt(a, radius) { prop_assert!((l2_norm(b) - radius).abs() < 1e-9); }
                let (na, nb) = (l2_norm(a), l2_norm(b));
                if na > 1e-9 {
                    let cos = crate::linalg::dot(a, b) / (na * nb);
                    prop_assert!((cos - 1.0).abs() < 1e-6);
                }
                if na <= radius {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
