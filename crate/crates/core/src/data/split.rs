//! Seen/unseen partition and stratified label-fraction sampling.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetFingerprint};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

/// Fraction of the labelled set carved out for validation when the dataset
/// ships no validation split.
pub const CARVED_VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValSource {
    /// the dataset's own validation split, restricted to seen classes
    Dataset,
    /// carved from the labelled seen-class samples
    Carved,
}

/// Deterministic description of one experimental split. Class indices are the
/// dataset's originals; the model sees `seen_classes[i]` as class `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: DatasetFingerprint,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub label_fraction: f64,
    pub seed: u64,
    pub val_source: ValSource,
    pub labelled_ids: Vec<usize>,
    pub unlabelled_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl SplitManifest {
    pub fn num_seen(&self) -> usize {
        self.seen_classes.len()
    }

    /// Position of an original class index among the seen classes.
    pub fn seen_index(&self, class: usize) -> Option<usize> {
        self.seen_classes.iter().position(|&c| c == class)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Errors unless this manifest was generated for `dataset`.
    pub fn check_matches<T: Scalar>(&self, dataset: &Dataset<T>) -> Result<()> {
        let fp = dataset.fingerprint();
        if fp != self.dataset {
            return Err(Error::Mismatch(format!(
                "manifest was made for {:?}, dataset is {:?}",
                self.dataset, fp
            )));
        }
        let n = dataset.len();
        let all = self
            .labelled_ids
            .iter()
            .chain(&self.unlabelled_ids)
            .chain(&self.val_ids)
            .chain(&self.test_ids);
        if let Some(&bad) = all.into_iter().find(|&&i| i >= n) {
            return Err(Error::Mismatch(format!("sample id {bad} out of range for {n} samples")));
        }
        Ok(())
    }
}

/// Builds a split: labelled samples are drawn per seen class at
/// `label_fraction` (rounded), the unlabelled set is the whole training split
/// with labels stripped.
pub fn make_split<T: Scalar>(
    dataset: &Dataset<T>,
    seen_classes: &[usize],
    label_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if seen_classes.is_empty() {
        return Err(Error::InvalidArgument("seen_classes must not be empty".into()));
    }
    let unique: BTreeSet<usize> = seen_classes.iter().copied().collect();
    if unique.len() != seen_classes.len() {
        return Err(Error::InvalidArgument(format!("seen_classes has duplicates: {seen_classes:?}")));
    }
    if let Some(&c) = unique.iter().find(|&&c| c >= dataset.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: c,
            num_classes: dataset.num_classes,
        });
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label_fraction must lie in (0, 1], got {label_fraction}"
        )));
    }
    let unseen_classes: Vec<usize> = (0..dataset.num_classes).filter(|c| !unique.contains(c)).collect();

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for &id in &dataset.train {
        let y = dataset.label(id);
        if unique.contains(&y) {
            per_class[y].push(id);
        }
    }

    let carve = dataset.val.is_empty();
    let mut labelled = Vec::new();
    let mut val = Vec::new();
    for &class in seen_classes {
        let mut pool = per_class[class].clone();
        let take = (label_fraction * pool.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::EmptyClass {
                class,
                fraction: label_fraction,
            });
        }
        let mut rng = rng_for(&[stream::SPLIT, seed, class as u64]);
        pool.shuffle(&mut rng);
        let chosen = &pool[..take];
        if carve {
            let n_val = ((CARVED_VAL_FRACTION * take as f64).round() as usize).min(take - 1);
            val.extend_from_slice(&chosen[..n_val]);
            labelled.extend_from_slice(&chosen[n_val..]);
        } else {
            labelled.extend_from_slice(chosen);
        }
    }
    if !carve {
        val = dataset
            .val
            .iter()
            .copied()
            .filter(|&id| unique.contains(&dataset.label(id)))
            .collect();
    }
    labelled.sort_unstable();
    val.sort_unstable();
    let mut unlabelled = dataset.train.clone();
    unlabelled.sort_unstable();
    let mut test = dataset.test.clone();
    test.sort_unstable();

    Ok(SplitManifest {
        dataset: dataset.fingerprint(),
        seen_classes: seen_classes.to_vec(),
        unseen_classes,
        label_fraction,
        seed,
        val_source: if carve { ValSource::Carved } else { ValSource::Dataset },
        labelled_ids: labelled,
        unlabelled_ids: unlabelled,
        val_ids: val,
        test_ids: test,
    })
}

/// What the training loop may see: labelled ids with their seen-class index,
/// and unlabelled ids with no labels at all.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingView {
    pub labelled: Vec<(usize, usize)>,
    pub unlabelled: Vec<usize>,
    pub val: Vec<(usize, usize)>,
    pub num_seen: usize,
}

impl TrainingView {
    pub fn new<T: Scalar>(dataset: &Dataset<T>, manifest: &SplitManifest) -> Result<Self> {
        manifest.check_matches(dataset)?;
        let lookup = |ids: &[usize], what: &str| -> Result<Vec<(usize, usize)>> {
            ids.iter()
                .map(|&id| {
                    let y = dataset.label(id);
                    manifest
                        .seen_index(y)
                        .map(|k| (id, k))
                        .ok_or_else(|| Error::Mismatch(format!("{what} sample {id} has unseen class {y}")))
                })
                .collect()
        };
        let labelled = lookup(&manifest.labelled_ids, "labelled")?;
        let val = lookup(&manifest.val_ids, "validation")?;
        if labelled.is_empty() {
            return Err(Error::Mismatch("manifest has no labelled samples".into()));
        }
        Ok(Self {
            labelled,
            unlabelled: manifest.unlabelled_ids.clone(),
            val,
            num_seen: manifest.num_seen(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleKind;

    /// `counts[k]` training samples of class k, no val split, 2 test per class.
    fn toy(counts: &[usize]) -> Dataset<f64> {
        let mut labels = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat(k).take(n + 2));
        }
        let n = labels.len();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut i = 0;
        for &c in counts {
            train.extend(i..i + c);
            test.extend(i + c..i + c + 2);
            i += c + 2;
        }
        Dataset::new(
            "toy",
            SampleKind::Vector { dim: 1 },
            counts.len(),
            (0..n).map(|v| v as f64).collect(),
            labels,
            train,
            vec![],
            test,
        )
        .unwrap()
    }

    #[test]
    fn stratified_fraction() {
        let ds = toy(&[40, 80, 12]);
        let m = make_split(&ds, &[0, 1], 0.25, 3).unwrap();
        let counts = ds.class_counts(&m.labelled_ids);
        let val = ds.class_counts(&m.val_ids);
        assert_eq!(counts[0] + val[0], 10);
        assert_eq!(counts[1] + val[1], 20);
        assert_eq!(counts[2] + val[2], 0);
        assert_eq!(m.unseen_classes, vec![2]);
        assert_eq!(m.unlabelled_ids.len(), 132);
        assert_eq!(m.val_source, ValSource::Carved);
        assert_eq!(val[..2], [1, 2]);
    }

    #[test]
    fn fully_supervised_upper_bound() {
        let ds = toy(&[5, 7, 9]);
        let m = make_split(&ds, &[0, 1, 2], 1.0, 0).unwrap();
        assert!(m.unseen_classes.is_empty());
        let mut all: Vec<usize> = m.labelled_ids.iter().chain(&m.val_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ds.train);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let ds = toy(&[30, 30]);
        let a = make_split(&ds, &[0, 1], 0.5, 9).unwrap();
        assert_eq!(a, make_split(&ds, &[0, 1], 0.5, 9).unwrap());
        assert_ne!(a.labelled_ids, make_split(&ds, &[0, 1], 0.5, 10).unwrap().labelled_ids);
    }

    #[test]
    fn tail_class_too_small() {
        let ds = toy(&[40, 1]);
        match make_split(&ds, &[0, 1], 0.1, 0) {
            Err(Error::EmptyClass { class: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariants_hold() {
        let ds = toy(&[50, 20, 30, 10]);
        let m = make_split(&ds, &[3, 1], 0.5, 1).unwrap();
        let labelled: BTreeSet<_> = m.labelled_ids.iter().collect();
        assert!(m.val_ids.iter().all(|i| !labelled.contains(i)));
        assert!(m.labelled_ids.iter().all(|&i| ds.train.contains(&i)));
        assert!(m.labelled_ids.iter().all(|&i| [3, 1].contains(&ds.raw_labels()[i])));
        let view = TrainingView::new(&ds, &m).unwrap();
        assert!(view.labelled.iter().all(|&(id, k)| m.seen_classes[k] == ds.raw_labels()[id]));
    }

    #[test]
    fn json_roundtrip_and_mismatch() {
        let ds = toy(&[10, 10, 10]);
        let m = make_split(&ds, &[0, 2], 0.5, 4).unwrap();
        let back = SplitManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());
        let other = toy(&[10, 11, 10]);
        assert!(matches!(m.check_matches(&other), Err(Error::Mismatch(_))));
    }

    #[test]
    fn bad_arguments() {
        let ds = toy(&[10, 10]);
        assert!(make_split(&ds, &[], 0.5, 0).is_err());
        assert!(make_split(&ds, &[0, 0], 0.5, 0).is_err());
        assert!(make_split(&ds, &[5], 0.5, 0).is_err());
        assert!(make_split(&ds, &[0], 0.0, 0).is_err());
        assert!(make_split(&ds, &[0], 1.5, 0).is_err());
    }
}
