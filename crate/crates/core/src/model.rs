//! Backbone plus the closed-set, open-set, projection and multi-binary heads,
//! and the per-class feature centers that feed the fixed ETF classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::{make_simplex_etf, SimplexEtf};
use crate::linalg::Matrix;
use crate::losses::binary_pairs;
use crate::nn::{join, relu, relu_backward, Backbone, BackboneCache, BackboneSpec, Linear, Parameters};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    /// number of seen classes K
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub proj_hidden_dim: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.backbone.validate() {
            out.push(format!("backbone: {e}"));
        }
        if self.num_classes < 2 {
            out.push(format!("seen classes: need at least 2, got {}", self.num_classes));
        }
        if self.embedding_dim == 0 {
            out.push("embedding_dim: must be positive".into());
        }
        if self.proj_hidden_dim == 0 {
            out.push("proj_hidden_dim: must be positive".into());
        }
        if self.backbone.feature_dim() < self.num_classes {
            out.push(format!(
                "feature_dim: the ETF head needs feature_dim >= {} seen classes, got {}",
                self.num_classes,
                self.backbone.feature_dim()
            ));
        }
        out
    }
}

/// All trainable heads plus the fixed ETF classifier `B*`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHeads<T> {
    pub spec: ModelSpec,
    pub backbone: Backbone<T>,
    /// K×d; its rows are the per-class weight vectors the max-norm acts on
    pub closed_head: Linear<T>,
    /// (K+1)×d; slot K is the outlier class
    pub open_head: Linear<T>,
    pub proj_hidden: Linear<T>,
    pub proj_out: Linear<T>,
    /// 2K×e: rows `2k` and `2k+1` form the independent binary classifier of
    /// class k (inlier logit, outlier logit)
    pub multi_binary_head: Linear<T>,
    etf: SimplexEtf<T>,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct HeadOutputs<T> {
    pub features: Matrix<T>,
    pub closed_logits: Matrix<T>,
    pub open_logits: Matrix<T>,
    pub embeddings: Matrix<T>,
    /// M×2K interleaved binary logits
    pub binary_logits: Matrix<T>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn closed_probs(&self) -> Matrix<T> {
        self.closed_logits.softmax_rows()
    }

    /// M×2K interleaved `(o_k, ō_k)` pairs.
    pub fn binary_pairs(&self) -> Matrix<T> {
        binary_pairs(&self.binary_logits)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input_backbone: BackboneCache<T>,
    proj_mid: Matrix<T>,
}

/// Upstream gradients for each head output; `None` means zero.
#[derive(Clone, Debug, Default)]
pub struct HeadGrads<T> {
    pub closed: Option<Matrix<T>>,
    pub open: Option<Matrix<T>>,
    pub binary: Option<Matrix<T>>,
    /// gradient reaching the features directly (feature-center regularization)
    pub features: Option<Matrix<T>>,
}

impl<T: Scalar> ModelHeads<T> {
    /// Initialises all heads from `spec.seed`; the ETF frame is built with
    /// `dim = feature_dim` from the same seed on its own stream.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let problems = spec.problems();
        if !problems.is_empty() {
            return Err(Error::InvalidArgument(problems.join("; ")));
        }
        let mut rng = rng_for(&[stream::INIT, spec.seed]);
        let backbone = spec.backbone.build::<T, _>(&mut rng)?;
        let d = backbone.feature_dim();
        let k = spec.num_classes;
        let closed_head = Linear::new(d, k, &mut rng);
        let open_head = Linear::new(d, k + 1, &mut rng);
        let proj_hidden = Linear::new(d, spec.proj_hidden_dim, &mut rng);
        let proj_out = Linear::new(spec.proj_hidden_dim, spec.embedding_dim, &mut rng);
        let multi_binary_head = Linear::new(spec.embedding_dim, 2 * k, &mut rng);
        let etf = make_simplex_etf(d, k, spec.seed)?;
        Ok(Self {
            spec,
            backbone,
            closed_head,
            open_head,
            proj_hidden,
            proj_out,
            multi_binary_head,
            etf,
        })
    }

    /// Gradient buffer with the same layout and all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            backbone: self.backbone.zeros_like(),
            closed_head: self.closed_head.zeros_like(),
            open_head: self.open_head.zeros_like(),
            proj_hidden: self.proj_hidden.zeros_like(),
            proj_out: self.proj_out.zeros_like(),
            multi_binary_head: self.multi_binary_head.zeros_like(),
            etf: self.etf.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn etf(&self) -> &SimplexEtf<T> {
        &self.etf
    }

    /// Replaces the fixed frame (used when restoring a checkpoint).
    pub fn set_etf(&mut self, etf: SimplexEtf<T>) -> Result<()> {
        if etf.dim() != self.feature_dim() || etf.num_classes() != self.num_classes() {
            return Err(Error::Dimension(format!(
                "frame is {}x{}, model needs {}x{}",
                etf.dim(),
                etf.num_classes(),
                self.feature_dim(),
                self.num_classes()
            )));
        }
        self.etf = etf;
        Ok(())
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(HeadOutputs<T>, ForwardCache<T>)> {
        let (features, input_backbone) = self.backbone.forward(x)?;
        let closed_logits = self.closed_head.forward(&features);
        let open_logits = self.open_head.forward(&features);
        let proj_mid = relu(&self.proj_hidden.forward(&features));
        let embeddings = self.proj_out.forward(&proj_mid);
        let binary_logits = self.multi_binary_head.forward(&embeddings);
        Ok((
            HeadOutputs {
                features,
                closed_logits,
                open_logits,
                embeddings,
                binary_logits,
            },
            ForwardCache {
                input_backbone,
                proj_mid,
            },
        ))
    }

    /// Forward pass without keeping activations for backprop.
    pub fn predict(&self, x: &Matrix<T>) -> Result<HeadOutputs<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Per-class one-vs-rest probability pairs for a batch of embeddings.
    pub fn multi_binary_scores(&self, embeddings: &Matrix<T>) -> Result<Matrix<T>> {
        if embeddings.cols() != self.spec.embedding_dim {
            return Err(Error::Dimension(format!(
                "embeddings have width {}, head expects {}",
                embeddings.cols(),
                self.spec.embedding_dim
            )));
        }
        Ok(binary_pairs(&self.multi_binary_head.forward(embeddings)))
    }

    /// Backpropagates head gradients, accumulating into `grad`.
    pub fn backward(
        &self,
        out: &HeadOutputs<T>,
        cache: &ForwardCache<T>,
        upstream: &HeadGrads<T>,
        grad: &mut Self,
    ) -> Result<()> {
        let mut dfeat = match &upstream.features {
            Some(g) => g.clone(),
            None => Matrix::zeros(out.features.rows(), out.features.cols()),
        };
        if let Some(g) = &upstream.closed {
            dfeat.add_assign(&self.closed_head.backward(&out.features, g, &mut grad.closed_head));
        }
        if let Some(g) = &upstream.open {
            dfeat.add_assign(&self.open_head.backward(&out.features, g, &mut grad.open_head));
        }
        if let Some(g) = &upstream.binary {
            let demb = self
                .multi_binary_head
                .backward(&out.embeddings, g, &mut grad.multi_binary_head);
            let dmid = relu_backward(
                &cache.proj_mid,
                &self.proj_out.backward(&cache.proj_mid, &demb, &mut grad.proj_out),
            );
            dfeat.add_assign(&self.proj_hidden.backward(&out.features, &dmid, &mut grad.proj_hidden));
        }
        if !dfeat.is_finite() {
            return Err(Error::NonFinite {
                term: "feature gradient".into(),
            });
        }
        self.backbone
            .backward(&cache.input_backbone, &dfeat, &mut grad.backbone);
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for ModelHeads<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.closed_head.visit(&join(prefix, "closed_head"), f);
        self.open_head.visit(&join(prefix, "open_head"), f);
        self.proj_hidden.visit(&join(prefix, "proj_head.hidden"), f);
        self.proj_out.visit(&join(prefix, "proj_head.out"), f);
        self.multi_binary_head.visit(&join(prefix, "multi_binary_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.closed_head.visit_mut(&join(prefix, "closed_head"), f);
        self.open_head.visit_mut(&join(prefix, "open_head"), f);
        self.proj_hidden.visit_mut(&join(prefix, "proj_head.hidden"), f);
        self.proj_out.visit_mut(&join(prefix, "proj_head.out"), f);
        self.multi_binary_head.visit_mut(&join(prefix, "multi_binary_head"), f);
    }
}

/// Features of a labelled batch with their seen-class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidArgument("feature batch is empty".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self { features, labels })
    }
}

/// Per-class means of a batch. Rows of absent classes are zero and flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters<T> {
    pub centers: Matrix<T>,
    pub present: Vec<bool>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> ClassCenters<T> {
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&k| self.present[k]).collect()
    }

    /// Routes a gradient w.r.t. the present-class centers (one row per
    /// present class, in [`ClassCenters::present_classes`] order) back to
    /// the individual features: each sample receives `1/n_k` of its class row.
    pub fn backward(&self, labels: &[usize], d_present: &Matrix<T>) -> Matrix<T> {
        let mut slot = vec![usize::MAX; self.present.len()];
        for (row, k) in self.present_classes().into_iter().enumerate() {
            slot[k] = row;
        }
        let mut d = Matrix::zeros(labels.len(), self.centers.cols());
        for (i, &y) in labels.iter().enumerate() {
            let n = T::lit(self.counts[y] as f64);
            for (dv, &g) in d.row_mut(i).iter_mut().zip(d_present.row(slot[y])) {
                *dv = g / n;
            }
        }
        d
    }
}

pub fn feature_centers<T: Scalar>(batch: &FeatureBatch<T>, num_classes: usize) -> ClassCenters<T> {
    let d = batch.features.cols();
    let mut centers = Matrix::zeros(num_classes, d);
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in batch.features.iter_rows().zip(&batch.labels) {
        counts[y] += 1;
        for (c, &v) in centers.row_mut(y).iter_mut().zip(row) {
            *c += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = T::one() / T::lit(n as f64);
            centers.row_mut(k).iter_mut().for_each(|v| *v *= inv);
        }
    }
    ClassCenters {
        centers,
        present: counts.iter().map(|&n| n > 0).collect(),
        counts,
    }
}

/// Logits of the fixed ETF classifier on present-class centers:
/// `z̄ = v̄ · N`, one row per present class. Returns the rows together with
/// their class labels.
pub fn apply_etf_head<T: Scalar>(centers: &ClassCenters<T>, frame: &SimplexEtf<T>) -> Result<(Matrix<T>, Vec<usize>)> {
    if frame.num_classes() != centers.present.len() || frame.dim() != centers.centers.cols() {
        return Err(Error::Dimension(format!(
            "frame is {}x{} but centers are {}x{}",
            frame.dim(),
            frame.num_classes(),
            centers.present.len(),
            centers.centers.cols()
        )));
    }
    let labels = centers.present_classes();
    let rows = centers.centers.select_rows(&labels);
    Ok((rows.matmul(frame.vectors()), labels))
}
