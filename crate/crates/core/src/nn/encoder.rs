use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{ConvCache, ConvEncoder, ConvShape};
use super::{join, relu, relu_backward, Linear, Parameters};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Fully connected encoder for vector-valued samples. Hidden layers use ReLU;
/// the final layer is linear so pooled features can take either sign.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder<T> {
    layers: Vec<Linear<T>>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    /// input to each layer
    inputs: Vec<Matrix<T>>,
}

impl<T: Scalar> MlpEncoder<T> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], feature_dim: usize, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(&h);
            inputs.push(h);
            h = if i < last { relu(&a) } else { a };
        }
        (h, MlpCache { inputs })
    }

    pub fn backward(&self, cache: &MlpCache<T>, dfeat: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        let mut d = dfeat.clone();
        for i in (0..self.layers.len()).rev() {
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
            if i > 0 {
                // inputs[i] is the post-ReLU output of layer i-1
                d = relu_backward(&cache.inputs[i], &d);
            }
        }
        d
    }
}

impl<T: Scalar> Parameters<T> for MlpEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Serializable description of a backbone, enough to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        feature_dim: usize,
    },
    Conv {
        height: usize,
        width: usize,
        channels: usize,
        stage_channels: Vec<usize>,
        residual: bool,
    },
}

impl BackboneSpec {
    pub fn input_len(&self) -> usize {
        match self {
            BackboneSpec::Mlp { input_dim, .. } => *input_dim,
            BackboneSpec::Conv { height, width, channels, .. } => height * width * channels,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp { feature_dim, .. } => *feature_dim,
            BackboneSpec::Conv { stage_channels, .. } => stage_channels.last().copied().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            BackboneSpec::Mlp { input_dim, hidden, feature_dim } => {
                *input_dim > 0 && *feature_dim > 0 && hidden.iter().all(|&h| h > 0)
            }
            BackboneSpec::Conv { height, width, channels, stage_channels, .. } => {
                *height > 0 && *width > 0 && *channels > 0 && !stage_channels.is_empty()
                    && stage_channels.iter().all(|&c| c > 0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate backbone {self:?}")))
        }
    }

    pub fn build<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Backbone<T>> {
        self.validate()?;
        Ok(match self {
            BackboneSpec::Mlp { input_dim, hidden, feature_dim } => {
                Backbone::Mlp(MlpEncoder::new(*input_dim, hidden, *feature_dim, rng))
            }
            BackboneSpec::Conv { height, width, channels, stage_channels, residual } => {
                let shape = ConvShape { height: *height, width: *width, channels: *channels };
                Backbone::Conv(ConvEncoder::new(shape, stage_channels, *residual, rng))
            }
        })
    }
}

/// Image (or vector) → pooled feature of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub enum Backbone<T> {
    Mlp(MlpEncoder<T>),
    Conv(ConvEncoder<T>),
}

#[derive(Clone, Debug)]
pub enum BackboneCache<T> {
    Mlp(MlpCache<T>),
    Conv(ConvCache<T>),
}

impl<T: Scalar> Backbone<T> {
    pub fn input_len(&self) -> usize {
        match self {
            Backbone::Mlp(m) => m.input_dim(),
            Backbone::Conv(c) => c.input_shape().len(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Mlp(m) => m.feature_dim(),
            Backbone::Conv(c) => c.feature_dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Backbone::Mlp(m) => Backbone::Mlp(m.zeros_like()),
            Backbone::Conv(c) => Backbone::Conv(c.zeros_like()),
        }
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::Dimension("cannot encode an empty batch".into()));
        }
        if x.cols() != self.input_len() {
            return Err(Error::Dimension(format!(
                "backbone expects samples of length {}, got {}",
                self.input_len(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// M×(sample length) → M×d features.
    pub fn encode(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, BackboneCache<T>)> {
        self.check_input(x)?;
        Ok(match self {
            Backbone::Mlp(m) => {
                let (f, c) = m.forward(x);
                (f, BackboneCache::Mlp(c))
            }
            Backbone::Conv(e) => {
                let (f, c) = e.forward(x);
                (f, BackboneCache::Conv(c))
            }
        })
    }

    pub fn backward(&self, cache: &BackboneCache<T>, dfeat: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        match (self, cache, grad) {
            (Backbone::Mlp(m), BackboneCache::Mlp(c), Backbone::Mlp(g)) => m.backward(c, dfeat, g),
            (Backbone::Conv(e), BackboneCache::Conv(c), Backbone::Conv(g)) => e.backward(c, dfeat, g),
            _ => unreachable!("cache and gradient buffer mirror the backbone"),
        }
    }
}

impl<T: Scalar> Parameters<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        match self {
            Backbone::Mlp(m) => m.visit(prefix, f),
            Backbone::Conv(c) => c.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        match self {
            Backbone::Mlp(m) => m.visit_mut(prefix, f),
            Backbone::Conv(c) => c.visit_mut(prefix, f),
        }
    }
}
