//! 3×3 convolutions (padding 1) over HWC images, lowered to matrix products
//! through im2col, and a small residual encoder built from them.

use rand::Rng;

use super::{join, relu, relu_backward, Parameters};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ConvShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// 3×3 convolution with padding 1. Weight rows are output channels; columns
/// run over `(kh, kw, in_channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub input: ConvShape,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(input: ConvShape, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = K * K * input.channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || T::lit(rng.random_range(-bound..bound));
        let weight = (0..out_channels * fan_in).map(|_| draw()).collect();
        let bias = (0..out_channels).map(|_| draw()).collect();
        Self {
            weight: Matrix::from_vec(out_channels, fan_in, weight).expect("sized buffer"),
            bias,
            stride,
            input,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![T::zero(); self.bias.len()],
            stride: self.stride,
            input: self.input,
        }
    }

    pub fn output_shape(&self) -> ConvShape {
        ConvShape {
            height: (self.input.height + 2 - K) / self.stride + 1,
            width: (self.input.width + 2 - K) / self.stride + 1,
            channels: self.weight.rows(),
        }
    }

    fn im2col(&self, image: &[T]) -> Matrix<T> {
        let ConvShape { height, width, channels } = self.input;
        let out = self.output_shape();
        let mut patches = Matrix::zeros(out.pixels(), K * K * channels);
        for oh in 0..out.height {
            for ow in 0..out.width {
                let row = patches.row_mut(oh * out.width + ow);
                for kh in 0..K {
                    let ih = (oh * self.stride + kh) as isize - 1;
                    if ih < 0 || ih >= height as isize {
                        continue;
                    }
                    for kw in 0..K {
                        let iw = (ow * self.stride + kw) as isize - 1;
                        if iw < 0 || iw >= width as isize {
                            continue;
                        }
                        let src = (ih as usize * width + iw as usize) * channels;
                        let dst = (kh * K + kw) * channels;
                        row[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
                    }
                }
            }
        }
        patches
    }

    fn col2im(&self, dpatches: &Matrix<T>, dimage: &mut [T]) {
        let ConvShape { height, width, channels } = self.input;
        let out = self.output_shape();
        for oh in 0..out.height {
            for ow in 0..out.width {
                let row = dpatches.row(oh * out.width + ow);
                for kh in 0..K {
                    let ih = (oh * self.stride + kh) as isize - 1;
                    if ih < 0 || ih >= height as isize {
                        continue;
                    }
                    for kw in 0..K {
                        let iw = (ow * self.stride + kw) as isize - 1;
                        if iw < 0 || iw >= width as isize {
                            continue;
                        }
                        let dst = (ih as usize * width + iw as usize) * channels;
                        let src = (kh * K + kw) * channels;
                        for c in 0..channels {
                            dimage[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }

    /// Returns the batch output (one flattened HWC image per row) and the
    /// per-sample patch matrices needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, Vec<Matrix<T>>) {
        let out_len = self.output_shape().len();
        let mut y = Matrix::zeros(x.rows(), out_len);
        let mut cache = Vec::with_capacity(x.rows());
        for n in 0..x.rows() {
            let patches = self.im2col(x.row(n));
            let mut o = patches.matmul_nt(&self.weight);
            for r in 0..o.rows() {
                for (v, &b) in o.row_mut(r).iter_mut().zip(&self.bias) {
                    *v += b;
                }
            }
            y.row_mut(n).copy_from_slice(o.as_slice());
            cache.push(patches);
        }
        (y, cache)
    }

    pub fn backward(&self, patches: &[Matrix<T>], dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        let out = self.output_shape();
        let mut dx = Matrix::zeros(dy.rows(), self.input.len());
        for n in 0..dy.rows() {
            let dy_n = Matrix::from_vec(out.pixels(), out.channels, dy.row(n).to_vec())
                .expect("conv output layout");
            grad.weight.add_assign(&dy_n.matmul_tn(&patches[n]));
            for row in dy_n.iter_rows() {
                for (g, &d) in grad.bias.iter_mut().zip(row) {
                    *g += d;
                }
            }
            let dpatches = dy_n.matmul(&self.weight);
            self.col2im(&dpatches, dx.row_mut(n));
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "weight"), self.weight.as_slice());
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "weight"), self.weight.as_mut_slice());
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Block<T> {
    /// conv → ReLU
    Plain(Conv2d<T>),
    /// ReLU(x + conv₂(ReLU(conv₁(x))))
    Residual(Conv2d<T>, Conv2d<T>),
}

#[derive(Clone, Debug)]
enum BlockCache<T> {
    Plain {
        patches: Vec<Matrix<T>>,
        out: Matrix<T>,
    },
    Residual {
        patches1: Vec<Matrix<T>>,
        mid: Matrix<T>,
        patches2: Vec<Matrix<T>>,
        out: Matrix<T>,
    },
}

/// Stack of conv stages followed by global average pooling. Stage `i` is a
/// stride-1 (first) or stride-2 (later) convolution, optionally followed by
/// a residual block at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder<T> {
    input: ConvShape,
    blocks: Vec<Block<T>>,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    blocks: Vec<BlockCache<T>>,
    pooled_shape: ConvShape,
}

impl<T: Scalar> ConvEncoder<T> {
    pub fn new<R: Rng + ?Sized>(input: ConvShape, channels: &[usize], residual: bool, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut shape = input;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let conv = Conv2d::new(shape, c, stride, rng);
            shape = conv.output_shape();
            blocks.push(Block::Plain(conv));
            if residual {
                let c1 = Conv2d::new(shape, c, 1, rng);
                let c2 = Conv2d::new(shape, c, 1, rng);
                blocks.push(Block::Residual(c1, c2));
            }
        }
        Self { input, blocks }
    }

    pub fn input_shape(&self) -> ConvShape {
        self.input
    }

    fn last_shape(&self) -> ConvShape {
        match self.blocks.last() {
            Some(Block::Plain(c)) | Some(Block::Residual(_, c)) => c.output_shape(),
            None => self.input,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.last_shape().channels
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input: self.input,
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Plain(c) => Block::Plain(c.zeros_like()),
                    Block::Residual(a, b) => Block::Residual(a.zeros_like(), b.zeros_like()),
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, ConvCache<T>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            match block {
                Block::Plain(conv) => {
                    let (pre, patches) = conv.forward(&h);
                    let out = relu(&pre);
                    h = out.clone();
                    caches.push(BlockCache::Plain { patches, out });
                }
                Block::Residual(c1, c2) => {
                    let (pre1, patches1) = c1.forward(&h);
                    let mid = relu(&pre1);
                    let (mut pre2, patches2) = c2.forward(&mid);
                    pre2.add_assign(&h);
                    let out = relu(&pre2);
                    h = out.clone();
                    caches.push(BlockCache::Residual { patches1, mid, patches2, out });
                }
            }
        }
        let shape = self.last_shape();
        let pixels = T::lit(shape.pixels() as f64);
        let mut pooled = Matrix::zeros(h.rows(), shape.channels);
        for n in 0..h.rows() {
            let src = h.row(n);
            let dst = pooled.row_mut(n);
            for p in 0..shape.pixels() {
                for c in 0..shape.channels {
                    dst[c] += src[p * shape.channels + c];
                }
            }
            dst.iter_mut().for_each(|v| *v /= pixels);
        }
        (pooled, ConvCache { blocks: caches, pooled_shape: shape })
    }

    pub fn backward(&self, cache: &ConvCache<T>, dfeat: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        let shape = cache.pooled_shape;
        let pixels = T::lit(shape.pixels() as f64);
        let mut dh = Matrix::zeros(dfeat.rows(), shape.len());
        for n in 0..dfeat.rows() {
            let src = dfeat.row(n);
            let dst = dh.row_mut(n);
            for p in 0..shape.pixels() {
                for c in 0..shape.channels {
                    dst[p * shape.channels + c] = src[c] / pixels;
                }
            }
        }
        for ((block, bc), gblock) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dh = match (block, bc, gblock) {
                (Block::Plain(conv), BlockCache::Plain { patches, out }, Block::Plain(g)) => {
                    conv.backward(patches, &relu_backward(out, &dh), g)
                }
                (
                    Block::Residual(c1, c2),
                    BlockCache::Residual { patches1, mid, patches2, out },
                    Block::Residual(g1, g2),
                ) => {
                    let dpre2 = relu_backward(out, &dh);
                    let dmid = c2.backward(patches2, &dpre2, g2);
                    let mut dx = c1.backward(patches1, &relu_backward(mid, &dmid), g1);
                    dx.add_assign(&dpre2);
                    dx
                }
                _ => unreachable!("gradient buffer mirrors the encoder"),
            };
        }
        dh
    }
}

impl<T: Scalar> Parameters<T> for ConvEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Plain(c) => c.visit(&join(prefix, &format!("block{i}")), f),
                Block::Residual(c1, c2) => {
                    c1.visit(&join(prefix, &format!("block{i}.conv1")), f);
                    c2.visit(&join(prefix, &format!("block{i}.conv2")), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match b {
                Block::Plain(c) => c.visit_mut(&join(prefix, &format!("block{i}")), f),
                Block::Residual(c1, c2) => {
                    c1.visit_mut(&join(prefix, &format!("block{i}.conv1")), f);
                    c2.visit_mut(&join(prefix, &format!("block{i}.conv2")), f);
                }
            }
        }
    }
}
