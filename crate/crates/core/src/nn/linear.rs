use rand::Rng;

use super::{join, Parameters};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Affine map `y = x·Wᵀ + b`, with `W` stored out×in (one row per output unit).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform `±1/sqrt(in_dim)` initialisation for weights and bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || T::lit(rng.random_range(-bound..bound));
        let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, weight).expect("sized buffer"),
            bias,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul_nt(&self.weight);
        for r in 0..y.rows() {
            for (v, &b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        grad.weight.add_assign(&dy.matmul_tn(x));
        for row in dy.iter_rows() {
            for (g, &d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        dy.matmul(&self.weight)
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "weight"), self.weight.as_slice());
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "weight"), self.weight.as_mut_slice());
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
