//! Layers with explicit forward/backward passes.
//!
//! Gradients are accumulated into a structurally identical value of the same
//! type (`Linear` gradients live in a `Linear`, and so on), which keeps the
//! optimizer a simple zip over [`Parameters::visit_mut`].

mod conv;
mod encoder;
mod linear;

pub use conv::{Conv2d, ConvEncoder, ConvShape};
pub use encoder::{Backbone, BackboneCache, BackboneSpec, MlpEncoder};
pub use linear::Linear;

use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Named walk over trainable buffers in a fixed order.
pub trait Parameters<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn fill_zero(&mut self)
    where
        T: Scalar,
    {
        self.visit_mut("", &mut |_, p| p.fill(T::zero()));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.max(T::zero()))
}

/// Masks `grad` where the post-activation `out` was clamped to zero.
pub fn relu_backward<T: Scalar>(out: &Matrix<T>, grad: &Matrix<T>) -> Matrix<T> {
    let mut g = grad.clone();
    for (gv, &o) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}
