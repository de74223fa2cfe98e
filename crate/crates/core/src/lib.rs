//! Open-set semi-supervised classification for long-tailed data.
//!
//! The crate provides the numerical pieces (simplex ETF frames, the joint
//! loss with its gradients, classifier max-norm projection), small CPU
//! networks with explicit backprop, dataset splitting and augmentation, the
//! training loop and evaluation protocols. Everything numeric is generic over
//! [`Scalar`] (`f32` or `f64`); the `*32` / `*64` aliases below pin one.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod etf;
pub mod evaluation;
pub mod experiments;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod regularizers;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = linalg::Matrix<f32>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type SimplexEtf32 = etf::SimplexEtf<f32>;
pub type SimplexEtf64 = etf::SimplexEtf<f64>;
pub type ModelHeads32 = model::ModelHeads<f32>;
pub type ModelHeads64 = model::ModelHeads<f64>;
