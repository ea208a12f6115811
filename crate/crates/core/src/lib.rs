//! Desk-scale training and evaluation lab for anchor-based object detection,
//! teacher-student self-training, feature-imitation knowledge distillation and
//! partially-annotated multi-task learning.
//!
//! The numeric core is generic over the scalar type (`f32` for training speed,
//! `f64` for gradient verification); see [`Scalar`].

pub mod assign;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fd;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod split;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the CLI and the toy-scale presets.
pub type DefaultScalar = f32;

/// Concrete model aliases for the two scalar types the lab is run with.
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
