// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod classifiers;
pub mod config;
pub mod container;
pub mod decision;
pub mod digest;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod nn;
pub mod perceptual;
pub mod pipeline;
pub mod projectors;
pub mod rng;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
