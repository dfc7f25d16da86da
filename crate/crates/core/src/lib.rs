//! Semantics-guided latent representations: a convolutional VAE whose normalized
//! latent codes are shaped by an angular triplet-neighbor loss, plus spherical
//! interpolation for synthesizing images in semantic order.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
