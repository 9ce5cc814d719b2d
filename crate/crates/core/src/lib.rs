//! Score-guided mixing augmentation for GAN training, at desk scale.
//!
//! Pipeline: fit a noise-conditional score network by multi-scale denoising
//! score matching ([`score_net`]), push mixup interpolants toward high-density
//! regions by minimizing the squared score norm ([`augment`]), feed the
//! resulting pool to a toy GAN ([`gan`]) and score everything against exact
//! Gaussian-mixture oracles ([`synthetic`], [`metrics`]).

pub mod adam;
pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod mlp;
pub mod plot;
pub mod rng;
pub mod schedule;
pub mod score_net;
pub mod synthetic;

pub use error::{Error, Result};
