//! Desk-scale text-to-image person retrieval lab.
//!
//! The crate generates a controllable synthetic person dataset, encodes
//! images and captions with small differentiable backbones, suppresses
//! image-specific information (relation-guided spatial attention plus
//! instance-norm filtration with channel-attention restitution), aligns
//! the modalities globally and over a bank of shared semantic centers,
//! and trains/evaluates the whole pipeline with a Rank-K harness.
//!
//! Everything runs on the CPU in `f64`. The forward graph is recorded by
//! a small reverse-mode tape ([`autodiff`]), so every operation exposes
//! analytic gradients that can be verified against central finite
//! differences ([`gradcheck`]).

pub mod alignment;
pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objectives;
pub mod params;
pub mod parallel;
pub mod retrieval;
pub mod rng;
pub mod suppression;
pub mod training;

pub use autodiff::{Arr, Graph, Tid};
pub use config::{LossConfig, ModelConfig, RunConfig, TrainConfig};
pub use model::Manet;
pub use ndarray;


