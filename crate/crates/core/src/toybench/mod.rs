//! A self-contained dense-prediction benchmark small enough to train on a
//! CPU in minutes: procedural images of colored shapes with four
//! pixel-wise targets derived from the same geometry, a tiny convolutional
//! backbone, baselines, training and evaluation.

pub mod activations;
pub mod backbone;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tasks;
pub mod train;
