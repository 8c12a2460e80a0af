//! Regression of anatomical standard planes from 3D voxel volumes.

pub mod augmentation;
pub mod config;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod loss_metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
