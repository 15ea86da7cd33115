//! Self-supervised 2D and 3D quadruped pose learning from unlabelled images
//! and an unpaired prior of synthetic 2D poses.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod ingestion;
pub mod networks;
pub mod plot;
pub mod renderer;
pub mod rng;
pub mod skeleton;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
