//! Score-based diffusion laboratory for negative guidance and self-consuming
//! training loops.

pub mod autophagy;
pub mod error;
pub mod guidance;
pub mod io;
pub mod lab;
pub mod linalg;
pub mod metrics;
pub mod points;
pub mod reference;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod score;

pub use error::{LabError, Result};
