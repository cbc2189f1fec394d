//! Kernel-regression Schrödinger bridges for time series generation under
//! intervalwise frozen Gaussian references.

pub mod bridge;
pub mod conditioning;
pub mod descriptor;
pub mod dgp;
pub mod error;
pub mod generator;
pub mod linalg;
pub mod path;
pub mod reference;
pub mod scoring;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{FlooredPsd, SymMatrix};
pub use path::CoarsePath;
pub use reference::{CumulantPath, FrozenInterval};
