//! Physics-constrained hybrid modelling: reverse-mode autodiff, hybrid model
//! topologies, constraint projection, constrained training, variational
//! uncertainty quantification and benchmark problems.

pub mod autodiff;
pub mod bench;
pub mod linalg;
pub mod model;
pub mod physics;
pub mod project;
pub mod train;
pub mod uq;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
