//! Streaming estimation and inference for longitudinal panel data with
//! quadratic inference functions, AR(1) working dependence and exponential
//! time-decay weighting of past batches.

pub mod blocks;
pub mod codec;
pub mod engine;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod offline;
pub mod sim;
pub mod solver;

pub use blocks::BasisSet;
pub use engine::{default_q_grid, fit_stream, q_grid, ModelSpec, QMode, StreamEngine};
pub use error::{Error, Result};
pub use inference::FitReport;
pub use model::{Batch, Family, Observation};
pub use solver::SolverConfig;
