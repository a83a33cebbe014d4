//! Lagrangian transport of microbubbles through a closed flow loop, and
//! the on-off keyed communication link built on top of it.

pub mod bubble;
pub mod comm;
pub mod config;
pub mod error;
pub mod fluid;
pub mod io;
pub mod rng;
pub mod scenario;
pub mod studies;
pub mod transport;

pub use error::{Error, Result, ValidationError};
pub use scenario::Scenario;
pub use transport::{run, run_with, RunOptions, SimulationResult};
