//! Data-driven surrogate models and model predictive control for simulated plants.

pub mod error;
pub mod esn;
pub mod io;
pub mod linalg;
pub mod linid;
pub mod models;
pub mod mpc;
pub mod nets;
pub mod plants;
pub mod rng;
pub mod surrogate;
pub mod sweep;
pub mod timeseries;
pub mod timing;

pub use error::{Error, Result};
