pub mod alignment;
pub mod cli;
pub mod config;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod fusion;
pub mod graph;
pub mod io;
pub mod kernel_estimation;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod synthetic;
pub mod training;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
