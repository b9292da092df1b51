pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dsf;
pub mod energy;
pub mod error;
pub mod graph;
pub mod model;
pub mod mssa;
pub mod obs;
pub mod opcount;
pub mod spiking;

pub use autograd::{grad_check, GradCheckReport, Real, Tensor};
pub use error::{Error, Result};
