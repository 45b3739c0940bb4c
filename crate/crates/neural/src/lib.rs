//! Neural algebraic multigrid: a reverse-mode tape, the NAMG network used
//! as a GMRES preconditioner, and the dataset/training pipeline.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod namg;
pub mod optim;
pub mod training;

pub use error::{NeuralError, Result};
