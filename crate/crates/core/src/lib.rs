pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::scalar::Real;
pub use tensor::{FlowField, Tensor, UpsampleMode};
pub mod afwm;
pub mod nn;
pub mod generator;
pub mod losses;
pub mod image_io;
pub mod optim;
pub mod synth;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
