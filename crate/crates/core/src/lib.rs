pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod head;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{GaitModel, ModelConfig};
pub use tensor::Tensor;
