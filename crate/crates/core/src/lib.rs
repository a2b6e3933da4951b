pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod imgops;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod segmentation;
pub mod self_training;
pub mod tensor;
pub mod translation;
pub mod volume;

pub use error::{Error, Result};
