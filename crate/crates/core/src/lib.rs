pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gfc;
pub mod icp;
pub mod interpret;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod ops;
pub mod pfe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, FeatureMap, Module, Parameter, Tensor};
