pub mod anchors;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod objective;
pub mod occlusion;
pub mod refine;
pub mod retrieval;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
