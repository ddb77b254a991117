pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mine;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod textproc;
pub mod training;

pub use config::{resolve_config, RunConfig};
pub use error::{Error, Result};

/// Working precision of training and decoding.
pub type Real = f32;
pub type Model = model::Transformer<Real>;
pub type Features = tensor::Matrix<Real>;
pub type StatNet = mine::StatisticsNetwork<Real>;
pub type Mine = mine::MineTrainer<Real>;
