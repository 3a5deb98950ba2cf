//! Knowledge-grounded generative modeling of longitudinal clinical event
//! sequences, with the tooling to train, sample and evaluate it.

pub mod corpus;
pub mod engine;
pub mod evaluate;
pub mod generate;
pub mod knowledge;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensorfile;
pub mod train;
pub mod vocab;

pub use scalar::Scalar;

pub type Tensor32 = engine::Tensor<f32>;
pub type Tensor64 = engine::Tensor<f64>;
