pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
pub mod chunker;
pub mod tokenizer;
pub mod aggregator;
pub mod params;
pub mod rng;
pub mod transformer;
pub mod word_encoder;
pub mod model;
pub mod checkpoint;
pub mod optim;
pub mod metrics;
pub mod data;
pub mod synth;
pub mod train;
pub mod baselines;
