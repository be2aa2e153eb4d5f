pub mod analysis;
pub mod attention;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fairmetrics;
pub mod model;
pub mod pareto;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision network used for training.
pub type Model = model::Rann<f32>;
pub type Image = tensor::ImageTensor<f32>;
pub type Predictions = fairmetrics::GroupedPredictions<f64>;
pub type Report = fairmetrics::FairnessReport<f64>;
pub type Candidate = pareto::ModelCandidate<f64>;
