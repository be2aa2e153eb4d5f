use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Rann};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FORMAT: &str = "rann-checkpoint/1";

/// Self-describing model snapshot.
///
/// Parameters are stored as the bit patterns of their `f64` widening, so a
/// save/load cycle reproduces every weight exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub scalar: String,
    pub n_params: usize,
    pub config: ModelConfig,
    pub params: Vec<u64>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Rann<T>) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            scalar: std::any::type_name::<T>().to_string(),
            n_params: model.n_params(),
            config: model.config().clone(),
            params: model.params().iter().map(|p| p.as_f64().to_bits()).collect(),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Rann<T>> {
        if self.format != FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format {:?}", self.format)));
        }
        if self.params.len() != self.n_params {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.n_params),
                actual: format!("{}", self.params.len()),
            });
        }
        let params = self.params.iter().map(|&b| T::lit(f64::from_bits(b))).collect();
        Rann::from_parts(self.config.clone(), params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
