//! Captured residual-stream activations and the layer identifiers that
//! address them.

use std::fmt;
use std::str::FromStr;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A transformer block, addressed as `blocks.{i}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct LayerId(pub usize);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}", self.0)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    /// Accepts `blocks.3` or a bare `3`.
    fn from_str(s: &str) -> Result<Self> {
        let digits = s.strip_prefix("blocks.").unwrap_or(s);
        digits.parse().map(LayerId).map_err(|_| Error::UnknownLayer {
            layer: s.to_string(),
            n_blocks: 0,
        })
    }
}

impl From<LayerId> for String {
    fn from(l: LayerId) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for LayerId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One layer activation laid out as `[T, C, W, H]`, where `W` and `H` count
/// tokens (pixels / patch size) along x and y.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor<T> {
    pub data: Array4<T>,
    pub layer: LayerId,
    /// Where the input window came from (trajectory hash and frame offset).
    pub source: String,
}

impl<T: Scalar> ActivationTensor<T> {
    pub fn new(data: Array4<T>, layer: LayerId, source: impl Into<String>) -> Self {
        Self {
            data,
            layer,
            source: source.into(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let d = self.data.dim();
        [d.0, d.1, d.2, d.3]
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn with_data(&self, data: Array4<T>) -> Self {
        Self {
            data,
            layer: self.layer,
            source: self.source.clone(),
        }
    }

    pub(crate) fn check_shape(&self, expected: [usize; 4], context: &str) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected: expected.to_vec(),
                found: self.shape().to_vec(),
            });
        }
        Ok(())
    }
}
