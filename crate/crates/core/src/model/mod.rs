//! A small convolutional classifier trained from scratch.
//!
//! The network is generic over `f32` (training and inference) and `f64`
//! (gradient checking).

mod checkpoint;
mod gradcheck;
mod network;
mod train;

use std::fmt::Debug;
use std::ops::{AddAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{adapt_first_layer, Checkpoint, NamedTensor, TrainingMetadata};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckReport};
pub use network::{Gradients, Network, Objective};
pub use train::{accuracy, train, TrainConfig, TrainingExample};

pub trait Real:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + AddAssign + SubAssign + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    /// conv 3×3 / relu / maxpool 2 / conv 3×3 / relu / maxpool 2 /
    /// dense / relu / dense.
    Cnn { conv1: usize, conv2: usize, hidden: usize },
    /// One dense layer on the flattened input.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    pub architecture: Architecture,
}

impl CnnSpec {
    /// The 32×32 reference network: 32 and 64 filters, 256 hidden units.
    pub fn reference(input_channels: usize, classes: usize) -> Self {
        Self {
            input_channels,
            input_size: 32,
            classes,
            architecture: Architecture::Cnn {
                conv1: 32,
                conv2: 64,
                hidden: 256,
            },
        }
    }

    pub fn linear(input_channels: usize, input_size: usize, classes: usize) -> Self {
        Self {
            input_channels,
            input_size,
            classes,
            architecture: Architecture::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least two classes"));
        }
        if self.input_size == 0 {
            return Err(Error::invalid("input_size", "must be positive"));
        }
        if let Architecture::Cnn { conv1, conv2, hidden } = self.architecture {
            if self.input_size % 4 != 0 {
                return Err(Error::invalid(
                    "input_size",
                    format!("must be divisible by 4 for two pooling stages, got {}", self.input_size),
                ));
            }
            if conv1 == 0 || conv2 == 0 || hidden == 0 {
                return Err(Error::invalid("architecture", "layer widths must be positive"));
            }
        }
        Ok(())
    }

    /// Name and shape of every parameter tensor, in layer order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, s, k) = (self.input_channels, self.input_size, self.classes);
        match self.architecture {
            Architecture::Cnn { conv1, conv2, hidden } => {
                let flat = conv2 * (s / 4) * (s / 4);
                vec![
                    ("conv1.weight".into(), vec![conv1, c, 3, 3]),
                    ("conv1.bias".into(), vec![conv1]),
                    ("conv2.weight".into(), vec![conv2, conv1, 3, 3]),
                    ("conv2.bias".into(), vec![conv2]),
                    ("dense1.weight".into(), vec![hidden, flat]),
                    ("dense1.bias".into(), vec![hidden]),
                    ("dense2.weight".into(), vec![k, hidden]),
                    ("dense2.bias".into(), vec![k]),
                ]
            }
            Architecture::Linear => vec![
                ("dense1.weight".into(), vec![k, c * s * s]),
                ("dense1.bias".into(), vec![k]),
            ],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_parameter_count() {
        let spec = CnnSpec::reference(4, 8);
        let expected = 32 * 4 * 9 + 32 + 64 * 32 * 9 + 64 + 256 * 4096 + 256 + 8 * 256 + 8;
        assert_eq!(spec.parameter_count(), expected);
        spec.validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut spec = CnnSpec::reference(3, 1);
        assert!(spec.validate().is_err());
        spec.classes = 4;
        spec.input_size = 30;
        assert!(spec.validate().is_err());
        assert!(CnnSpec::linear(3, 30, 4).validate().is_ok());
    }
}
