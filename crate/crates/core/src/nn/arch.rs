use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::model::Model;
use crate::error::{Error, Result};

/// Built-in network architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// conv3x3x32, ReLU, maxpool 2, conv3x3x32, ReLU, flatten, dense.
    SmallCnn,
    /// flatten, dense 64, ReLU, dense 32, ReLU, dense.
    Mlp,
    /// Four conv3x3 + ReLU blocks (16, 16, pool, 32, 32), global average pool, dense.
    DeepCnn,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::SmallCnn,
        Architecture::Mlp,
        Architecture::DeepCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::SmallCnn => "small-cnn",
            Architecture::Mlp => "mlp",
            Architecture::DeepCnn => "deep-cnn",
        }
    }

    /// Layer list for `[channels, height, width]` inputs and `classes` outputs.
    pub fn layers(self, input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
        let &[c, h, w] = input_shape else {
            return Err(Error::config(format!(
                "{} expects a [C, H, W] input shape, got {input_shape:?}",
                self.name()
            )));
        };
        let pool = LayerSpec::Maxpool2d { window: 2, stride: 2 };
        Ok(match self {
            Architecture::SmallCnn => vec![
                LayerSpec::conv3x3(c, 32),
                LayerSpec::Relu,
                pool,
                LayerSpec::conv3x3(32, 32),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 32 * (h / 2) * (w / 2), outputs: classes },
            ],
            Architecture::Mlp => vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: c * h * w, outputs: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 64, outputs: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 32, outputs: classes },
            ],
            Architecture::DeepCnn => vec![
                LayerSpec::conv3x3(c, 16),
                LayerSpec::Relu,
                LayerSpec::conv3x3(16, 16),
                LayerSpec::Relu,
                pool,
                LayerSpec::conv3x3(16, 32),
                LayerSpec::Relu,
                LayerSpec::conv3x3(32, 32),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { inputs: 32, outputs: classes },
            ],
        })
    }

    /// Freshly initialised model.
    pub fn build(self, input_shape: &[usize], classes: usize, seed: u64) -> Result<Model> {
        Model::init(input_shape.to_vec(), self.layers(input_shape, classes)?, seed)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown architecture `{s}`")))
    }
}
