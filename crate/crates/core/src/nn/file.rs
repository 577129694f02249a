//! Versioned JSON form of [`Mlp`]. Weights are written row-major
//! (`outputs × inputs`) in shortest round-trip decimal, so a reload is
//! bit-exact.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, DenseLayer, Mlp, NnError};

pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub format_version: u32,
    pub layers: Vec<LayerFile>,
}

impl From<&DenseLayer> for LayerFile {
    fn from(l: &DenseLayer) -> Self {
        LayerFile {
            inputs: l.inputs(),
            outputs: l.outputs(),
            activation: l.activation,
            weights: l.weights.iter().copied().collect(),
            bias: l.bias.to_vec(),
        }
    }
}

impl TryFrom<&LayerFile> for DenseLayer {
    type Error = NnError;

    fn try_from(f: &LayerFile) -> Result<Self, NnError> {
        let weights = Array2::from_shape_vec((f.outputs, f.inputs), f.weights.clone())
            .map_err(|e| NnError::Format(format!("weights: {e}")))?;
        if f.bias.len() != f.outputs {
            return Err(NnError::Format("bias length differs from outputs".into()));
        }
        Ok(DenseLayer {
            weights,
            bias: Array1::from(f.bias.clone()),
            activation: f.activation,
        })
    }
}

impl Mlp {
    pub fn to_file(&self) -> MlpFile {
        MlpFile {
            format_version: MLP_FORMAT_VERSION,
            layers: self.layers.iter().map(LayerFile::from).collect(),
        }
    }

    pub fn from_file(file: &MlpFile) -> Result<Self, NnError> {
        if file.format_version != MLP_FORMAT_VERSION {
            return Err(NnError::Format(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        let layers = file
            .layers
            .iter()
            .map(DenseLayer::try_from)
            .collect::<Result<Vec<_>, _>>()?;
        Mlp::from_layers(layers)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("mlp serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let file: MlpFile =
            serde_json::from_str(text).map_err(|e| NnError::Format(e.to_string()))?;
        Mlp::from_file(&file)
    }
}
