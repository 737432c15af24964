//! Layers, loss heads, initialization and multi-layer perceptrons.

pub mod activation;
mod checkpoint;
pub(crate) mod init;
pub(crate) mod mlp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use activation::Nonlinearity;
pub use checkpoint::{read_params, read_sidecar_seed, write_params, write_sidecar};
pub use init::{init_range, initialize, InitScheme};
pub use mlp::{build_mlp, predict, LayerNodes, MlpGraph};

use crate::error::{Error, Result};
use crate::flowgraph::LossKind;
use crate::tensor::Tensor;

/// Output probability model paired with its output non-linearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossHead {
    /// Squared error on a linear output.
    SquaredError,
    /// Binary cross-entropy on sigmoid outputs.
    CrossEntropy,
    /// Multinomial negative log-likelihood on a softmax output.
    Nll,
}

impl LossHead {
    pub fn output_nonlinearity(self) -> Nonlinearity {
        match self {
            LossHead::SquaredError => Nonlinearity::Linear,
            LossHead::CrossEntropy => Nonlinearity::Sigmoid,
            LossHead::Nll => Nonlinearity::Softmax,
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            LossHead::SquaredError => LossKind::SquaredError,
            LossHead::CrossEntropy => LossKind::SigmoidCrossEntropy,
            LossHead::Nll => LossKind::SoftmaxNll,
        }
    }
}

impl FromStr for LossHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "squared" | "squared-error" | "mse" => LossHead::SquaredError,
            "cross-entropy" | "binary-cross-entropy" | "bce" => LossHead::CrossEntropy,
            "nll" | "softmax" | "multinomial" => LossHead::Nll,
            other => return Err(Error::spec(format!("unknown loss head `{other}`"))),
        })
    }
}

impl fmt::Display for LossHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossHead::SquaredError => "squared-error",
            LossHead::CrossEntropy => "cross-entropy",
            LossHead::Nll => "nll",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub nonlinearity: Nonlinearity,
    pub init: InitScheme,
    pub init_scale: f64,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, nonlinearity: Nonlinearity) -> Self {
        let init = match nonlinearity {
            Nonlinearity::Sigmoid => InitScheme::GlorotSigmoid,
            _ => InitScheme::GlorotTanh,
        };
        Self {
            fan_in,
            fan_out,
            nonlinearity,
            init,
            init_scale: 1.0,
        }
    }

    pub fn with_init(mut self, init: InitScheme, scale: f64) -> Self {
        self.init = init;
        self.init_scale = scale;
        self
    }
}

/// Architecture of a feedforward network; the last layer is the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub head: LossHead,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>, head: LossHead) -> Result<Self> {
        let spec = Self { layers, head };
        spec.validate()?;
        Ok(spec)
    }

    /// Equal-width hidden layers followed by the head's output layer.
    pub fn mlp(
        inputs: usize,
        hidden: &[usize],
        nonlinearity: Nonlinearity,
        outputs: usize,
        head: LossHead,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = inputs;
        for &h in hidden {
            layers.push(LayerSpec::new(fan_in, h, nonlinearity));
            fan_in = h;
        }
        layers.push(LayerSpec::new(fan_in, outputs, head.output_nonlinearity()));
        Self::new(layers, head)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::spec("a model needs at least one layer"));
        };
        for (i, l) in self.layers.iter().enumerate() {
            if l.fan_in == 0 || l.fan_out == 0 {
                return Err(Error::spec(format!("layer {i} has a zero dimension")));
            }
            if !(l.init_scale > 0.0) {
                return Err(Error::spec(format!(
                    "layer {i} init scale must be positive"
                )));
            }
            if i > 0 && self.layers[i - 1].fan_out != l.fan_in {
                return Err(Error::spec(format!(
                    "layer {i} fan-in {} does not match previous fan-out {}",
                    l.fan_in,
                    self.layers[i - 1].fan_out
                )));
            }
            if i + 1 < self.layers.len() && l.nonlinearity == Nonlinearity::Softmax {
                return Err(Error::spec("softmax is only valid on the output layer"));
            }
        }
        if last.nonlinearity == Nonlinearity::Rectifier {
            return Err(Error::spec("rectifier output units are not supported"));
        }
        if last.nonlinearity != self.head.output_nonlinearity() {
            return Err(Error::spec(format!(
                "{} loss needs a {} output layer, got {}",
                self.head,
                self.head.output_nonlinearity(),
                last.nonlinearity
            )));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("validated").fan_out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Shape (fan-out, fan-in).
    pub weight: Tensor,
    /// Shape (fan-out).
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_out, fan_in]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn check_matches(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::spec(format!(
                "parameters have {} layers, spec has {}",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (p, l)) in self.layers.iter().zip(&spec.layers).enumerate() {
            if p.weight.shape() != [l.fan_out, l.fan_in] || p.bias.shape() != [l.fan_out] {
                return Err(Error::spec(format!(
                    "layer {i} parameters {:?}/{:?} do not match {}x{}",
                    p.weight.shape(),
                    p.bias.shape(),
                    l.fan_out,
                    l.fan_in
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Weight,
    Bias,
}

/// Description of one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockInfo {
    pub name: String,
    pub kind: BlockKind,
    /// Index of the layer the block belongs to, for per-layer learning rates.
    pub layer: usize,
}

/// A parameter set θ that an optimizer can update block by block.
pub trait Parameters: Clone {
    fn block_info(&self) -> Vec<BlockInfo>;
    fn blocks(&self) -> Vec<&Tensor>;
    fn blocks_mut(&mut self) -> Vec<&mut Tensor>;
}

impl Parameters for ModelParams {
    fn block_info(&self) -> Vec<BlockInfo> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for i in 0..self.layers.len() {
            out.push(BlockInfo {
                name: format!("W{}", i + 1),
                kind: BlockKind::Weight,
                layer: i,
            });
            out.push(BlockInfo {
                name: format!("b{}", i + 1),
                kind: BlockKind::Bias,
                layer: i,
            });
        }
        out
    }

    fn blocks(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
