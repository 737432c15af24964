use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LayerParams, ModelParams, ModelSpec};
use crate::error::Error;
use crate::tensor::Tensor;

/// Uniform(−r, r) weight initialization rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// r = √(6 / (fan-in + fan-out)).
    GlorotTanh,
    /// r = 4·√(6 / (fan-in + fan-out)).
    GlorotSigmoid,
    /// r = 1 / √fan-in.
    LecunSqrtFanin,
}

pub fn init_range(scheme: InitScheme, fan_in: usize, fan_out: usize) -> f64 {
    let glorot = (6.0 / (fan_in + fan_out) as f64).sqrt();
    match scheme {
        InitScheme::GlorotTanh => glorot,
        InitScheme::GlorotSigmoid => 4.0 * glorot,
        InitScheme::LecunSqrtFanin => 1.0 / (fan_in as f64).sqrt(),
    }
}

/// Samples hidden weights per layer scheme; biases and the whole output
/// layer start at zero. Deterministic in `seed`.
pub fn initialize(spec: &ModelSpec, seed: u64) -> ModelParams {
    let mut rng = crate::rng::rng(seed);
    let last = spec.layers.len() - 1;
    let layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut p = LayerParams::zeros(l.fan_in, l.fan_out);
            if i < last {
                p.weight = uniform_weights(
                    &mut rng,
                    l.fan_in,
                    l.fan_out,
                    l.init_scale * init_range(l.init, l.fan_in, l.fan_out),
                );
            }
            p
        })
        .collect();
    ModelParams { layers }
}

pub(crate) fn uniform_weights(rng: &mut impl Rng, fan_in: usize, fan_out: usize, r: f64) -> Tensor {
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-r..=r))
        .collect();
    Tensor::matrix(fan_out, fan_in, data).expect("weight shape")
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "glorot-tanh" | "glorot" => InitScheme::GlorotTanh,
            "glorot-sigmoid" => InitScheme::GlorotSigmoid,
            "lecun" | "lecun-sqrt-fanin" => InitScheme::LecunSqrtFanin,
            other => return Err(Error::spec(format!("unknown init scheme `{other}`"))),
        })
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::GlorotTanh => "glorot-tanh",
            InitScheme::GlorotSigmoid => "glorot-sigmoid",
            InitScheme::LecunSqrtFanin => "lecun-sqrt-fanin",
        })
    }
}
