use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Unit non-linearities. `Softmax` acts on a whole row and is only valid
/// as an output non-linearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    Sigmoid,
    Tanh,
    Rectifier,
    HardTanh,
    Softsign,
    Linear,
    Softmax,
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^a)` without overflow.
pub fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Nonlinearity {
    pub fn is_elementwise(self) -> bool {
        self != Nonlinearity::Softmax
    }

    /// Elementwise value. Softmax has no elementwise form and maps to identity here.
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Nonlinearity::Sigmoid => sigmoid(a),
            Nonlinearity::Tanh => a.tanh(),
            Nonlinearity::Rectifier => a.max(0.0),
            Nonlinearity::HardTanh => a.clamp(-1.0, 1.0),
            Nonlinearity::Softsign => a / (1.0 + a.abs()),
            Nonlinearity::Linear | Nonlinearity::Softmax => a,
        }
    }

    /// Derivative at pre-activation `a`, given the output `s = apply(a)`.
    ///
    /// Rectifier and hard-tanh use 0 at their kinks.
    pub fn derivative(self, a: f64, s: f64) -> f64 {
        match self {
            Nonlinearity::Sigmoid => s * (1.0 - s),
            Nonlinearity::Tanh => 1.0 - s * s,
            Nonlinearity::Rectifier => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::HardTanh => {
                if a > -1.0 && a < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Softsign => {
                let d = 1.0 + a.abs();
                1.0 / (d * d)
            }
            Nonlinearity::Linear | Nonlinearity::Softmax => 1.0,
        }
    }

    /// Second derivative, for the non-linearities with a smooth closed form.
    pub fn second_derivative(self, s: f64) -> Option<f64> {
        match self {
            Nonlinearity::Sigmoid => Some(s * (1.0 - s) * (1.0 - 2.0 * s)),
            Nonlinearity::Tanh => Some(-2.0 * s * (1.0 - s * s)),
            Nonlinearity::Linear => Some(0.0),
            _ => None,
        }
    }

    /// Points where the function is not differentiable.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Nonlinearity::Rectifier => &[0.0],
            Nonlinearity::HardTanh => &[-1.0, 1.0],
            _ => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Sigmoid => "sigmoid",
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Rectifier => "rectifier",
            Nonlinearity::HardTanh => "hard-tanh",
            Nonlinearity::Softsign => "softsign",
            Nonlinearity::Linear => "linear",
            Nonlinearity::Softmax => "softmax",
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "sigmoid" | "logistic" => Nonlinearity::Sigmoid,
            "tanh" => Nonlinearity::Tanh,
            "rectifier" | "relu" => Nonlinearity::Rectifier,
            "hard-tanh" | "hardtanh" => Nonlinearity::HardTanh,
            "softsign" => Nonlinearity::Softsign,
            "linear" | "identity" => Nonlinearity::Linear,
            "softmax" => Nonlinearity::Softmax,
            other => return Err(Error::spec(format!("unknown non-linearity `{other}`"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn ranges_hold_on_random_inputs() {
        let mut rng = crate::rng::rng(11);
        for _ in 0..10_000 {
            let a: f64 = rng.random_range(-40.0..40.0);
            let s = Nonlinearity::Sigmoid.apply(a);
            assert!(s >= 0.0 && s <= 1.0);
            // strict bounds hold away from floating saturation
            if a.abs() < 30.0 {
                assert!(s > 0.0 && s < 1.0);
                let t = Nonlinearity::Tanh.apply(a / 2.0);
                assert!(t > -1.0 && t < 1.0);
            }
            assert!(Nonlinearity::Rectifier.apply(a) >= 0.0);
            let ss = Nonlinearity::Softsign.apply(a);
            assert!(ss > -1.0 && ss < 1.0);
            let h = Nonlinearity::HardTanh.apply(a);
            assert!((-1.0..=1.0).contains(&h));
        }
    }

    #[test]
    fn hard_tanh_clamps() {
        assert_eq!(Nonlinearity::HardTanh.apply(5.0), 1.0);
        assert_eq!(Nonlinearity::HardTanh.apply(-5.0), -1.0);
        assert_eq!(Nonlinearity::HardTanh.apply(0.3), 0.3);
    }

    #[test]
    fn rectifier_subgradient_at_zero() {
        assert_eq!(Nonlinearity::Rectifier.derivative(0.0, 0.0), 0.0);
    }

    #[test]
    fn sigmoid_at_origin() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
