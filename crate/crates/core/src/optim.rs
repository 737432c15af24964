//! Mini-batch stochastic gradient descent.
//!
//! One update is
//!
//! ```text
//! ḡ ← (1 − β)·ḡ + β·g
//! θ ← θ − ε_t · m_layer · (ḡ + s·(2λ₂θ + λ₁ sign θ))
//! ```
//!
//! where `g` is the mean gradient over the mini-batch, `ε_t = ε₀τ / max(t, τ)`,
//! `m_layer` is an optional per-layer multiplier and the weight-decay term
//! touches weight blocks only. With a fixed training set of size `T` the
//! regularizer scale is `s = B′/T` for a batch of `B′` examples, so one
//! epoch applies the regularizer gradient exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockKind, Parameters};
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// How the weight-decay gradient is scaled on each update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerScaling {
    /// `B′/T` for a training set of known size `T`.
    FixedSet,
    /// `B′/n` with `n` the number of examples seen so far, for streams.
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveTau {
    /// Minimum relative epoch-to-epoch improvement of the training criterion.
    pub threshold: f64,
    /// Epochs between checks.
    pub check_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// ε₀.
    pub learning_rate: f64,
    /// τ; `f64::INFINITY` keeps the rate constant.
    pub tau: f64,
    /// B.
    pub batch_size: usize,
    /// β ∈ (0, 1]; 1 disables smoothing.
    pub momentum: f64,
    pub l1: f64,
    pub l2: f64,
    /// T, the training-set size used by [`RegularizerScaling::FixedSet`].
    pub train_size: usize,
    pub regularizer_scaling: RegularizerScaling,
    /// Learning-rate multiplier per layer; empty means 1 everywhere.
    pub layer_multipliers: Vec<f64>,
    pub polyak: bool,
    pub adaptive_tau: Option<AdaptiveTau>,
    /// Upper bound on the number of updates.
    pub max_updates: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            tau: f64::INFINITY,
            batch_size: DEFAULT_BATCH_SIZE,
            momentum: 1.0,
            l1: 0.0,
            l2: 0.0,
            train_size: 0,
            regularizer_scaling: RegularizerScaling::FixedSet,
            layer_multipliers: Vec::new(),
            polyak: false,
            adaptive_tau: None,
            max_updates: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::spec("learning rate must be positive and finite"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::spec(
                "tau must be positive (use infinity for a constant rate)",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::spec("batch size must be at least 1"));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::spec("momentum coefficient must lie in (0, 1]"));
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0) {
            return Err(Error::spec(
                "weight-decay coefficients must be non-negative",
            ));
        }
        if self.layer_multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::spec(
                "per-layer learning-rate multipliers must be positive",
            ));
        }
        if let Some(a) = self.adaptive_tau {
            if !(a.threshold >= 0.0) || a.check_every == 0 {
                return Err(Error::spec(
                    "adaptive tau needs a non-negative threshold and check_every ≥ 1",
                ));
            }
        }
        if self.regularizer_scaling == RegularizerScaling::FixedSet
            && (self.l1 > 0.0 || self.l2 > 0.0)
            && self.train_size == 0
        {
            return Err(Error::spec(
                "weight decay with fixed-set scaling needs the training-set size",
            ));
        }
        Ok(())
    }

    fn multiplier(&self, layer: usize) -> f64 {
        self.layer_multipliers.get(layer).copied().unwrap_or(1.0)
    }
}

/// `ε₀τ / max(t, τ)`.
pub fn learning_rate(t: u64, initial: f64, tau: f64) -> f64 {
    if tau.is_infinite() {
        return initial;
    }
    initial * tau / (t as f64).max(tau)
}

/// `λ₂Σθ² + λ₁Σ|θ|` over weight blocks.
pub fn regularizer_value<P: Parameters>(params: &P, l1: f64, l2: f64) -> f64 {
    params
        .block_info()
        .iter()
        .zip(params.blocks())
        .filter(|(info, _)| info.kind == BlockKind::Weight)
        .map(|(_, t)| l2 * t.sum_squares() + l1 * t.data().iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}

/// Variance σ² = 1/(2λ₂) of the Gaussian prior equivalent to L2 decay.
pub fn l2_prior_variance(l2: f64) -> f64 {
    1.0 / (2.0 * l2)
}

/// `∇(λ₂Σθ² + λ₁Σ|θ|)` per block; zero for biases. L1 uses sign(0) = 0.
pub fn regularizer_gradient<P: Parameters>(params: &P, l1: f64, l2: f64) -> Vec<Tensor> {
    params
        .block_info()
        .iter()
        .zip(params.blocks())
        .map(|(info, t)| match info.kind {
            BlockKind::Bias => Tensor::zeros_like(t),
            BlockKind::Weight => t.map(|v| 2.0 * l2 * v + l1 * sign(v)),
        })
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scale applied to the regularizer gradient on an update with `batch_actual`
/// examples, `seen_before` examples having been processed earlier.
pub fn regularizer_scale(config: &TrainConfig, batch_actual: usize, seen_before: u64) -> f64 {
    match config.regularizer_scaling {
        RegularizerScaling::FixedSet => batch_actual as f64 / config.train_size.max(1) as f64,
        RegularizerScaling::Online => {
            batch_actual as f64 / (seen_before + batch_actual as u64) as f64
        }
    }
}

/// Regularizer contribution to the update direction of one mini-batch.
pub fn batch_regularization<P: Parameters>(
    params: &P,
    config: &TrainConfig,
    batch_actual: usize,
    seen_before: u64,
) -> Vec<Tensor> {
    let s = regularizer_scale(config, batch_actual, seen_before);
    regularizer_gradient(params, config.l1, config.l2)
        .into_iter()
        .map(|g| g.scale(s))
        .collect()
}

/// Returns true when the relative improvement between the last two epoch
/// criteria falls below `threshold`, signalling that the rate should start
/// to decay.
pub fn adapt_tau(history: &[f64], threshold: f64) -> bool {
    let n = history.len();
    if n < 2 {
        return false;
    }
    let (prev, cur) = (history[n - 2], history[n - 1]);
    let improvement = if prev == 0.0 {
        if cur < prev {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        (prev - cur) / prev.abs()
    };
    improvement < threshold
}

#[derive(Clone, Debug)]
pub struct OptimState<P: Parameters> {
    /// Updates performed so far.
    pub t: u64,
    pub examples_seen: u64,
    pub smoothed: Vec<Tensor>,
    pub params: P,
    average: Option<P>,
    averaged_updates: u64,
    /// τ fixed by the adaptive heuristic, overriding the configured value.
    tau_override: Option<f64>,
}

impl<P: Parameters> OptimState<P> {
    pub fn new(params: P, config: &TrainConfig) -> Self {
        let smoothed = params
            .blocks()
            .iter()
            .map(|t| Tensor::zeros_like(t))
            .collect();
        let average = config.polyak.then(|| params.clone());
        Self {
            t: 0,
            examples_seen: 0,
            smoothed,
            params,
            average,
            averaged_updates: 0,
            tau_override: None,
        }
    }

    pub fn tau(&self, config: &TrainConfig) -> f64 {
        self.tau_override.unwrap_or(config.tau)
    }

    /// Freezes τ at the current update count (idempotent).
    pub fn freeze_tau(&mut self) {
        if self.tau_override.is_none() {
            self.tau_override = Some((self.t as f64).max(1.0));
        }
    }

    pub fn tau_frozen(&self) -> bool {
        self.tau_override.is_some()
    }

    pub fn current_learning_rate(&self, config: &TrainConfig) -> f64 {
        learning_rate(self.t, config.learning_rate, self.tau(config))
    }

    /// Running mean of the parameters visited after each update.
    pub fn polyak_average(&self) -> Option<&P> {
        self.average.as_ref()
    }

    /// Applies one update from the batch-mean gradient `grads` (one tensor
    /// per block) computed on `batch_actual` examples. Returns the learning
    /// rate used.
    pub fn step(
        &mut self,
        config: &TrainConfig,
        grads: &[Tensor],
        batch_actual: usize,
    ) -> Result<f64> {
        let info = self.params.block_info();
        if grads.len() != info.len() {
            return Err(Error::Shape(format!(
                "{} gradient blocks for {} parameter blocks",
                grads.len(),
                info.len()
            )));
        }
        for ((g, b), p) in grads.iter().zip(&info).zip(self.params.blocks()) {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}, expected {:?}",
                    b.name,
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(b.name.clone()));
            }
        }
        let lr = self.current_learning_rate(config);
        let beta = config.momentum;
        for (s, g) in self.smoothed.iter_mut().zip(grads) {
            if beta == 1.0 {
                s.data_mut().copy_from_slice(g.data());
            } else {
                for (sv, gv) in s.data_mut().iter_mut().zip(g.data()) {
                    *sv = (1.0 - beta) * *sv + beta * gv;
                }
            }
        }
        let reg = if config.l1 > 0.0 || config.l2 > 0.0 {
            Some(batch_regularization(
                &self.params,
                config,
                batch_actual,
                self.examples_seen,
            ))
        } else {
            None
        };
        for (i, p) in self.params.blocks_mut().into_iter().enumerate() {
            let rate = lr * config.multiplier(info[i].layer);
            p.scaled_add_assign(-rate, &self.smoothed[i])?;
            if let Some(r) = &reg {
                p.scaled_add_assign(-rate, &r[i])?;
            }
        }
        self.t += 1;
        self.examples_seen += batch_actual as u64;
        if let Some(avg) = self.average.as_mut() {
            self.averaged_updates += 1;
            let n = self.averaged_updates as f64;
            for (a, p) in avg.blocks_mut().into_iter().zip(self.params.blocks()) {
                for (av, pv) in a.data_mut().iter_mut().zip(p.data()) {
                    *av += (pv - *av) / n;
                }
            }
        }
        Ok(lr)
    }
}
