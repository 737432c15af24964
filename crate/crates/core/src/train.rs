//! Training loop: epoch ordering, mini-batches, validation-driven early
//! stopping and monitoring statistics.
//!
//! Progress is measured in *age*, the number of updates times the nominal
//! mini-batch size `B`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{
    corrupt_with, sample_coordinates_with, AutoencoderGraph, AutoencoderParams,
};
use crate::dataio::{argmax, Dataset};
use crate::error::{Error, Result};
use crate::nn::{LossHead, MlpGraph, ModelParams, Parameters};
use crate::optim::{adapt_tau, OptimState, TrainConfig};
use crate::tensor::Tensor;

/// Default initial patience, in examples.
pub const DEFAULT_PATIENCE: u64 = 10_000;

/// Visiting order for epoch `epoch`. Without reshuffling every epoch reuses
/// the epoch-0 order.
pub fn shuffle_epoch(n: usize, seed: u64, epoch: u64, reshuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let tag = if reshuffle { epoch } else { 0 };
    order.shuffle(&mut crate::rng::rng(crate::rng::derive(
        seed,
        &[0x5348_5546, tag],
    )));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatienceGrowth {
    /// patience ← max(patience, age × factor)
    Multiplicative(f64),
    /// patience ← max(patience, age + increment)
    Additive(u64),
}

impl PatienceGrowth {
    fn apply(self, age: u64) -> u64 {
        match self {
            PatienceGrowth::Multiplicative(f) => (age as f64 * f).ceil() as u64,
            PatienceGrowth::Additive(k) => age.saturating_add(k),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    /// Initial patience in examples.
    pub patience: u64,
    pub growth: PatienceGrowth,
    /// Examples between validation evaluations; `None` uses the validation
    /// set size. Rounded up to a whole number of mini-batches.
    pub eval_every: Option<u64>,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            patience: DEFAULT_PATIENCE,
            growth: PatienceGrowth::Multiplicative(2.0),
            eval_every: None,
        }
    }
}

impl EarlyStopConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.growth {
            PatienceGrowth::Multiplicative(f) if !(f >= 1.0) => {
                Err(Error::spec("patience growth factor must be at least 1"))
            }
            _ if self.eval_every == Some(0) => {
                Err(Error::spec("evaluation interval must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopState<P> {
    pub patience: u64,
    pub growth: PatienceGrowth,
    pub enabled: bool,
    /// T̂: update index of the best validation error so far.
    pub best_update: Option<u64>,
    pub best_age: u64,
    pub best_validation: f64,
    pub best_params: Option<P>,
}

impl<P: Clone> EarlyStopState<P> {
    pub fn new(config: &EarlyStopConfig) -> Self {
        Self {
            patience: config.patience,
            growth: config.growth,
            enabled: config.enabled,
            best_update: None,
            best_age: 0,
            best_validation: f64::INFINITY,
            best_params: None,
        }
    }

    /// Records one validation result. A strict new minimum snapshots
    /// `params`, sets T̂ ← t and grows the patience; training stops once
    /// `age` exceeds the patience.
    pub fn update(&mut self, t: u64, validation: f64, age: u64, params: &P) -> Decision {
        if validation < self.best_validation {
            self.best_validation = validation;
            self.best_update = Some(t);
            self.best_age = age;
            self.best_params = Some(params.clone());
            self.patience = self.patience.max(self.growth.apply(age));
        }
        if self.enabled && age > self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

/// Free-function form of [`EarlyStopState::update`].
pub fn early_stop_update<P: Clone>(
    state: &mut EarlyStopState<P>,
    t: u64,
    validation: f64,
    age: u64,
    params: &P,
) -> Decision {
    state.update(t, validation, age, params)
}

/// A training criterion over a dataset.
pub trait Objective {
    type Params: Parameters;

    /// Mean loss over `rows` of `data` and its gradient blocks. `seed` drives
    /// any stochastic part of the criterion (corruption, sampling).
    fn loss_and_gradient(
        &mut self,
        params: &Self::Params,
        data: &Dataset,
        rows: &[usize],
        seed: u64,
    ) -> Result<(f64, Vec<Tensor>)>;

    /// Deterministic mean training criterion over all of `data`.
    fn training_loss(&mut self, params: &Self::Params, data: &Dataset) -> Result<f64>;

    /// Validation error used for early stopping and model selection.
    fn validation_error(&mut self, params: &Self::Params, data: &Dataset) -> Result<f64>;

    /// Per-layer monitoring statistics on `data`, when supported.
    fn stats(
        &mut self,
        _params: &Self::Params,
        _data: &Dataset,
    ) -> Result<Option<Vec<LayerStats>>> {
        Ok(None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationMetric {
    /// Mean loss of the training criterion.
    Loss,
    /// Fraction of misclassified rows (argmax, or threshold 0.5 for a
    /// single sigmoid output).
    ClassificationError,
}

/// Supervised network training.
pub struct Supervised {
    pub graph: MlpGraph,
    pub metric: ValidationMetric,
}

impl Supervised {
    pub fn new(graph: MlpGraph, metric: ValidationMetric) -> Self {
        Self { graph, metric }
    }
}

impl Objective for Supervised {
    type Params = ModelParams;

    fn loss_and_gradient(
        &mut self,
        params: &ModelParams,
        data: &Dataset,
        rows: &[usize],
        _seed: u64,
    ) -> Result<(f64, Vec<Tensor>)> {
        let y = data.targets()?;
        self.graph
            .loss_and_gradient(params, data.x.select_rows(rows), y.select_rows(rows))
    }

    fn training_loss(&mut self, params: &ModelParams, data: &Dataset) -> Result<f64> {
        self.graph
            .loss_value(params, data.x.clone(), data.targets()?.clone())
    }

    fn validation_error(&mut self, params: &ModelParams, data: &Dataset) -> Result<f64> {
        match self.metric {
            ValidationMetric::Loss => self.training_loss(params, data),
            ValidationMetric::ClassificationError => {
                classification_error(&self.graph, params, data)
            }
        }
    }

    fn stats(&mut self, params: &ModelParams, data: &Dataset) -> Result<Option<Vec<LayerStats>>> {
        collect_stats(&mut self.graph, params, data).map(Some)
    }
}

pub fn classification_error(graph: &MlpGraph, params: &ModelParams, data: &Dataset) -> Result<f64> {
    let out = crate::nn::predict(&graph.spec, params, &data.x)?;
    let y = data.targets()?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    for r in 0..out.rows() {
        let (p, t) = (out.row(r), y.row(r));
        let miss = if p.len() == 1 && graph.spec.head == LossHead::CrossEntropy {
            (p[0] >= 0.5) != (t[0] >= 0.5)
        } else {
            argmax(p) != argmax(t)
        };
        wrong += usize::from(miss);
    }
    Ok(wrong as f64 / out.rows() as f64)
}

/// Auto-encoder training on inputs only; validation is the reconstruction
/// loss of the clean inputs.
pub struct Unsupervised {
    pub graph: AutoencoderGraph,
    /// Importance-sampled reconstruction for sparse inputs.
    pub sampled: bool,
}

impl Unsupervised {
    pub fn new(spec: &crate::autoencoder::AutoencoderSpec, sampled: bool) -> Result<Self> {
        Ok(Self {
            graph: crate::autoencoder::build_autoencoder(spec, sampled)?,
            sampled,
        })
    }

    fn unit_weights(&self, n: usize, d: usize) -> Option<Tensor> {
        self.sampled.then(|| Tensor::full(&[n, d], 1.0))
    }
}

impl Objective for Unsupervised {
    type Params = AutoencoderParams;

    fn loss_and_gradient(
        &mut self,
        params: &AutoencoderParams,
        data: &Dataset,
        rows: &[usize],
        seed: u64,
    ) -> Result<(f64, Vec<Tensor>)> {
        let clean = data.x.select_rows(rows);
        let mut rng = crate::rng::rng(seed);
        let noisy = corrupt_with(&clean, self.graph.spec.corruption, &mut rng);
        let weights = if self.sampled {
            let d = clean.cols();
            let mut w = Tensor::zeros(&[clean.rows(), d]);
            for r in 0..clean.rows() {
                let rec = sample_coordinates_with(
                    &Tensor::vector(clean.row(r).to_vec()),
                    &Tensor::vector(noisy.row(r).to_vec()),
                    &mut rng,
                );
                w.row_mut(r).copy_from_slice(rec.dense(d).data());
            }
            Some(w)
        } else {
            None
        };
        self.graph.loss_and_gradient(params, clean, noisy, weights)
    }

    fn training_loss(&mut self, params: &AutoencoderParams, data: &Dataset) -> Result<f64> {
        let w = self.unit_weights(data.len(), data.features());
        self.graph
            .loss_value(params, data.x.clone(), data.x.clone(), w)
    }

    fn validation_error(&mut self, params: &AutoencoderParams, data: &Dataset) -> Result<f64> {
        self.training_loss(params, data)?;
        self.graph
            .graph
            .value(self.graph.reconstruction_loss)
            .expect("evaluated")
            .item()
    }
}

/// One validation evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub age: u64,
    pub update: u64,
    pub epoch: u64,
    /// Mean mini-batch loss since the previous evaluation.
    pub train_loss: f64,
    pub valid_error: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
    /// Statistics snapshots keyed by age.
    pub stats: Vec<(u64, Vec<LayerStats>)>,
    /// Wall-clock seconds since the start of `fit`, one per record. Kept
    /// apart from the records so that logs are reproducible.
    #[serde(skip)]
    pub elapsed: Vec<f64>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn write_stats(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (age, layers) in &self.stats {
            serde_json::to_writer(&mut f, &serde_json::json!({ "age": age, "layers": layers }))?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| {
                Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string())
            })?);
        }
        Ok(TrainLog {
            records,
            ..TrainLog::default()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxUpdates,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub seed: u64,
    pub reshuffle: bool,
    /// Collect statistics on the training set every this many evaluations.
    pub stats_every: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<P> {
    /// Parameters at T̂ (the initialization if no evaluation ran).
    pub best: P,
    pub final_params: P,
    pub best_update: Option<u64>,
    pub best_validation: f64,
    pub updates: u64,
    pub stop_reason: StopReason,
    /// Effective evaluation interval in examples.
    pub eval_every: u64,
    pub log: TrainLog,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_STRIKES: usize = 3;

/// Mini-batch SGD on `train`, evaluating on `valid` every `eval_every`
/// examples and keeping the parameters with the lowest validation error.
pub fn fit<O: Objective>(
    objective: &mut O,
    init: O::Params,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    stop: &EarlyStopConfig,
    options: &FitOptions,
) -> Result<FitOutcome<O::Params>> {
    let mut config = config.clone();
    if config.train_size == 0 {
        config.train_size = train.len();
    }
    config.validate()?;
    stop.validate()?;
    if train.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if valid.is_empty() {
        return Err(Error::input("validation set is empty"));
    }
    let b = config.batch_size as u64;
    let requested = stop.eval_every.unwrap_or(valid.len() as u64).max(1);
    let eval_updates = requested.div_ceil(b);
    let eval_every = eval_updates * b;

    let started = Instant::now();
    let initial_loss = objective.training_loss(&init, train)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            update: 0,
            loss: initial_loss,
        });
    }
    let mut state = OptimState::new(init.clone(), &config);
    let mut early = EarlyStopState::<O::Params>::new(stop);
    let mut log = TrainLog::default();
    let (mut running, mut running_n) = (0.0, 0u64);
    let mut strikes = 0usize;
    let mut epoch_losses: Vec<f64> = Vec::new();
    let mut stop_reason = StopReason::MaxUpdates;
    let n = train.len();
    let mut epoch = 0u64;

    'outer: while state.t < config.max_updates {
        let order = shuffle_epoch(n, options.seed, epoch, options.reshuffle);
        let (mut epoch_sum, mut epoch_count) = (0.0, 0usize);
        for rows in order.chunks(config.batch_size) {
            if state.t >= config.max_updates {
                break 'outer;
            }
            let seed = crate::rng::derive(options.seed, &[0x4241_5443, state.t]);
            let (loss, grads) = objective.loss_and_gradient(&state.params, train, rows, seed)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    update: state.t,
                    loss,
                });
            }
            state.step(&config, &grads, rows.len())?;
            running += loss;
            running_n += 1;
            epoch_sum += loss * rows.len() as f64;
            epoch_count += rows.len();

            if state.t % eval_updates == 0 {
                let age = state.t * b;
                let train_loss = running / running_n as f64;
                running = 0.0;
                running_n = 0;
                if train_loss > DIVERGENCE_FACTOR * initial_loss.max(f64::MIN_POSITIVE) {
                    strikes += 1;
                    if strikes >= DIVERGENCE_STRIKES {
                        return Err(Error::Diverged {
                            update: state.t,
                            loss: train_loss,
                        });
                    }
                } else {
                    strikes = 0;
                }
                let valid_error = objective.validation_error(&state.params, valid)?;
                log.records.push(EvalRecord {
                    age,
                    update: state.t,
                    epoch,
                    train_loss,
                    valid_error,
                    learning_rate: state.current_learning_rate(&config),
                });
                log.elapsed.push(started.elapsed().as_secs_f64());
                if let Some(k) = options.stats_every {
                    if k > 0 && (log.records.len() - 1) % k == 0 {
                        if let Some(s) = objective.stats(&state.params, train)? {
                            log.stats.push((age, s));
                        }
                    }
                }
                if early.update(state.t, valid_error, age, &state.params) == Decision::Stop {
                    stop_reason = StopReason::Patience;
                    break 'outer;
                }
            }
        }
        if epoch_count == n {
            epoch_losses.push(epoch_sum / n as f64);
            if let Some(a) = config.adaptive_tau {
                if (epoch + 1) % a.check_every as u64 == 0 && adapt_tau(&epoch_losses, a.threshold)
                {
                    state.freeze_tau();
                }
            }
        }
        epoch += 1;
    }

    let best = early.best_params.take().unwrap_or(init);
    Ok(FitOutcome {
        best,
        final_params: state.params,
        best_update: early.best_update,
        best_validation: early.best_validation,
        updates: state.t,
        stop_reason,
        eval_every,
        log,
    })
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Equal-width bins over [min, max]; all mass in bin 0 when min = max.
    pub histogram: Vec<u64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary {
                count: 0,
                mean: 0.0,
                std: 0.0,
                min: 0.0,
                max: 0.0,
                histogram: vec![0; HISTOGRAM_BINS],
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        let width = (max - min) / HISTOGRAM_BINS as f64;
        for &v in values {
            let bin = if width > 0.0 {
                (((v - min) / width) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            };
            histogram[bin] += 1;
        }
        Summary {
            count: values.len(),
            mean,
            std,
            min,
            max,
            histogram,
        }
    }
}

/// Statistics of one layer. For the output layer the activation is the
/// pre-activation fed to the loss head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub activation: Summary,
    pub activation_gradient: Summary,
    pub weight: Summary,
    pub weight_gradient: Summary,
}

/// Runs forward and backward on `data` and summarizes every layer.
pub fn collect_stats(
    graph: &mut MlpGraph,
    params: &ModelParams,
    data: &Dataset,
) -> Result<Vec<LayerStats>> {
    let b = graph.bindings(params, data.x.clone(), data.targets()?.clone());
    graph.graph.forward(&b)?;
    graph.graph.backward()?;
    let g = &graph.graph;
    Ok(graph
        .layers
        .iter()
        .enumerate()
        .map(|(i, nodes)| {
            let act = nodes.activation.unwrap_or(nodes.pre_activation);
            LayerStats {
                layer: i,
                activation: Summary::of(g.value(act).expect("evaluated").data()),
                activation_gradient: Summary::of(g.gradient(act).expect("back-propagated").data()),
                weight: Summary::of(params.layers[i].weight.data()),
                weight_gradient: Summary::of(
                    g.gradient(nodes.weight).expect("back-propagated").data(),
                ),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, initialize, ModelSpec, Nonlinearity};

    #[test]
    fn shuffle_cases() {
        assert_eq!(shuffle_epoch(1, 9, 0, true), vec![0]);
        assert_eq!(
            shuffle_epoch(50, 9, 0, false),
            shuffle_epoch(50, 9, 3, false)
        );
        assert_ne!(
            shuffle_epoch(10_000, 9, 1, true),
            shuffle_epoch(10_000, 9, 2, true)
        );
        let mut p = shuffle_epoch(100, 1, 4, true);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn patience_grows_on_new_minimum() {
        let mut s = EarlyStopState::<()>::new(&EarlyStopConfig::default());
        assert_eq!(s.update(250, 0.5, 8000, &()), Decision::Continue);
        assert_eq!(s.patience, 16_000);
        assert_eq!(s.best_update, Some(250));
    }

    #[test]
    fn increasing_error_stops_after_initial_patience() {
        let mut s = EarlyStopState::<()>::new(&EarlyStopConfig::default());
        let mut stopped_at = None;
        for k in 1..100u64 {
            let age = 1000 * k;
            if s.update(k, k as f64, age, &()) == Decision::Stop {
                stopped_at = Some(age);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11_000));
        assert_eq!(s.best_update, Some(1));
    }

    #[test]
    fn ties_keep_first_minimum() {
        let mut s = EarlyStopState::<u32>::new(&EarlyStopConfig::default());
        for k in 1..5u64 {
            s.update(k, 0.3, k * 100, &(k as u32));
        }
        assert_eq!(s.best_update, Some(1));
        assert_eq!(s.best_params, Some(1));
    }

    #[test]
    fn additive_growth() {
        let config = EarlyStopConfig {
            growth: PatienceGrowth::Additive(5000),
            ..EarlyStopConfig::default()
        };
        let mut s = EarlyStopState::<()>::new(&config);
        s.update(1, 1.0, 9000, &());
        assert_eq!(s.patience, 14_000);
    }

    #[test]
    fn histogram_conserves_count() {
        let values: Vec<f64> = (0..137).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let s = Summary::of(&values);
        assert_eq!(s.histogram.iter().sum::<u64>(), 137);
        assert_eq!(s.histogram.len(), HISTOGRAM_BINS);
        let flat = Summary::of(&[2.0; 5]);
        assert_eq!((flat.std, flat.histogram[0]), (0.0, 5));
    }

    fn toy_regression() -> (Dataset, Dataset) {
        let data = crate::dataio::low_rank_regression(60, 3, 2, 0.05, 1);
        (
            data.subset(&(0..40).collect::<Vec<_>>()),
            data.subset(&(40..60).collect::<Vec<_>>()),
        )
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let (train, valid) = toy_regression();
        let spec = ModelSpec::mlp(3, &[4], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let init = initialize(&spec, 2);
        let mut obj = Supervised::new(
            build_mlp(&spec, &init, LossHead::SquaredError).unwrap(),
            ValidationMetric::Loss,
        );
        let config = TrainConfig {
            max_updates: 0,
            ..TrainConfig::default()
        };
        let out = fit(
            &mut obj,
            init.clone(),
            &train,
            &valid,
            &config,
            &EarlyStopConfig::default(),
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(out.best, init);
        assert_eq!(out.final_params, init);
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn disabled_early_stopping_runs_all_updates() {
        let (train, valid) = toy_regression();
        let spec = ModelSpec::mlp(3, &[4], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let init = initialize(&spec, 2);
        let mut obj = Supervised::new(
            build_mlp(&spec, &init, LossHead::SquaredError).unwrap(),
            ValidationMetric::Loss,
        );
        let config = TrainConfig {
            max_updates: 137,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let stop = EarlyStopConfig {
            patience: 1,
            eval_every: Some(20),
            ..EarlyStopConfig::disabled()
        };
        let out = fit(
            &mut obj,
            init,
            &train,
            &valid,
            &config,
            &stop,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(out.updates, 137);
        assert_eq!(out.stop_reason, StopReason::MaxUpdates);
        assert_eq!(out.eval_every, 24);
        for w in out.log.records.windows(2) {
            assert_eq!(w[1].age - w[0].age, 24);
        }
    }

    #[test]
    fn best_params_match_best_validation() {
        let (train, valid) = toy_regression();
        let spec = ModelSpec::mlp(3, &[6], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let init = initialize(&spec, 4);
        let mut obj = Supervised::new(
            build_mlp(&spec, &init, LossHead::SquaredError).unwrap(),
            ValidationMetric::Loss,
        );
        let config = TrainConfig {
            max_updates: 400,
            batch_size: 4,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let stop = EarlyStopConfig {
            patience: 200,
            ..EarlyStopConfig::default()
        };
        let out = fit(
            &mut obj,
            init,
            &train,
            &valid,
            &config,
            &stop,
            &FitOptions {
                seed: 3,
                ..FitOptions::default()
            },
        )
        .unwrap();
        let recomputed = obj.validation_error(&out.best, &valid).unwrap();
        assert_eq!(recomputed, out.best_validation);
        assert!(out
            .log
            .records
            .iter()
            .all(|r| r.valid_error >= out.best_validation));
        for w in out.log.records.windows(2) {
            assert!(w[1].age > w[0].age);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (train, valid) = toy_regression();
        let spec = ModelSpec::mlp(3, &[5], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let run = || {
            let init = initialize(&spec, 8);
            let mut obj = Supervised::new(
                build_mlp(&spec, &init, LossHead::SquaredError).unwrap(),
                ValidationMetric::Loss,
            );
            let config = TrainConfig {
                max_updates: 100,
                batch_size: 7,
                ..TrainConfig::default()
            };
            fit(
                &mut obj,
                init,
                &train,
                &valid,
                &config,
                &EarlyStopConfig::default(),
                &FitOptions {
                    seed: 5,
                    reshuffle: true,
                    ..FitOptions::default()
                },
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        // linear regression with curvature far above 2/ε
        let x = Tensor::matrix(4, 1, vec![10.0, -10.0, 5.0, -5.0]).unwrap();
        let y = Tensor::matrix(4, 1, vec![1.0, -1.0, 0.5, -0.5]).unwrap();
        let data = Dataset::new(x, Some(y)).unwrap();
        let spec = ModelSpec::mlp(1, &[], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let init = initialize(&spec, 0);
        let mut obj = Supervised::new(
            build_mlp(&spec, &init, LossHead::SquaredError).unwrap(),
            ValidationMetric::Loss,
        );
        let config = TrainConfig {
            learning_rate: 1.0,
            batch_size: 4,
            max_updates: 10_000,
            ..TrainConfig::default()
        };
        let err = fit(
            &mut obj,
            init,
            &data,
            &data,
            &config,
            &EarlyStopConfig::disabled(),
            &FitOptions::default(),
        )
        .unwrap_err();
        assert!(err.is_divergence(), "{err}");
    }

    #[test]
    fn stats_for_zero_tanh_network() {
        let spec =
            ModelSpec::mlp(3, &[4, 4], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let zero = ModelParams {
            layers: spec
                .layers
                .iter()
                .map(|l| crate::nn::LayerParams::zeros(l.fan_in, l.fan_out))
                .collect(),
        };
        let data = crate::dataio::low_rank_regression(10, 3, 2, 0.0, 2);
        let mut g = build_mlp(&spec, &zero, LossHead::SquaredError).unwrap();
        let stats = collect_stats(&mut g, &zero, &data).unwrap();
        assert_eq!(stats.len(), 3);
        for s in &stats {
            assert_eq!((s.activation.mean, s.activation.std), (0.0, 0.0));
            assert_eq!(
                s.activation.histogram.iter().sum::<u64>() as usize,
                s.activation.count
            );
        }
    }

    #[test]
    fn autoencoder_training_reduces_reconstruction() {
        use crate::autoencoder::{initialize_autoencoder, AutoencoderSpec, Corruption};
        let mut rng = crate::rng::rng(3);
        let x: Vec<f64> = (0..60 * 6)
            .map(|_| rand::Rng::random::<f64>(&mut rng))
            .collect();
        let data = Dataset::unlabeled(Tensor::matrix(60, 6, x).unwrap()).unwrap();
        let spec = AutoencoderSpec {
            corruption: Corruption::Masking(0.25),
            ..AutoencoderSpec::new(6, 4)
        };
        let init = initialize_autoencoder(&spec, 1);
        let mut obj = Unsupervised::new(&spec, false).unwrap();
        let before = obj.validation_error(&init, &data).unwrap();
        let config = TrainConfig {
            learning_rate: 0.1,
            batch_size: 10,
            max_updates: 600,
            ..TrainConfig::default()
        };
        let out = fit(
            &mut obj,
            init,
            &data,
            &data,
            &config,
            &EarlyStopConfig::disabled(),
            &FitOptions::default(),
        )
        .unwrap();
        assert!(out.best_validation < before);
    }
}
