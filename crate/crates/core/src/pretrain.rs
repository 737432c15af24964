//! Greedy layer-wise pretraining of stacked auto-encoders and supervised
//! fine-tuning of the resulting network.

use serde::{Deserialize, Serialize};

use crate::autoencoder::{initialize_autoencoder, AutoencoderParams, AutoencoderSpec};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::nn::mlp::apply_rows;
use crate::nn::{
    build_mlp, LayerParams, LayerSpec, LossHead, ModelParams, ModelSpec, Nonlinearity,
};
use crate::optim::TrainConfig;
use crate::tensor::Tensor;
use crate::train::{
    fit, EarlyStopConfig, FitOptions, FitOutcome, Supervised, TrainLog, Unsupervised,
    ValidationMetric,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub levels: Vec<AutoencoderSpec>,
    pub head: LossHead,
    pub outputs: usize,
}

impl StackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::spec("a stack needs at least one level"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            l.validate().map_err(|e| Error::Level {
                level: i + 1,
                source: Box::new(e),
            })?;
            if i > 0 && self.levels[i - 1].code_size != l.fan_in {
                return Err(Error::spec(format!(
                    "level {} fan-in {} does not match level {} code size {}",
                    i + 1,
                    l.fan_in,
                    i,
                    self.levels[i - 1].code_size
                )));
            }
        }
        if self.outputs == 0 {
            return Err(Error::spec("the supervised head needs at least one output"));
        }
        Ok(())
    }
}

/// Encoder half of a trained auto-encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub nonlinearity: Nonlinearity,
    /// Shape (code, fan-in).
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Encoder {
    pub fn from_autoencoder(spec: &AutoencoderSpec, params: &AutoencoderParams) -> Self {
        Self {
            nonlinearity: spec.encoder,
            weight: params.encoder_weight.clone(),
            bias: params.encoder_bias.clone(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn code_size(&self) -> usize {
        self.weight.rows()
    }
}

/// Features after the given stack of frozen encoders.
pub fn encode_through(encoders: &[Encoder], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for e in encoders {
        h = apply_rows(e.nonlinearity, &h, &e.weight, &e.bias)?;
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct LevelResult {
    pub encoder: Encoder,
    pub params: AutoencoderParams,
    pub best_validation: f64,
    pub log: TrainLog,
}

/// Trains one auto-encoder on the codes produced by `below`, leaving the
/// lower encoders untouched.
pub fn pretrain_level(
    spec: &AutoencoderSpec,
    below: &[Encoder],
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    stop: &EarlyStopConfig,
    seed: u64,
) -> Result<LevelResult> {
    let tr = Dataset::unlabeled(encode_through(below, &train.x)?)?;
    let va = Dataset::unlabeled(encode_through(below, &valid.x)?)?;
    if tr.features() != spec.fan_in {
        return Err(Error::Shape(format!(
            "level input has {} features, auto-encoder expects {}",
            tr.features(),
            spec.fan_in
        )));
    }
    let init = initialize_autoencoder(spec, crate::rng::derive(seed, &[1]));
    let mut objective = Unsupervised::new(spec, false)?;
    let options = FitOptions {
        seed: crate::rng::derive(seed, &[2]),
        reshuffle: true,
        stats_every: None,
    };
    let out = fit(&mut objective, init, &tr, &va, config, stop, &options)?;
    Ok(LevelResult {
        encoder: Encoder::from_autoencoder(spec, &out.best),
        params: out.best,
        best_validation: out.best_validation,
        log: out.log,
    })
}

/// Greedy layer-wise pretraining; `configs` holds one entry per level or a
/// single entry used for every level.
pub fn pretrain_stack(
    spec: &StackSpec,
    train: &Dataset,
    valid: &Dataset,
    configs: &[TrainConfig],
    stop: &EarlyStopConfig,
    seed: u64,
) -> Result<Vec<LevelResult>> {
    spec.validate()?;
    if configs.is_empty() || (configs.len() != 1 && configs.len() != spec.levels.len()) {
        return Err(Error::spec(format!(
            "need 1 or {} training configs, got {}",
            spec.levels.len(),
            configs.len()
        )));
    }
    let mut levels: Vec<LevelResult> = Vec::with_capacity(spec.levels.len());
    for (i, l) in spec.levels.iter().enumerate() {
        let config = &configs[i.min(configs.len() - 1)];
        let below: Vec<Encoder> = levels.iter().map(|r| r.encoder.clone()).collect();
        let r = pretrain_level(
            l,
            &below,
            train,
            valid,
            config,
            stop,
            crate::rng::derive(seed, &[i as u64]),
        )
        .map_err(|e| Error::Level {
            level: i + 1,
            source: Box::new(e),
        })?;
        levels.push(r);
    }
    Ok(levels)
}

/// Network made of the stacked encoders plus a zero-initialized output layer.
pub fn stacked_model(
    encoders: &[Encoder],
    head: LossHead,
    outputs: usize,
) -> Result<(ModelSpec, ModelParams)> {
    if encoders.is_empty() {
        return Err(Error::spec("no encoders to stack"));
    }
    let mut layers = Vec::with_capacity(encoders.len() + 1);
    let mut params = Vec::with_capacity(encoders.len() + 1);
    for e in encoders {
        layers.push(LayerSpec::new(e.fan_in(), e.code_size(), e.nonlinearity));
        params.push(LayerParams {
            weight: e.weight.clone(),
            bias: e.bias.clone(),
        });
    }
    let last = encoders.last().expect("non-empty").code_size();
    layers.push(LayerSpec::new(last, outputs, head.output_nonlinearity()));
    params.push(LayerParams::zeros(last, outputs));
    Ok((
        ModelSpec::new(layers, head)?,
        ModelParams { layers: params },
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct FineTuneSettings<'a> {
    pub head: LossHead,
    pub config: &'a TrainConfig,
    pub stop: &'a EarlyStopConfig,
    pub metric: ValidationMetric,
    pub seed: u64,
}

/// End-to-end supervised training of the stacked network.
pub fn fine_tune(
    encoders: &[Encoder],
    train: &Dataset,
    valid: &Dataset,
    settings: FineTuneSettings<'_>,
) -> Result<(ModelSpec, FitOutcome<ModelParams>)> {
    let outputs = train.targets()?.cols();
    let (spec, init) = stacked_model(encoders, settings.head, outputs)?;
    if train.features() != spec.inputs() {
        return Err(Error::Shape(format!(
            "data has {} features, first encoder expects {}",
            train.features(),
            spec.inputs()
        )));
    }
    let mut objective = Supervised::new(build_mlp(&spec, &init, settings.head)?, settings.metric);
    let options = FitOptions {
        seed: settings.seed,
        reshuffle: true,
        stats_every: None,
    };
    let out = fit(
        &mut objective,
        init,
        train,
        valid,
        settings.config,
        settings.stop,
        &options,
    )?;
    Ok((spec, out))
}

/// Fits only a linear softmax (or logistic, for one target column) head on
/// fixed features.
pub fn train_linear_head(
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    stop: &EarlyStopConfig,
    seed: u64,
) -> Result<(ModelSpec, FitOutcome<ModelParams>)> {
    let outputs = train.targets()?.cols();
    let head = if outputs == 1 {
        LossHead::CrossEntropy
    } else {
        LossHead::Nll
    };
    let spec = ModelSpec::mlp(train.features(), &[], Nonlinearity::Linear, outputs, head)?;
    let init = ModelParams {
        layers: vec![LayerParams::zeros(train.features(), outputs)],
    };
    let mut objective = Supervised::new(
        build_mlp(&spec, &init, head)?,
        ValidationMetric::ClassificationError,
    );
    let options = FitOptions {
        seed,
        reshuffle: true,
        stats_every: None,
    };
    let out = fit(&mut objective, init, train, valid, config, stop, &options)?;
    Ok((spec, out))
}

/// Validation classification error of a linear head trained on the frozen
/// codes of `encoders` (raw inputs when empty).
pub fn probe_with_linear_head(
    encoders: &[Encoder],
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    stop: &EarlyStopConfig,
    seed: u64,
) -> Result<f64> {
    let tr = train.with_features(encode_through(encoders, &train.x)?)?;
    let va = valid.with_features(encode_through(encoders, &valid.x)?)?;
    let (_, out) = train_linear_head(&tr, &va, config, stop, seed)?;
    Ok(out.best_validation)
}
