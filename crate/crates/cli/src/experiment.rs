//! Data preparation and single training trials.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use gradstack::autoencoder::AutoencoderSpec;
use gradstack::dataio::{self, CsvOptions, Dataset, Preprocessor};
use gradstack::nn::{self, build_mlp, initialize, ModelParams, ModelSpec};
use gradstack::optim::TrainConfig;
use gradstack::pretrain::{fine_tune, pretrain_stack, Encoder, FineTuneSettings, StackSpec};
use gradstack::rng::derive;
use gradstack::train::{fit, FitOptions, Supervised, TrainLog};
use gradstack::Tensor;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, Result};

const DATA_TAG: u64 = 0x4441_5441;
const SPLIT_TAG: u64 = 0x5350_4C54;
const INIT_TAG: u64 = 0x494E_4954;
const FIT_TAG: u64 = 0x4649_5430;
const PRETRAIN_TAG: u64 = 0x5052_4554;

#[derive(Clone, Debug)]
pub struct Prepared {
    /// Split and preprocessed.
    pub data: Dataset,
    pub preprocessors: Vec<Preprocessor>,
}

impl Prepared {
    pub fn train(&self) -> Dataset {
        self.data.train()
    }

    pub fn valid(&self) -> Dataset {
        self.data.valid()
    }
}

/// Loads or generates the dataset, splits it and fits preprocessors on the
/// training split.
pub fn prepare_data(config: &ExperimentConfig) -> Result<Prepared> {
    let seed = derive(config.seed, &[DATA_TAG]);
    let stage = CliError::stage;
    let mut ds = match &config.data.source {
        DataSource::TwoMoons { n, noise } => dataio::two_moons(*n, *noise, seed),
        DataSource::LowRank {
            n,
            features,
            rank,
            noise,
        } => dataio::low_rank_regression(*n, *features, *rank, *noise, seed),
        DataSource::Csv {
            path,
            header,
            targets,
        } => dataio::load_csv(
            path,
            CsvOptions {
                header: *header,
                target_columns: *targets,
            },
        )
        .map_err(stage("load data"))?,
        DataSource::Idx { images, labels } => {
            let x = dataio::load_idx(images).map_err(stage("load data"))?;
            let y = match labels {
                Some(p) => Some(dataio::load_idx(p).map_err(stage("load labels"))?),
                None => None,
            };
            Dataset::new(x, y).map_err(stage("load data"))?
        }
    };
    if config.model.head == nn::LossHead::Nll {
        if let Some(y) = &ds.y {
            if y.cols() == 1 {
                ds = Dataset {
                    y: Some(labels_to_one_hot(y)?),
                    ..ds
                };
            }
        }
    }
    let mut ds = dataio::split(&ds, config.data.split, derive(config.seed, &[SPLIT_TAG]))
        .map_err(stage("split data"))?;
    let mut preprocessors = Vec::new();
    for &kind in &config.data.preprocess {
        let (next, p) = dataio::fit_apply(kind, &ds).map_err(stage("preprocess"))?;
        ds = next;
        preprocessors.push(p);
    }
    if ds.train().is_empty() || ds.valid().is_empty() {
        return Err(CliError::config(format!(
            "data.split leaves {} training and {} validation examples; both must be non-empty",
            ds.train().len(),
            ds.valid().len()
        )));
    }
    Ok(Prepared {
        data: ds,
        preprocessors,
    })
}

fn labels_to_one_hot(y: &Tensor) -> Result<Tensor> {
    let mut labels = Vec::with_capacity(y.rows());
    for (i, &v) in y.data().iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(CliError::config(format!(
                "model.head = nll needs integer class labels; row {} has target {v}",
                i + 1
            )));
        }
        labels.push(v as usize);
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Ok(dataio::one_hot(&labels, classes)?)
}

/// An experiment's output directory.
#[derive(Debug)]
pub struct Artifacts {
    pub root: PathBuf,
    timings: Mutex<()>,
}

impl Artifacts {
    pub fn create(root: &Path) -> Result<Artifacts> {
        for sub in ["logs", "checkpoints"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Artifacts {
            root: root.to_owned(),
            timings: Mutex::new(()),
        })
    }

    pub fn store_path(&self) -> PathBuf {
        self.root.join("trials.jsonl")
    }

    pub fn log_path(&self, trial: u64, part: &str) -> PathBuf {
        self.root
            .join("logs")
            .join(format!("trial-{trial:05}{part}.jsonl"))
    }

    pub fn write_log(&self, trial: u64, part: &str, log: &TrainLog) -> Result<()> {
        log.write_jsonl(&self.log_path(trial, part))?;
        Ok(())
    }

    pub fn write_checkpoint(&self, name: &str, params: &ModelParams, seed: u64) -> Result<()> {
        let dir = self.root.join("checkpoints");
        let f = std::fs::File::create(dir.join(format!("{name}.bin")))?;
        nn::write_params(params, std::io::BufWriter::new(f))?;
        nn::write_sidecar(params, seed, &dir.join(format!("{name}.txt")))?;
        Ok(())
    }

    /// Wall times live here, apart from the reproducible artifacts.
    pub fn record_time(&self, trial: u64, stage: &str, seconds: f64) -> Result<()> {
        let _guard = self.timings.lock().expect("timings lock");
        let path = self.root.join("timings.tsv");
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if fresh {
            writeln!(f, "trial\tstage\tseconds")?;
        }
        writeln!(f, "{trial}\t{stage}\t{seconds:.6}")?;
        Ok(())
    }
}

pub fn model_spec(config: &ExperimentConfig, inputs: usize, outputs: usize) -> Result<ModelSpec> {
    let m = &config.model;
    let mut spec = ModelSpec::mlp(inputs, &m.hidden, m.nonlinearity, outputs, m.head)?;
    let last = spec.layers.len() - 1;
    for l in &mut spec.layers[..last] {
        l.init = m.init;
        l.init_scale = m.init_scale;
    }
    Ok(spec)
}

fn with_train_size(c: &TrainConfig, n: usize) -> TrainConfig {
    TrainConfig {
        train_size: n,
        ..c.clone()
    }
}

fn targets_width(ds: &Dataset) -> Result<usize> {
    Ok(ds
        .targets()
        .map_err(|_| CliError::config("supervised training needs labeled data (data.targets)"))?
        .cols())
}

/// Trains one network per `config` and returns its best validation error.
pub fn single_fit(
    config: &ExperimentConfig,
    data: &Prepared,
    trial: u64,
    seed: u64,
    out: &Artifacts,
) -> Result<f64> {
    let started = Instant::now();
    let (train, valid) = (data.train(), data.valid());
    let spec = model_spec(config, train.features(), targets_width(&train)?)?;
    let init = initialize(&spec, derive(seed, &[INIT_TAG]));
    let mut objective = Supervised::new(
        build_mlp(&spec, &init, config.model.head)?,
        config.model.metric,
    );
    let options = FitOptions {
        seed: derive(seed, &[FIT_TAG]),
        reshuffle: true,
        stats_every: None,
    };
    let outcome = fit(
        &mut objective,
        init,
        &train,
        &valid,
        &with_train_size(&config.optim, train.len()),
        &config.stop,
        &options,
    )
    .map_err(CliError::stage("fit"))?;
    out.write_log(trial, "", &outcome.log)?;
    out.write_checkpoint(&format!("trial-{trial:05}"), &outcome.best, seed)?;
    out.record_time(trial, "fit", started.elapsed().as_secs_f64())?;
    Ok(outcome.best_validation)
}

pub fn stack_spec(config: &ExperimentConfig, inputs: usize, outputs: usize) -> StackSpec {
    let mut levels = Vec::with_capacity(config.pretrain.code_sizes.len());
    let mut fan_in = inputs;
    for &code_size in &config.pretrain.code_sizes {
        levels.push(AutoencoderSpec {
            fan_in,
            code_size,
            ..config.pretrain.template.clone()
        });
        fan_in = code_size;
    }
    StackSpec {
        levels,
        head: config.model.head,
        outputs,
    }
}

/// Greedy pretraining of every level, then supervised fine-tuning.
pub fn pretrain_finetune(
    config: &ExperimentConfig,
    data: &Prepared,
    trial: u64,
    seed: u64,
    out: &Artifacts,
) -> Result<f64> {
    let started = Instant::now();
    let (train, valid) = (data.train(), data.valid());
    let spec = stack_spec(config, train.features(), targets_width(&train)?);
    let pre = with_train_size(&config.pretrain.train, train.len());
    let levels = pretrain_stack(
        &spec,
        &train,
        &valid,
        &[pre],
        &config.stop,
        derive(seed, &[PRETRAIN_TAG]),
    )
    .map_err(CliError::stage("pretrain"))?;
    for (i, l) in levels.iter().enumerate() {
        out.write_log(trial, &format!("-level{}", i + 1), &l.log)?;
    }
    out.record_time(trial, "pretrain", started.elapsed().as_secs_f64())?;
    let encoders: Vec<Encoder> = levels.into_iter().map(|l| l.encoder).collect();
    let tune = with_train_size(&config.optim, train.len());
    let settings = FineTuneSettings {
        head: config.model.head,
        config: &tune,
        stop: &config.stop,
        metric: config.model.metric,
        seed: derive(seed, &[FIT_TAG]),
    };
    let (_, outcome) =
        fine_tune(&encoders, &train, &valid, settings).map_err(CliError::stage("fine-tune"))?;
    out.write_log(trial, "", &outcome.log)?;
    out.write_checkpoint(&format!("trial-{trial:05}"), &outcome.best, seed)?;
    out.record_time(trial, "fine-tune", started.elapsed().as_secs_f64())?;
    Ok(outcome.best_validation)
}

/// Runs whichever trial kind `config.mode` names.
pub fn run_trial(
    config: &ExperimentConfig,
    data: &Prepared,
    trial: u64,
    seed: u64,
    out: &Artifacts,
) -> Result<f64> {
    match config.mode {
        crate::config::Mode::PretrainFinetune => pretrain_finetune(config, data, trial, seed, out),
        _ => single_fit(config, data, trial, seed, out),
    }
}
