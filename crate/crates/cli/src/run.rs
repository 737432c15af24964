//! The `run` and `retry` verbs.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;

use serde::Serialize;

use gradstack::dataio::{Dataset, Preprocessor};
use gradstack::hyperopt::{
    self, config_string, greedy_layerwise_search, run_search, Config, SearchSource,
    StackedAutoencoderProblem, Trial, TrialStatus, TrialStore, Value,
};
use gradstack::optim::TrainConfig;

use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, Result};
use crate::experiment::{prepare_data, run_trial, Artifacts, Prepared};

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    mode: &'static str,
    seed: u64,
    config_hash: String,
    config: BTreeMap<&'a str, &'a str>,
    workers: usize,
    train_examples: usize,
    valid_examples: usize,
    test_examples: usize,
    preprocessors: &'a [Preprocessor],
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub trials: Vec<Trial>,
    pub best: Option<Trial>,
}

fn write_manifest(config: &ExperimentConfig, data: &Prepared, out: &Artifacts) -> Result<()> {
    let splits = data.data.splits.as_ref();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        mode: config.mode.name(),
        seed: config.seed,
        config_hash: config.raw.hash(),
        config: config.raw.semantic().collect(),
        workers: config.workers,
        train_examples: splits.map_or(data.data.len(), |s| s.train.len()),
        valid_examples: splits.map_or(0, |s| s.valid.len()),
        test_examples: splits.map_or(0, |s| s.test.len()),
        preprocessors: &data.preprocessors,
    };
    let mut f = std::fs::File::create(out.root.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(gradstack::Error::from)?;
    writeln!(f)?;
    // the exact config, so that the directory alone reproduces the run
    std::fs::write(out.root.join("config.txt"), config.raw.canonical())?;
    Ok(())
}

fn raw_as_config(config: &ExperimentConfig) -> Config {
    config
        .raw
        .semantic()
        .map(|(k, v)| (k.to_owned(), Value::parse(v)))
        .collect()
}

fn best_of(trials: &[Trial]) -> Option<Trial> {
    trials
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .min_by(|a, b| {
            a.objective
                .partial_cmp(&b.objective)
                .expect("finite")
                .then(a.id.cmp(&b.id))
        })
        .cloned()
}

/// Executes the configured mode and writes every artifact under `config.out`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    let out = Artifacts::create(&config.out)?;
    let data = prepare_data(config)?;
    write_manifest(config, &data, &out)?;
    let store = TrialStore::open(&out.store_path())?;
    // failure details kept for the exit status of single-trial modes
    let failures: Mutex<BTreeMap<u64, CliError>> = Mutex::default();
    let data_dims = config
        .search
        .space
        .dimensions
        .iter()
        .any(|d| d.name.starts_with("data."));

    let evaluate = |id: u64,
                    overrides: &Config,
                    seed: u64,
                    trial_config: &ExperimentConfig|
     -> gradstack::Result<f64> {
        let result = if data_dims && !overrides.is_empty() {
            prepare_data(trial_config).and_then(|d| run_trial(trial_config, &d, id, seed, &out))
        } else {
            run_trial(trial_config, &data, id, seed, &out)
        };
        result.map_err(|e| {
            let msg = e.to_string();
            failures.lock().expect("failures").insert(id, e);
            gradstack::Error::InvalidInput(msg)
        })
    };

    let trials = match config.mode {
        Mode::SingleFit | Mode::PretrainFinetune => {
            let source = SearchSource::Grid(vec![raw_as_config(config)]);
            let trials = run_search(&source, 1, 1, config.seed, &store, |id, _, seed| {
                evaluate(id, &Config::new(), seed, config)
            })?;
            if let Some(e) = failures.lock().expect("failures").remove(&0) {
                return Err(e);
            }
            trials
        }
        Mode::Grid | Mode::Random => {
            let points;
            let source = if config.mode == Mode::Grid {
                points = hyperopt::grid(&config.search.space, &config.search.grid_counts)?;
                SearchSource::Grid(points)
            } else {
                SearchSource::Random(&config.search.space)
            };
            let budget = match (&source, config.search.budget) {
                (_, Some(b)) => b,
                (SearchSource::Grid(p), None) => p.len(),
                (SearchSource::Random(_), None) => unreachable!("validated"),
            };
            run_search(
                &source,
                budget,
                config.workers,
                config.seed,
                &store,
                |id, overrides, seed| {
                    let trial_config = config
                        .trial_config(overrides)
                        .map_err(|e| gradstack::Error::InvalidInput(e.to_string()))?;
                    evaluate(id, overrides, seed, &trial_config)
                },
            )?
        }
        Mode::GreedyLayerwise => run_greedy(config, &data, &out, &store)?,
    };
    write_summary(&trials, &out)?;
    Ok(RunSummary {
        best: best_of(&trials),
        trials,
    })
}

/// The stacked auto-encoder problem a greedy-layerwise run searches.
pub fn layerwise_problem<'a>(
    config: &ExperimentConfig,
    train: &'a Dataset,
    valid: &'a Dataset,
) -> StackedAutoencoderProblem<'a> {
    let n = train.len();
    let sized = |c: &TrainConfig| TrainConfig {
        train_size: n,
        ..c.clone()
    };
    StackedAutoencoderProblem {
        train,
        valid,
        level_template: config.pretrain.template.clone(),
        pretrain_config: sized(&config.pretrain.train),
        pretrain_stop: config.stop,
        probe_config: sized(&config.probe.train),
        probe_stop: config.stop,
        finetune_config: sized(&config.optim),
        finetune_stop: config.stop,
        head: config.model.head,
    }
}

fn run_greedy(
    config: &ExperimentConfig,
    data: &Prepared,
    out: &Artifacts,
    store: &TrialStore,
) -> Result<Vec<Trial>> {
    if !store.load()?.is_empty() {
        return Err(CliError::config(format!(
            "{} already holds trials; greedy-layerwise runs start from an empty store (choose another --out)",
            store.path().display()
        )));
    }
    let (train, valid) = (data.train(), data.valid());
    let problem = layerwise_problem(config, &train, &valid);
    let s = &config.search;
    let started = std::time::Instant::now();
    let outcome = greedy_layerwise_search(
        &problem,
        s.k,
        s.levels,
        &s.level_settings,
        &s.finetune_settings,
        config.workers,
        config.seed,
    )?;
    out.record_time(0, "greedy-layerwise", started.elapsed().as_secs_f64())?;
    for t in &outcome.trials {
        store.append(t)?;
    }
    let mut table = String::from("rank\ttrial\tscore\tsettings\n");
    for (rank, e) in outcome.best.iter().enumerate() {
        let flat = hyperopt::flatten_path(&e.settings, e.fine_tune.as_ref());
        table.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            rank + 1,
            e.trial,
            e.score,
            config_string(&flat)
        ));
    }
    std::fs::write(out.root.join("greedy_best.tsv"), table)?;
    if let Some(best) = outcome.best.first() {
        out.write_checkpoint(
            "best",
            &best.model.1,
            outcome.trials[best.trial as usize].seed,
        )?;
    }
    Ok(outcome.trials)
}

fn write_summary(trials: &[Trial], out: &Artifacts) -> Result<()> {
    let failed = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Failed)
        .count();
    let mut text = format!("trials\t{}\nfailed\t{failed}\n", trials.len());
    if let Some(b) = best_of(trials) {
        text.push_str(&format!(
            "best_trial\t{}\nbest_objective\t{}\nbest_config\t{}\n",
            b.id,
            b.objective.expect("ok"),
            config_string(&b.config)
        ));
    }
    std::fs::write(out.root.join("summary.tsv"), text)?;
    Ok(())
}

/// One attempt of [`retry`].
#[derive(Clone, Debug, PartialEq)]
pub struct Attempt {
    pub learning_rate: f64,
    pub diverged: bool,
    pub objective: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RetryOutcome {
    pub attempts: Vec<Attempt>,
    pub learning_rate: f64,
    pub objective: f64,
}

/// Single fits with the learning rate divided by `retry.factor` after each
/// divergence. Attempt `k` writes to `OUT/attempt-k`.
pub fn retry(config: &ExperimentConfig) -> Result<RetryOutcome> {
    if config.mode != Mode::SingleFit {
        return Err(CliError::config(format!(
            "retry needs mode = single-fit, not {}",
            config.mode.name()
        )));
    }
    std::fs::create_dir_all(&config.out)?;
    let mut attempts = Vec::new();
    let mut rate = config.optim.learning_rate;
    let mut history = String::from("attempt\tlearning_rate\tstatus\tobjective\n");
    let result = loop {
        let k = attempts.len() + 1;
        let mut c = config.clone();
        c.optim.learning_rate = rate;
        c.out = config.out.join(format!("attempt-{k}"));
        c.raw.set("optim.learning_rate", format!("{rate:e}"));
        c.raw.set("out", c.out.display().to_string());
        match run(&c) {
            Ok(summary) => {
                let objective = summary
                    .best
                    .and_then(|t| t.objective)
                    .expect("single fit succeeded");
                history.push_str(&format!("{k}\t{rate:e}\tok\t{objective}\n"));
                attempts.push(Attempt {
                    learning_rate: rate,
                    diverged: false,
                    objective: Some(objective),
                });
                break Ok(objective);
            }
            Err(e) if e.exit_code() == 3 => {
                log::warn!("attempt {k} diverged at learning rate {rate:e}: {e}");
                history.push_str(&format!("{k}\t{rate:e}\tdiverged\t\n"));
                attempts.push(Attempt {
                    learning_rate: rate,
                    diverged: true,
                    objective: None,
                });
                if attempts.len() >= config.retry.max_attempts {
                    break Err(CliError::RetriesExhausted {
                        attempts: attempts.len(),
                        last_rate: rate,
                    });
                }
                rate /= config.retry.factor;
            }
            Err(e) => break Err(e),
        }
    };
    std::fs::write(config.out.join("retry.tsv"), history)?;
    let objective = result?;
    Ok(RetryOutcome {
        learning_rate: rate,
        objective,
        attempts,
    })
}
