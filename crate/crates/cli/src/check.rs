//! The `gradcheck` verb.

use std::fmt::Write as _;

use rand::Rng;

use gradstack::autoencoder::{build_autoencoder, corrupt, initialize_autoencoder, AutoencoderSpec};
use gradstack::dataio::Dataset;
use gradstack::flowgraph::{check_gradient, CheckOptions, GradientCheckReport};
use gradstack::nn::{build_mlp, initialize, Parameters};
use gradstack::rng::{derive, rng};
use gradstack::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiment::{model_spec, prepare_data, stack_spec};

const JITTER_TAG: u64 = 0x4A49_5454;

/// One checked graph at the configured step.
#[derive(Clone, Debug)]
pub struct CheckedModel {
    pub name: String,
    pub report: GradientCheckReport,
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub models: Vec<CheckedModel>,
    /// `(ε, max relative error)` over every checked graph.
    pub sweep: Vec<(f64, f64)>,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.models.iter().all(|m| m.report.passed())
    }

    pub fn sweep_table(&self) -> String {
        let mut out = String::from("epsilon\tmax_relative_error\n");
        for (e, r) in &self.sweep {
            let _ = writeln!(out, "{e:e}\t{r:e}");
        }
        out
    }
}

/// Adds Uniform(−a, a) noise to every block; zero-initialized output layers
/// would otherwise hide every lower-layer gradient.
fn jitter<P: Parameters>(params: &mut P, amount: f64, seed: u64) {
    if amount <= 0.0 {
        return;
    }
    let mut r = rng(seed);
    for block in params.blocks_mut() {
        for v in block.data_mut() {
            *v += r.random_range(-amount..=amount);
        }
    }
}

type Check = Box<dyn FnMut(&CheckOptions) -> gradstack::Result<GradientCheckReport>>;

fn head_rows(data: &Dataset, rows: usize) -> Dataset {
    let n = rows.min(data.len());
    data.subset(&(0..n).collect::<Vec<_>>())
}

/// Checks the configured network (and the first auto-encoder level when
/// pretraining is configured) at its jittered initialization.
pub fn gradcheck(config: &ExperimentConfig) -> Result<GradcheckOutcome> {
    let prepared = prepare_data(config)?;
    let rows = head_rows(&prepared.train(), config.gradcheck.rows);
    let g = &config.gradcheck;
    let seed = config.seed;
    let mut cases: Vec<(String, Check)> = Vec::new();

    if let Ok(y) = rows.targets() {
        let spec = model_spec(config, rows.features(), y.cols())?;
        let mut params = initialize(&spec, seed);
        jitter(&mut params, g.jitter, derive(seed, &[JITTER_TAG]));
        let mut mlp = build_mlp(&spec, &params, spec.head)?;
        if g.sign_flip {
            let w = mlp.layers[0].weight;
            mlp.graph.inject_sign_flip(w);
        }
        let bindings = mlp.bindings(&params, rows.x.clone(), y.clone());
        let name = format!(
            "mlp ({} hidden layers, {})",
            config.model.hidden.len(),
            spec.head
        );
        cases.push((
            name,
            Box::new(move |o: &CheckOptions| check_gradient(&mut mlp.graph, &bindings, o)),
        ));
    }
    if !config.pretrain.code_sizes.is_empty() {
        let outputs = rows.targets().map_or(1, Tensor::cols);
        let stack = stack_spec(config, rows.features(), outputs);
        let level: AutoencoderSpec = stack.levels[0].clone();
        level.validate()?;
        let mut params = initialize_autoencoder(&level, seed);
        jitter(&mut params, g.jitter, derive(seed, &[JITTER_TAG, 1]));
        let mut ae = build_autoencoder(&level, false)?;
        if g.sign_flip {
            let w = ae.encoder_weight;
            ae.graph.inject_sign_flip(w);
        }
        let x = rows.x.clone();
        let corrupted = corrupt(&x, level.corruption, derive(seed, &[JITTER_TAG, 2]));
        let bindings = ae.bindings(&params, x, corrupted, None)?;
        let name = format!(
            "auto-encoder level 1 ({}→{})",
            level.fan_in, level.code_size
        );
        cases.push((
            name,
            Box::new(move |o: &CheckOptions| check_gradient(&mut ae.graph, &bindings, o)),
        ));
    }
    if cases.is_empty() {
        return Err(CliError::config(
            "gradcheck needs labeled data or pretrain.code_sizes",
        ));
    }

    let options = CheckOptions {
        step: g.epsilon,
        tolerance: g.tolerance,
        ..CheckOptions::default()
    };
    let mut models = Vec::new();
    for (name, case) in &mut cases {
        models.push(CheckedModel {
            name: name.clone(),
            report: case(&options)?,
        });
    }
    let mut sweep = Vec::new();
    for &step in &g.sweep {
        let o = CheckOptions {
            step,
            tolerance: g.tolerance,
            ..CheckOptions::default()
        };
        let mut worst = 0.0f64;
        for (_, case) in &mut cases {
            worst = worst.max(case(&o)?.max_relative_error());
        }
        sweep.push((step, worst));
    }
    Ok(GradcheckOutcome { models, sweep })
}

/// Writes the per-coordinate tables and the sweep under `config.out`.
pub fn write_outcome(config: &ExperimentConfig, outcome: &GradcheckOutcome) -> Result<()> {
    std::fs::create_dir_all(&config.out)?;
    let mut text = String::new();
    for m in &outcome.models {
        let _ = writeln!(text, "# {}", m.name);
        text.push_str(&m.report.to_table());
    }
    std::fs::write(config.out.join("gradcheck.txt"), text)?;
    if !outcome.sweep.is_empty() {
        std::fs::write(
            config.out.join("gradcheck_sweep.tsv"),
            outcome.sweep_table(),
        )?;
    }
    Ok(())
}
