//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The process exits non-zero only when `GRADSTACK_ACCEPTANCE_STRICT` is set
//! and some criterion failed; otherwise failures are reported and the run
//! succeeds so that known failures stay visible without breaking the build.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use gradstack::autoencoder::{
    coordinate_losses, corrupt, dae_loss, plain_loss, reconstruct, reconstruction_jacobian,
    sample_coordinates, sampled_reconstruction_loss, AutoencoderParams, AutoencoderSpec,
    Corruption, ReconstructionLoss,
};
use gradstack::dataio::{two_moons, Dataset};
use gradstack::flowgraph::{check_gradient, Bindings, CheckOptions, CheckStatus, Graph};
use gradstack::hyperopt::{
    best_in_subset_curve, config_string, flatten_path, greedy_layerwise_search, grid, path_seed,
    sample, Config, Dimension, DimensionSpec, LayerwiseProblem, ParamSpace,
};
use gradstack::nn::{
    build_mlp, initialize, InitScheme, LayerParams, LayerSpec, LossHead, ModelParams, ModelSpec,
    Nonlinearity, Parameters,
};
use gradstack::optim::{batch_regularization, regularizer_gradient, OptimState, TrainConfig};
use gradstack::rng::{derive, rng};
use gradstack::train::{
    fit, shuffle_epoch, Decision, EarlyStopConfig, EarlyStopState, FitOptions, Objective,
    PatienceGrowth, StopReason, Supervised, ValidationMetric,
};
use gradstack::Tensor;
use gradstack_cli::config::{ExperimentConfig, RawConfig};
use gradstack_cli::experiment::prepare_data;
use gradstack_cli::run::{layerwise_problem, run};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Outcome = Result<Verdict, Box<dyn std::error::Error>>;

fn uniform_tensor(shape: &[usize], r: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape")
}

// 1. gradient correctness over loss head × non-linearity × architecture

fn random_targets(head: LossHead, rows: usize, outputs: usize, r: &mut impl Rng) -> Tensor {
    match head {
        LossHead::SquaredError => uniform_tensor(&[rows, outputs], r, -1.0, 1.0),
        LossHead::CrossEntropy => uniform_tensor(&[rows, outputs], r, 0.0, 1.0),
        LossHead::Nll => {
            let mut y = Tensor::zeros(&[rows, outputs]);
            for i in 0..rows {
                y.row_mut(i)[r.random_range(0..outputs)] = 1.0;
            }
            y
        }
    }
}

fn gradient_matrix() -> Outcome {
    let heads = [
        LossHead::SquaredError,
        LossHead::CrossEntropy,
        LossHead::Nll,
    ];
    let hidden = [
        Nonlinearity::Sigmoid,
        Nonlinearity::Tanh,
        Nonlinearity::Rectifier,
        Nonlinearity::HardTanh,
        Nonlinearity::Softsign,
    ];
    let architectures: [&[usize]; 2] = [&[4], &[4, 3]];
    let options = CheckOptions::default();
    let (inputs, rows, outputs) = (3, 3, 3);
    let (mut cases, mut checked, mut skipped, mut failing) = (0, 0usize, 0usize, Vec::new());
    let mut worst = 0.0f64;
    let (mut failure_gradient, mut failure_gap, mut failure_shrink) =
        (0.0f64, 0.0f64, f64::INFINITY);
    for head in heads {
        for nl in hidden {
            for arch in architectures {
                cases += 1;
                let spec = ModelSpec::mlp(inputs, arch, nl, outputs, head)?;
                let mut case_failures = 0;
                for point in 0..100u64 {
                    let mut r = rng(derive(1, &[cases, point]));
                    let params = ModelParams {
                        layers: spec
                            .layers
                            .iter()
                            .map(|l| LayerParams {
                                weight: uniform_tensor(&[l.fan_out, l.fan_in], &mut r, -1.0, 1.0),
                                bias: uniform_tensor(&[l.fan_out], &mut r, -1.0, 1.0),
                            })
                            .collect(),
                    };
                    let x = uniform_tensor(&[rows, inputs], &mut r, -2.0, 2.0);
                    let y = random_targets(head, rows, outputs, &mut r);
                    let mut mlp = build_mlp(&spec, &params, head)?;
                    let bindings = mlp.bindings(&params, x, y);
                    let report = check_gradient(&mut mlp.graph, &bindings, &options)?;
                    let mut finer = None;
                    for (i, e) in report.entries.iter().enumerate() {
                        checked += 1;
                        match e.status {
                            CheckStatus::Pass => worst = worst.max(e.relative_error),
                            CheckStatus::Skipped => skipped += 1,
                            _ => {
                                case_failures += 1;
                                // a truncation-limited mismatch shrinks ~100x with a 10x smaller step
                                let fine = finer.get_or_insert_with(|| {
                                    check_gradient(
                                        &mut mlp.graph,
                                        &bindings,
                                        &CheckOptions::with_step(1e-5),
                                    )
                                });
                                let f = &fine.as_ref().map_err(|e| e.to_string())?.entries[i];
                                let shrink = (e.analytic - e.numeric).abs()
                                    / (f.analytic - f.numeric).abs().max(f64::MIN_POSITIVE);
                                failure_gradient = failure_gradient.max(e.analytic.abs());
                                failure_gap = failure_gap.max((e.analytic - e.numeric).abs());
                                failure_shrink = failure_shrink.min(shrink);
                            }
                        }
                    }
                }
                if case_failures > 0 {
                    failing.push(format!("{head}/{}/{arch:?}: {case_failures}", nl.name()));
                }
            }
        }
    }
    let detail = format!(
        "{cases} cases x 100 points, {checked} coordinates, {skipped} skipped at kinks, max relative error {worst:.1e}{}",
        if failing.is_empty() {
            String::new()
        } else {
            format!(
                "; failing {} (all with |gradient| <= {failure_gradient:.1e} and absolute mismatch <= {failure_gap:.1e}, which shrinks >= {failure_shrink:.0}x at step 1e-5)",
                failing.join(", ")
            )
        }
    );
    Ok(verdict(cases == 30 && failing.is_empty(), detail))
}

// 2. central-difference error on a cubic across step sizes

fn cubic_scaling() -> Outcome {
    let mut g = Graph::new();
    let w = g.parameter("w");
    let sq = g.mul(w, w);
    let cube = g.mul(sq, w);
    let total = g.sum(cube);
    g.set_output(total);
    let bindings = Bindings::new().with(w, Tensor::vector(vec![0.5, -0.8, 1.1, 1.7, -2.0]));
    let steps = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10];
    let mut errors = Vec::new();
    for &step in &steps {
        errors.push(
            check_gradient(&mut g, &bindings, &CheckOptions::with_step(step))?.max_relative_error(),
        );
    }
    let r1 = errors[0] / errors[1];
    let r2 = errors[1] / errors[2];
    let within = |r: f64| (100.0 / 3.0..=300.0).contains(&r);
    let floor = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    let last = *errors.last().expect("steps");
    let worsens = last > 10.0 * floor && last > errors[2];
    let table: Vec<String> = steps
        .iter()
        .zip(&errors)
        .map(|(s, e)| format!("{s:.0e}:{e:.1e}"))
        .collect();
    Ok(verdict(
        within(r1) && within(r2) && worsens,
        format!("ratios {r1:.1}, {r2:.1}; {}", table.join(" ")),
    ))
}

// 3. a 50-unit tanh network memorizes 20 examples

fn controlled_overfitting() -> Outcome {
    // well-separated moons: no two opposite labels closer than 0.3
    let data = two_moons(20, 0.1, 3);
    let spec = ModelSpec::mlp(2, &[50], Nonlinearity::Tanh, 2, LossHead::Nll)?;
    let params = initialize(&spec, 4);
    let graph = build_mlp(&spec, &params, LossHead::Nll)?;
    // validating on the training set logs the training error
    let mut objective = Supervised::new(graph, ValidationMetric::ClassificationError);
    let config = TrainConfig {
        learning_rate: 0.1,
        batch_size: 4,
        max_updates: 5000,
        train_size: 20,
        ..TrainConfig::default()
    };
    let stop = EarlyStopConfig {
        eval_every: Some(20),
        ..EarlyStopConfig::disabled()
    };
    let out = fit(
        &mut objective,
        params,
        &data,
        &data,
        &config,
        &stop,
        &FitOptions {
            seed: 5,
            reshuffle: true,
            ..FitOptions::default()
        },
    )?;
    let reached = out
        .log
        .records
        .iter()
        .find(|r| r.valid_error < 1e-2)
        .map(|r| r.update);
    let final_error = objective.validation_error(&out.final_params, &data)?;
    let nll = objective.training_loss(&out.final_params, &data)?;
    let detail = format!(
        "training error below 1e-2 at update {}, {final_error} after {} updates (training NLL {nll:.2e})",
        reached.map_or("never".into(), |u| u.to_string()),
        out.updates
    );
    Ok(verdict(reached.is_some() && final_error < 1e-2, detail))
}

// 4. small-noise denoising excess loss against the reconstruction Jacobian

fn tied_sigmoid_params(spec: &AutoencoderSpec, seed: u64) -> AutoencoderParams {
    let mut r = rng(seed);
    let mut p = AutoencoderParams::zeros(spec);
    for block in p.blocks_mut() {
        for v in block.data_mut() {
            *v = r.random_range(-1.5..1.5);
        }
    }
    p
}

/// Iterates `x ← r(x)`; returns a point with `|r(x) − x| < 1e-13`.
fn fixed_point(spec: &AutoencoderSpec, params: &AutoencoderParams) -> Option<Tensor> {
    let mut x = Tensor::full(&[spec.fan_in], 0.5);
    for _ in 0..10_000 {
        let next = reconstruct(spec, params, &x).ok()?;
        let gap = next
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = next;
        if gap < 1e-13 {
            return Some(x);
        }
    }
    None
}

fn dae_cae_equivalence() -> Outcome {
    let sigma = 0.01;
    let draws = 100_000;
    let spec = AutoencoderSpec {
        loss: ReconstructionLoss::Squared,
        corruption: Corruption::Gaussian(sigma),
        ..AutoencoderSpec::new(6, 4)
    };
    let (mut models, mut worst, mut seed) = (0, 0.0f64, 0u64);
    let mut all_within = true;
    while models < 10 {
        seed += 1;
        let params = tied_sigmoid_params(&spec, seed);
        let Some(x) = fixed_point(&spec, &params) else {
            continue;
        };
        let jacobian = reconstruction_jacobian(&spec, &params, &x)?;
        let predicted = sigma * sigma * jacobian.sum_squares();
        let rows = Tensor::from_vec(&[draws, spec.fan_in], x.data().repeat(draws))?;
        let excess = dae_loss(&spec, &params, &rows, derive(seed, &[4]))?
            - plain_loss(&spec, &params, &rows)?;
        let rel = (excess - predicted).abs() / predicted;
        worst = worst.max(rel);
        all_within &= rel <= 0.10;
        models += 1;
    }
    Ok(verdict(
        all_within,
        format!(
            "10 auto-encoders at fixed points, worst relative gap {:.2}%",
            100.0 * worst
        ),
    ))
}

// 5. B′/T scaling sums to one regularizer gradient per epoch

fn regularizer_sum() -> Outcome {
    let spec = ModelSpec::mlp(5, &[7], Nonlinearity::Tanh, 3, LossHead::Nll)?;
    let mut r = rng(55);
    let mut params = initialize(&spec, 5);
    for block in params.blocks_mut() {
        for v in block.data_mut() {
            // keep weights away from zero so that sign(θ) is constant below
            *v = r.random_range(0.5..1.5) * if r.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    let mut worst = 0.0f64;
    let mut batch_sizes_seen = Vec::new();
    for (t, b) in [(103usize, 10usize), (100, 10), (7, 3)] {
        let config = TrainConfig {
            l1: 0.03,
            l2: 0.2,
            train_size: t,
            batch_size: b,
            ..TrainConfig::default()
        };
        // batch sizes as the trainer forms them
        let sizes: Vec<usize> = shuffle_epoch(t, 1, 0, true)
            .chunks(b)
            .map(<[usize]>::len)
            .collect();
        batch_sizes_seen.push(format!(
            "T={t},B={b}: last B'={}",
            sizes.last().expect("batches")
        ));
        let mut total: Vec<Tensor> = params
            .blocks()
            .iter()
            .map(|x| Tensor::zeros_like(x))
            .collect();
        let mut seen = 0u64;
        for &n in &sizes {
            for (acc, g) in total
                .iter_mut()
                .zip(batch_regularization(&params, &config, n, seen))
            {
                acc.add_assign(&g)?;
            }
            seen += n as u64;
        }
        for (acc, g) in total
            .iter()
            .zip(regularizer_gradient(&params, config.l1, config.l2))
        {
            for (a, b) in acc.data().iter().zip(g.data()) {
                worst = worst.max((a - b).abs());
            }
        }

        // the same identity through real updates: with a zero data gradient
        // and an L1 penalty whose sign cannot change, one epoch moves θ by
        // exactly −ε λ sign(θ)
        let l1_only = TrainConfig {
            l2: 0.0,
            learning_rate: 0.01,
            ..config.clone()
        };
        let mut state = OptimState::new(params.clone(), &l1_only);
        let zeros: Vec<Tensor> = params
            .blocks()
            .iter()
            .map(|x| Tensor::zeros_like(x))
            .collect();
        for &n in &sizes {
            state.step(&l1_only, &zeros, n)?;
        }
        let expected = regularizer_gradient(&params, l1_only.l1, 0.0);
        for ((after, before), g) in state
            .params
            .blocks()
            .iter()
            .zip(params.blocks())
            .zip(&expected)
        {
            for ((a, b), gv) in after.data().iter().zip(before.data()).zip(g.data()) {
                worst = worst.max((a - b + l1_only.learning_rate * gv).abs());
            }
        }
    }
    Ok(verdict(
        worst <= 1e-12,
        format!(
            "max deviation {worst:.1e} ({})",
            batch_sizes_seen.join("; ")
        ),
    ))
}

// 6. importance-weighted sampled reconstruction is unbiased

fn sampled_reconstruction() -> Outcome {
    let seeds = 100_000u64;
    let spec = AutoencoderSpec {
        corruption: Corruption::Masking(0.25),
        ..AutoencoderSpec::new(40, 8)
    };
    let params = tied_sigmoid_params(&spec, 66);
    let mut r = rng(6);
    let (mut worst_z, mut within, mut agree) = (0.0f64, 0, true);
    for i in 0..20u64 {
        let x = Tensor::vector(
            (0..spec.fan_in)
                .map(|_| {
                    if r.random::<f64>() < 0.15 {
                        r.random_range(0.1..1.0)
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        let corrupted = corrupt(&x, spec.corruption, derive(6, &[i]));
        let losses = coordinate_losses(&spec, &params, &x, &corrupted)?;
        let full: f64 = losses.iter().sum();
        let (mut s1, mut s2) = (0.0, 0.0);
        for s in 0..seeds {
            let seed = derive(i, &[s]);
            let record = sample_coordinates(&x, &corrupted, seed);
            let est: f64 = record
                .indices
                .iter()
                .zip(&record.weights)
                .map(|(&j, &w)| w * losses[j])
                .sum();
            if s < 20 {
                agree &=
                    sampled_reconstruction_loss(&spec, &params, &x, &corrupted, seed)?.0 == est;
            }
            s1 += est;
            s2 += est * est;
        }
        let n = seeds as f64;
        let mean = s1 / n;
        let se = ((s2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        // a sample that covers every coordinate has no variance at all
        let gap = (mean - full).abs();
        let z = if se > 0.0 {
            gap / se
        } else if gap <= 1e-12 * full.abs() {
            0.0
        } else {
            f64::INFINITY
        };
        worst_z = worst_z.max(z);
        if z <= 3.0 {
            within += 1;
        }
    }
    Ok(verdict(
        within == 20 && agree,
        format!("{within}/20 inputs within 3 SE, worst {worst_z:.2} SE"),
    ))
}

// 7. early stopping on a scripted validation sequence

/// Constant unit gradient so that θ_t = θ_0 − ε t identifies the snapshot.
struct Scripted {
    script: Vec<f64>,
    next: usize,
}

impl Objective for Scripted {
    type Params = ModelParams;

    fn loss_and_gradient(
        &mut self,
        params: &ModelParams,
        _: &Dataset,
        _: &[usize],
        _: u64,
    ) -> gradstack::Result<(f64, Vec<Tensor>)> {
        Ok((
            1.0,
            params
                .blocks()
                .iter()
                .map(|b| Tensor::full(b.shape(), 1.0))
                .collect(),
        ))
    }

    fn training_loss(&mut self, _: &ModelParams, _: &Dataset) -> gradstack::Result<f64> {
        Ok(1.0)
    }

    fn validation_error(&mut self, _: &ModelParams, _: &Dataset) -> gradstack::Result<f64> {
        let v = self.script.get(self.next).copied().unwrap_or(1.0);
        self.next += 1;
        Ok(v)
    }
}

fn early_stopping() -> Outcome {
    // evaluations every 100 examples (10 updates of 10); minimum at age 600
    let script = vec![
        1.0, 0.9, 0.95, 0.8, 0.85, 0.7, 0.75, 0.8, 0.72, 0.9, 0.71, 0.8, 0.74, 0.73, 0.6, 0.5,
    ];
    // hand-simulated with initial patience 300 and patience ← max(p, 2·age)
    let expected_patience = [
        300, 400, 400, 800, 800, 1200, 1200, 1200, 1200, 1200, 1200, 1200, 1200,
    ];
    let (expected_best_update, expected_stop_age) = (60u64, 1300u64);

    let config = EarlyStopConfig {
        enabled: true,
        patience: 300,
        growth: PatienceGrowth::Multiplicative(2.0),
        eval_every: Some(100),
    };
    let mut state = EarlyStopState::<u64>::new(&config);
    let mut trace = Vec::new();
    let mut stop_age = None;
    for (i, &v) in script.iter().enumerate() {
        let age = 100 * (i as u64 + 1);
        let decision = state.update(age / 10, v, age, &(age / 10));
        trace.push(state.patience);
        if decision == Decision::Stop {
            stop_age = Some(age);
            break;
        }
    }
    let state_ok = trace == expected_patience
        && stop_age == Some(expected_stop_age)
        && state.best_update == Some(expected_best_update);

    let data = two_moons(50, 0.1, 7);
    let spec = ModelSpec::mlp(2, &[3], Nonlinearity::Tanh, 2, LossHead::Nll)?;
    let init = initialize(&spec, 7);
    let train = TrainConfig {
        learning_rate: 0.001,
        batch_size: 10,
        max_updates: 10_000,
        ..TrainConfig::default()
    };
    let mut objective = Scripted { script, next: 0 };
    let out = fit(
        &mut objective,
        init.clone(),
        &data,
        &data,
        &train,
        &config,
        &FitOptions::default(),
    )?;
    let snapshot_ok = out.best.blocks().iter().zip(init.blocks()).all(|(b, i)| {
        b.data()
            .iter()
            .zip(i.data())
            .all(|(bv, iv)| (bv - (iv - 0.001 * expected_best_update as f64)).abs() < 1e-12)
    });
    let fit_ok = out.best_update == Some(expected_best_update)
        && out.stop_reason == StopReason::Patience
        && out.log.records.last().map(|r| r.age) == Some(expected_stop_age)
        && snapshot_ok;
    let detail = format!(
        "patience trace {trace:?}, T̂ = {:?}, stop at age {:?}; fit stopped at age {:?} with T̂ = {:?}",
        state.best_update,
        stop_age,
        out.log.records.last().map(|r| r.age),
        out.best_update
    );
    Ok(verdict(state_ok && fit_ok, detail))
}

// 8. greedy layer-wise search against exhaustive enumeration

const GREEDY_CONFIG: &str = "\
mode = greedy-layerwise
seed = 21
data.source = two-moons
data.n = 300
data.noise = 0.3
data.preprocess = unit-interval
pretrain.max_updates = 400
pretrain.learning_rate = 0.1
probe.max_updates = 300
optim.learning_rate = 0.1
optim.batch_size = 10
optim.max_updates = 600
stop.patience = 1000
search.k = 8
search.levels = 2
search.level_setting.1 = code_size=6 masking=0.1
search.level_setting.2 = code_size=12 masking=0.4
search.finetune_setting.1 = learning_rate=0.1
search.finetune_setting.2 = learning_rate=0.02
";

fn algorithm_oracle() -> Outcome {
    let config = ExperimentConfig::from_raw(RawConfig::parse(GREEDY_CONFIG)?)?;
    let data = prepare_data(&config)?;
    let (train, valid) = (data.train(), data.valid());
    let problem = layerwise_problem(&config, &train, &valid);
    let s = &config.search;
    let outcome = greedy_layerwise_search(
        &problem,
        s.k,
        s.levels,
        &s.level_settings,
        &s.finetune_settings,
        2,
        config.seed,
    )?;

    // every (level 1, level 2, fine-tune) path, trained from scratch
    let mut exhaustive: BTreeMap<String, f64> = BTreeMap::new();
    for c1 in &s.level_settings {
        let p1 = vec![c1.clone()];
        let (stack1, _) = problem.pretrain(
            1,
            c1,
            None,
            path_seed(config.seed, &flatten_path(&p1, None)),
        )?;
        for c2 in &s.level_settings {
            let p2 = vec![c1.clone(), c2.clone()];
            let (stack2, _) = problem.pretrain(
                2,
                c2,
                Some(&stack1),
                path_seed(config.seed, &flatten_path(&p2, None)),
            )?;
            for f in &s.finetune_settings {
                let flat = flatten_path(&p2, Some(f));
                let (_, score) = problem.fine_tune(f, &stack2, path_seed(config.seed, &flat))?;
                exhaustive.insert(config_string(&flat), score);
            }
        }
    }
    let best_score = exhaustive.values().cloned().fold(f64::INFINITY, f64::min);
    let optimal: Vec<&String> = exhaustive
        .iter()
        .filter(|(_, v)| **v == best_score)
        .map(|(k, _)| k)
        .collect();
    let greedy: BTreeMap<String, f64> = outcome
        .best
        .iter()
        .map(|e| {
            (
                config_string(&flatten_path(&e.settings, e.fine_tune.as_ref())),
                e.score,
            )
        })
        .collect();
    let top = outcome
        .best
        .first()
        .ok_or("greedy search returned nothing")?;
    let top_config = config_string(&flatten_path(&top.settings, top.fine_tune.as_ref()));
    let pass = top.score == best_score && optimal.contains(&&top_config) && greedy == exhaustive;
    Ok(verdict(
        pass,
        format!(
            "best {best_score} at {top_config} ({} optimal of {}); greedy kept {} paths, identical scores: {}",
            optimal.len(),
            exhaustive.len(),
            greedy.len(),
            greedy == exhaustive
        ),
    ))
}

// 9. random search against a grid when one dimension matters

fn random_vs_grid() -> Outcome {
    let names: Vec<String> = (0..5).map(|i| format!("x{i}")).collect();
    let space = ParamSpace {
        dimensions: names
            .iter()
            .map(|n| DimensionSpec {
                name: n.clone(),
                dimension: Dimension::Uniform { lo: 0.0, hi: 1.0 },
                condition: None,
            })
            .collect(),
    };
    let mut wins = 0;
    for pair in 0..100u64 {
        let mut r = rng(derive(9, &[pair]));
        let important = r.random_range(0..5);
        let target: f64 = r.random();
        // the grid designer does not know which axis matters
        let fine_axis = r.random_range(0..5);
        let objective =
            |c: &Config| (c[&names[important]].as_f64().expect("real") - target).powi(2);
        let mut counts = vec![2; 5];
        counts[fine_axis] = 4;
        let points = grid(&space, &counts)?;
        assert_eq!(points.len(), 64);
        let grid_best = points.iter().map(objective).fold(f64::INFINITY, f64::min);
        let random_best = (0..64u64)
            .map(|i| objective(&sample(&space, derive(pair, &[i]))))
            .fold(f64::INFINITY, f64::min);
        if random_best < grid_best {
            wins += 1;
        }
    }
    Ok(verdict(
        wins >= 80,
        format!("random strictly better in {wins}/100 paired seeds"),
    ))
}

// 10. subset-minimum curve against enumeration

fn subset_curve() -> Outcome {
    let mut worst = 0.0f64;
    let mut r = rng(10);
    let mut checked = 0;
    for n in 1..=12usize {
        for draw in 0..3 {
            // integer draws give ties
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    if draw == 0 {
                        r.random_range(0..4) as f64
                    } else {
                        r.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let sizes: Vec<usize> = (1..=n).collect();
            let curve = best_in_subset_curve(&values, &sizes)?;
            for p in curve {
                let mins: Vec<f64> = (0u32..1 << n)
                    .filter(|m| m.count_ones() as usize == p.size)
                    .map(|m| {
                        (0..n)
                            .filter(|i| m >> i & 1 == 1)
                            .map(|i| values[i])
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                let count = mins.len() as f64;
                let mean = mins.iter().sum::<f64>() / count;
                let var = mins.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
                worst = worst
                    .max((p.mean - mean).abs())
                    .max((p.std - var.sqrt()).abs());
                checked += 1;
            }
        }
    }
    Ok(verdict(
        worst <= 1e-12,
        format!("{checked} (n, N) pairs, max deviation {worst:.1e}"),
    ))
}

// 11. activation spread through ten tanh layers at initialization

fn activation_ratio(scale: f64, x: &Tensor) -> gradstack::Result<(f64, Vec<f64>)> {
    let width = 100;
    let mut layers: Vec<LayerSpec> = (0..10)
        .map(|_| {
            LayerSpec::new(width, width, Nonlinearity::Tanh)
                .with_init(InitScheme::GlorotTanh, scale)
        })
        .collect();
    layers.push(LayerSpec::new(width, 1, Nonlinearity::Linear));
    let spec = ModelSpec::new(layers, LossHead::SquaredError)?;
    let params = initialize(&spec, 11);
    let mut h = x.clone();
    let mut stds = Vec::new();
    for p in &params.layers[..10] {
        let mut a = h.matmul_transposed(&p.weight)?;
        for row in 0..a.rows() {
            for (v, b) in a.row_mut(row).iter_mut().zip(p.bias.data()) {
                *v = (*v + b).tanh();
            }
        }
        stds.push(a.std());
        h = a;
    }
    Ok((stds[0] / stds[9], stds))
}

fn glorot_variance_flow() -> Outcome {
    let mut r = rng(111);
    let normal = rand_distr::StandardNormal;
    let x = Tensor::from_vec(
        &[1000, 100],
        (0..100_000).map(|_| r.sample::<f64, _>(normal)).collect(),
    )?;
    let (glorot, stds) = activation_ratio(1.0, &x)?;
    let (shrunk, _) = activation_ratio(0.1, &x)?;
    let layers: Vec<String> = stds.iter().map(|s| format!("{s:.3}")).collect();
    Ok(verdict(
        glorot < 2.0 && shrunk > 10.0,
        format!("first/deepest std ratio {glorot:.2} (Glorot, bound 2) vs {shrunk:.3e} (x0.1, bound 10); Glorot stds {}", layers.join(" ")),
    ))
}

// 12. two identical runs give identical stores and logs

const REPRO_CONFIG: &str = "\
mode = random
seed = 12
workers = 1
data.source = two-moons
data.n = 150
data.preprocess = standardize
optim.batch_size = 10
optim.max_updates = 300
stop.eval_every = 50
search.budget = 4
search.dim.optim.learning_rate = log-uniform(0.01, 0.5)
search.dim.model.hidden = int(3, 12)
";

fn files(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        out.push((
            p.file_name().expect("name").to_string_lossy().into_owned(),
            fs::read(&p)?,
        ));
    }
    out.sort();
    Ok(out)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let mut stores = Vec::new();
    for name in ["first", "second"] {
        let mut config = ExperimentConfig::from_raw(RawConfig::parse(REPRO_CONFIG)?)?;
        config.out = tmp.path().join(name);
        run(&config)?;
        stores.push((
            fs::read(config.out.join("trials.jsonl"))?,
            files(&config.out.join("logs"))?,
        ));
    }
    let same_store = stores[0].0 == stores[1].0;
    let same_logs = stores[0].1 == stores[1].1;
    Ok(verdict(
        same_store && same_logs && !stores[0].1.is_empty(),
        format!(
            "{} store bytes, {} logs; store identical: {same_store}, logs identical: {same_logs}",
            stores[0].0.len(),
            stores[0].1.len()
        ),
    ))
}

type Criterion = (u32, &'static str, Option<Duration>, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        (
            1,
            "gradient correctness matrix",
            Some(Duration::from_secs(60)),
            gradient_matrix,
        ),
        (2, "central-difference scaling", None, cubic_scaling),
        (
            3,
            "controlled overfitting",
            Some(Duration::from_secs(30)),
            controlled_overfitting,
        ),
        (
            4,
            "DAE-CAE equivalence",
            Some(Duration::from_secs(120)),
            dae_cae_equivalence,
        ),
        (5, "regularizer-sum equivalence", None, regularizer_sum),
        (
            6,
            "sampled reconstruction unbiased",
            None,
            sampled_reconstruction,
        ),
        (7, "early-stopping semantics", None, early_stopping),
        (
            8,
            "greedy layer-wise oracle",
            Some(Duration::from_secs(300)),
            algorithm_oracle,
        ),
        (9, "random beats grid", None, random_vs_grid),
        (10, "best-in-subset closed form", None, subset_curve),
        (11, "Glorot variance flow", None, glorot_variance_flow),
        (12, "end-to-end reproducibility", None, reproducibility),
    ];
    let mut failed = Vec::new();
    for (id, title, limit, check) in criteria {
        let started = Instant::now();
        let result = check();
        let elapsed = started.elapsed();
        let (pass, detail) = match result {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let pass = pass && in_time;
        let budget = limit.map_or(String::new(), |l| format!(", limit {} s", l.as_secs()));
        println!(
            "{} {id:>2} {title}: {detail} [{:.2} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    println!(
        "{} of 12 criteria passed{}",
        12 - failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {failed:?}")
        }
    );
    if !failed.is_empty() && std::env::var_os("GRADSTACK_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
