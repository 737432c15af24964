//! Hyper-parameter search: typed spaces, grids, random sampling, trial
//! stores, best-in-subset statistics and greedy layer-wise optimization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderSpec, Corruption};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LossHead, ModelParams, ModelSpec, Nonlinearity};
use crate::optim::TrainConfig;
use crate::pretrain::{
    fine_tune, pretrain_level, probe_with_linear_head, Encoder, FineTuneSettings,
};
use crate::train::{EarlyStopConfig, ValidationMetric};

/// A hyper-parameter value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Value {
    /// Integers, then reals, then bare text.
    pub fn parse(s: &str) -> Value {
        let s = s.trim();
        if let Ok(i) = s.parse::<i64>() {
            Value::Int(i)
        } else if let Ok(f) = s.parse::<f64>() {
            Value::Real(f)
        } else {
            Value::Text(s.trim_matches('"').to_owned())
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(f) => Some(*f),
            Value::Text(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            Value::Real(f) if f.fract() == 0.0 => Some(*f as i64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

/// One configuration: dimension name → value.
pub type Config = BTreeMap<String, Value>;

/// `key=value` pairs joined with spaces, in key order.
pub fn config_string(config: &Config) -> String {
    config
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dimension {
    LogUniform {
        lo: f64,
        hi: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    IntRange {
        lo: i64,
        hi: i64,
        scale: Scale,
    },
    Categorical {
        values: Vec<Value>,
        weights: Vec<f64>,
    },
}

impl Dimension {
    pub fn categorical(values: Vec<Value>) -> Self {
        let w = 1.0 / values.len().max(1) as f64;
        let weights = vec![w; values.len()];
        Dimension::Categorical { values, weights }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::spec(format!("dimension `{name}`: {m}")));
        match self {
            Dimension::LogUniform { lo, hi } => {
                if !(lo < hi) {
                    return bad("lo must be below hi");
                }
                if !(*lo > 0.0) {
                    return bad("log scale needs lo > 0");
                }
            }
            Dimension::Uniform { lo, hi } => {
                if !(lo < hi) {
                    return bad("lo must be below hi");
                }
            }
            Dimension::IntRange { lo, hi, scale } => {
                if lo >= hi {
                    return bad("lo must be below hi");
                }
                if *scale == Scale::Log && *lo <= 0 {
                    return bad("log scale needs lo > 0");
                }
            }
            Dimension::Categorical { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return bad("categorical needs one prior weight per value");
                }
                if weights.iter().any(|w| !(*w >= 0.0))
                    || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return bad("prior weights must be non-negative and sum to 1");
                }
            }
        }
        Ok(())
    }

    /// Value at quantile `u ∈ [0, 1)` of the dimension's sampling law.
    pub fn quantile(&self, u: f64) -> Value {
        match self {
            Dimension::LogUniform { lo, hi } => {
                Value::Real((lo.ln() + u * (hi.ln() - lo.ln())).exp())
            }
            Dimension::Uniform { lo, hi } => Value::Real(lo + u * (hi - lo)),
            Dimension::IntRange {
                lo,
                hi,
                scale: Scale::Linear,
            } => {
                let span = (hi - lo + 1) as f64;
                Value::Int((*lo + (u * span).floor() as i64).min(*hi))
            }
            Dimension::IntRange {
                lo,
                hi,
                scale: Scale::Log,
            } => {
                let (a, b) = ((*lo as f64).ln(), (*hi as f64).ln());
                Value::Int(((a + u * (b - a)).exp().round() as i64).clamp(*lo, *hi))
            }
            Dimension::Categorical { values, weights } => {
                let mut acc = 0.0;
                for (v, w) in values.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return v.clone();
                    }
                }
                values
                    .iter()
                    .zip(weights)
                    .rev()
                    .find(|(_, w)| **w > 0.0)
                    .map_or(values[0].clone(), |(v, _)| v.clone())
            }
        }
    }

    /// `k` regularly spaced points in the declared scale, endpoints included.
    fn grid_points(&self, k: usize, name: &str) -> Result<Vec<Value>> {
        if k == 0 {
            return Err(Error::spec(format!(
                "dimension `{name}` needs at least one grid value"
            )));
        }
        let t = |i: usize| {
            if k == 1 {
                0.5
            } else {
                i as f64 / (k - 1) as f64
            }
        };
        Ok(match self {
            Dimension::LogUniform { lo, hi } => (0..k)
                .map(|i| {
                    Value::Real(if k > 1 && i == k - 1 {
                        *hi
                    } else {
                        lo * (hi / lo).powf(t(i))
                    })
                })
                .collect(),
            Dimension::Uniform { lo, hi } => (0..k)
                .map(|i| {
                    Value::Real(if k > 1 && i == k - 1 {
                        *hi
                    } else {
                        lo + t(i) * (hi - lo)
                    })
                })
                .collect(),
            Dimension::IntRange { lo, hi, scale } => {
                let mut out: Vec<i64> = (0..k)
                    .map(|i| match scale {
                        Scale::Linear => (*lo as f64 + t(i) * (hi - lo) as f64).round() as i64,
                        Scale::Log => ((*lo as f64).ln()
                            + t(i) * ((*hi as f64).ln() - (*lo as f64).ln()))
                        .exp()
                        .round() as i64,
                    })
                    .collect();
                out.dedup();
                out.into_iter().map(Value::Int).collect()
            }
            Dimension::Categorical { values, .. } => {
                if k > values.len() {
                    return Err(Error::spec(format!(
                        "dimension `{name}` has only {} values, {k} requested",
                        values.len()
                    )));
                }
                values[..k].to_vec()
            }
        })
    }
}

/// Activates a dimension only when `parent` takes one of `values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub parent: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub dimension: Dimension,
    pub condition: Option<Condition>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub dimensions: Vec<DimensionSpec>,
}

impl ParamSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, dimension: Dimension) -> Self {
        self.dimensions.push(DimensionSpec {
            name: name.into(),
            dimension,
            condition: None,
        });
        self
    }

    pub fn with_condition(
        mut self,
        name: &str,
        dimension: Dimension,
        parent: &str,
        values: Vec<Value>,
    ) -> Self {
        self.dimensions.push(DimensionSpec {
            name: name.into(),
            dimension,
            condition: Some(Condition {
                parent: parent.into(),
                values,
            }),
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for d in &self.dimensions {
            if seen.contains(&d.name.as_str()) {
                return Err(Error::spec(format!(
                    "dimension `{}` declared twice",
                    d.name
                )));
            }
            d.dimension.validate(&d.name)?;
            if let Some(c) = &d.condition {
                if !seen.contains(&c.parent.as_str()) {
                    return Err(Error::spec(format!(
                        "dimension `{}` depends on `{}`, which must be declared first",
                        d.name, c.parent
                    )));
                }
            }
            seen.push(&d.name);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dimensions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions.is_empty()
    }
}

/// Cross product of per-dimension grids; the last dimension varies fastest.
pub fn grid(space: &ParamSpace, counts: &[usize]) -> Result<Vec<Config>> {
    space.validate()?;
    if space.dimensions.iter().any(|d| d.condition.is_some()) {
        return Err(Error::spec(
            "grid search does not support conditional dimensions; use random search",
        ));
    }
    if counts.len() != space.len() {
        return Err(Error::spec(format!(
            "{} grid counts for {} dimensions",
            counts.len(),
            space.len()
        )));
    }
    let axes: Vec<Vec<Value>> = space
        .dimensions
        .iter()
        .zip(counts)
        .map(|(d, &k)| d.dimension.grid_points(k, &d.name))
        .collect::<Result<_>>()?;
    let mut out = vec![Config::new()];
    for (d, axis) in space.dimensions.iter().zip(&axes) {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for c in &out {
            for v in axis {
                let mut c = c.clone();
                c.insert(d.name.clone(), v.clone());
                next.push(c);
            }
        }
        out = next;
    }
    Ok(out)
}

/// Independent draw of every active dimension; deterministic in `seed`.
pub fn sample(space: &ParamSpace, seed: u64) -> Config {
    let mut rng = crate::rng::rng(seed);
    let mut config = Config::new();
    for d in &space.dimensions {
        let active = match &d.condition {
            None => true,
            Some(c) => config.get(&c.parent).is_some_and(|v| c.values.contains(v)),
        };
        // draw regardless so that later dimensions see the same stream
        let u: f64 = rng.random();
        if active {
            config.insert(d.name.clone(), d.dimension.quantile(u));
        }
    }
    config
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPoint {
    pub size: usize,
    pub mean: f64,
    pub std: f64,
}

/// Exact mean and population standard deviation of the minimum over all
/// size-`N` subsets, from order statistics: with values sorted ascending,
/// the k-th smallest is the subset minimum with probability
/// C(n−k, N−1) / C(n, N).
pub fn best_in_subset_curve(objectives: &[f64], sizes: &[usize]) -> Result<Vec<SubsetPoint>> {
    let n = objectives.len();
    if n == 0 {
        return Err(Error::input(
            "best-in-subset curve needs at least one completed trial",
        ));
    }
    let mut x = objectives.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).expect("finite objectives"));
    sizes
        .iter()
        .map(|&size| {
            if size == 0 || size > n {
                return Err(Error::input(format!(
                    "subset size {size} is not in 1..={n}"
                )));
            }
            // p_1 = N/n, p_{k+1} = p_k (n−k−N+1)/(n−k)
            let mut p = size as f64 / n as f64;
            let (mut m1, mut m2) = (0.0, 0.0);
            for k in 1..=n - size + 1 {
                let v = x[k - 1];
                m1 += p * v;
                m2 += p * v * v;
                if k < n {
                    p *= (n - k + 1 - size) as f64 / (n - k) as f64;
                }
            }
            let mean = m1;
            let var = (m2 - m1 * m1).max(0.0);
            Ok(SubsetPoint {
                size,
                mean,
                std: var.sqrt(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: u64,
    pub config: Config,
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trial {
    pub fn from_result(id: u64, config: Config, seed: u64, result: Result<f64>) -> Trial {
        match result {
            Ok(v) if v.is_finite() => Trial {
                id,
                config,
                objective: Some(v),
                status: TrialStatus::Ok,
                seed,
                stage: None,
                error: None,
            },
            Ok(v) => Trial::failed(id, config, seed, format!("non-finite objective {v}")),
            Err(e) => Trial::failed(id, config, seed, e.to_string()),
        }
    }

    fn failed(id: u64, config: Config, seed: u64, error: String) -> Trial {
        Trial {
            id,
            config,
            objective: None,
            status: TrialStatus::Failed,
            seed,
            stage: None,
            error: Some(error),
        }
    }
}

/// Append-only line-delimited trial records.
#[derive(Debug)]
pub struct TrialStore {
    path: PathBuf,
    lock: Mutex<()>,
}

impl TrialStore {
    pub fn open(path: &Path) -> Result<TrialStore> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(TrialStore {
            path: path.to_owned(),
            lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one whole record with a single append.
    pub fn append(&self, trial: &Trial) -> Result<()> {
        let mut line = serde_json::to_string(trial)?;
        line.push('\n');
        let _guard = self.lock.lock().expect("store lock");
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<Trial>> {
        load_trials(&self.path)
    }
}

/// Reads a store; a torn final line (no trailing newline) is ignored.
pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Trial>(line) {
            Ok(t) => out.push(t),
            Err(_) if i + 1 == lines.len() && !complete => {
                log::warn!("{}: ignoring torn final record", path.display())
            }
            Err(e) => {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), i + 1),
                    e.to_string(),
                ))
            }
        }
    }
    Ok(out)
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot").expect("every item processed"))
        .collect()
}

pub enum SearchSource<'a> {
    Grid(Vec<Config>),
    Random(&'a ParamSpace),
}

impl SearchSource<'_> {
    fn config(&self, id: u64, seed: u64) -> Option<Config> {
        match self {
            SearchSource::Grid(points) => points.get(id as usize).cloned(),
            SearchSource::Random(space) => {
                Some(sample(space, crate::rng::derive(seed, &[0x5341_4D50, id])))
            }
        }
    }
}

/// Seed of trial `id` in a search with master seed `seed`.
pub fn trial_seed(seed: u64, id: u64) -> u64 {
    crate::rng::derive(seed, &[0x5452_4941, id])
}

/// Evaluates trials until the store holds `budget` of them (fewer for an
/// exhausted grid). `objective` receives the trial id, configuration and
/// seed. Trial `i` always gets the same configuration and seed,
/// so a larger budget extends an earlier run.
pub fn run_search<F>(
    source: &SearchSource<'_>,
    budget: usize,
    workers: usize,
    seed: u64,
    store: &TrialStore,
    objective: F,
) -> Result<Vec<Trial>>
where
    F: Fn(u64, &Config, u64) -> Result<f64> + Sync,
{
    if budget == 0 {
        return Err(Error::spec("search budget must be at least 1"));
    }
    if let SearchSource::Random(space) = source {
        space.validate()?;
    }
    let existing = store.load()?;
    let start = existing.iter().map(|t| t.id + 1).max().unwrap_or(0);
    let jobs: Vec<(u64, Config)> = (start..budget as u64)
        .map_while(|id| source.config(id, seed).map(|c| (id, c)))
        .collect();
    let results = parallel_map(&jobs, workers, |(id, config)| {
        let s = trial_seed(seed, *id);
        let trial = Trial::from_result(*id, config.clone(), s, objective(*id, config, s));
        store.append(&trial).map(|_| trial)
    });
    let mut all = existing;
    for r in results {
        all.push(r?);
    }
    all.sort_by_key(|t| t.id);
    Ok(all)
}

/// The `k` lowest-scoring entries; on ties the earlier id wins.
#[derive(Clone, Debug)]
pub struct KBest<T> {
    k: usize,
    entries: Vec<(f64, u64, T)>,
}

impl<T> KBest<T> {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            entries: Vec::with_capacity(k + 1),
        }
    }

    /// Inserts if among the k best; returns whether it was kept.
    pub fn push(&mut self, score: f64, id: u64, item: T) -> bool {
        let pos = self
            .entries
            .partition_point(|(s, i, _)| *s < score || (*s == score && *i < id));
        if pos >= self.k {
            return false;
        }
        self.entries.insert(pos, (score, id, item));
        self.entries.truncate(self.k);
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, u64, T)> {
        self.entries.iter()
    }

    pub fn into_vec(self) -> Vec<(f64, u64, T)> {
        self.entries
    }
}

/// A depth-wise pretrain / fine-tune problem searched by
/// [`greedy_layerwise_search`].
pub trait LayerwiseProblem: Sync {
    /// Pretrained architecture up to some depth.
    type Stack: Clone + Send + Sync;
    /// Fine-tuned predictor.
    type Tuned: Clone + Send + Sync;

    /// Pretrains level `level` (1-based) on top of `below` and returns the
    /// deeper stack with its target-task score (lower is better).
    fn pretrain(
        &self,
        level: usize,
        setting: &Config,
        below: Option<&Self::Stack>,
        seed: u64,
    ) -> Result<(Self::Stack, f64)>;

    fn fine_tune(
        &self,
        setting: &Config,
        stack: &Self::Stack,
        seed: u64,
    ) -> Result<(Self::Tuned, f64)>;
}

/// A kept configuration: one setting per level, then the fine-tuning
/// setting once that phase has run.
#[derive(Clone, Debug)]
pub struct LayerwiseEntry<M> {
    pub settings: Vec<Config>,
    pub fine_tune: Option<Config>,
    pub score: f64,
    pub trial: u64,
    pub model: M,
}

#[derive(Clone, Debug)]
pub struct GreedyOutcome<T> {
    pub best: Vec<LayerwiseEntry<T>>,
    pub trials: Vec<Trial>,
}

/// Flattened trial configuration: `l1.key`, `l2.key`, …, `ft.key`.
pub fn flatten_path(levels: &[Config], fine_tune: Option<&Config>) -> Config {
    let mut out = Config::new();
    for (i, c) in levels.iter().enumerate() {
        for (k, v) in c {
            out.insert(format!("l{}.{k}", i + 1), v.clone());
        }
    }
    if let Some(c) = fine_tune {
        for (k, v) in c {
            out.insert(format!("ft.{k}"), v.clone());
        }
    }
    out
}

/// Seed of the job identified by a flattened configuration path; it does
/// not depend on the order in which jobs run.
pub fn path_seed(seed: u64, flat: &Config) -> u64 {
    crate::rng::derive_str(seed, &serde_json::to_string(flat).expect("plain config"))
}

/// Greedy layer-wise hyper-parameter optimization with a K-best set.
///
/// Level 1 tries every setting from scratch; level L tries every setting on
/// top of each configuration kept at level L−1, and keeps the K best depth-L
/// results. The fine-tuning phase tries every fine-tuning setting on each
/// kept depth-`levels` stack and returns its K best.
pub fn greedy_layerwise_search<P: LayerwiseProblem>(
    problem: &P,
    k: usize,
    levels: usize,
    level_settings: &[Config],
    sft_settings: &[Config],
    workers: usize,
    seed: u64,
) -> Result<GreedyOutcome<P::Tuned>> {
    if k == 0 || levels == 0 {
        return Err(Error::spec("K and the number of levels must be at least 1"));
    }
    if level_settings.is_empty() || sft_settings.is_empty() {
        return Err(Error::spec("settings lists must not be empty"));
    }
    let mut trials = Vec::new();
    let mut next_id = 0u64;
    let mut kept: Vec<LayerwiseEntry<P::Stack>> = Vec::new();

    for level in 1..=levels {
        // H ranges over the previous level's K-best set, or {∅} at level 1
        let bases: Vec<Option<&LayerwiseEntry<P::Stack>>> = if level == 1 {
            vec![None]
        } else {
            kept.iter().map(Some).collect()
        };
        let mut jobs = Vec::new();
        for c in level_settings {
            for h in &bases {
                let mut path: Vec<Config> = h.map(|e| e.settings.clone()).unwrap_or_default();
                path.push(c.clone());
                jobs.push((next_id, path, h.map(|e| &e.model)));
                next_id += 1;
            }
        }
        let results = parallel_map(&jobs, workers, |(_, path, below)| {
            let s = path_seed(seed, &flatten_path(path, None));
            (
                s,
                problem.pretrain(level, path.last().expect("non-empty"), *below, s),
            )
        });
        let mut best = KBest::new(k);
        for ((id, path, _), (s, r)) in jobs.iter().zip(results) {
            let flat = flatten_path(path, None);
            let (trial, model) = match r {
                Ok((m, score)) => (Trial::from_result(*id, flat, s, Ok(score)), Some(m)),
                Err(e) => (Trial::from_result(*id, flat, s, Err(e)), None),
            };
            if let (Some(score), Some(m)) = (trial.objective, model) {
                best.push(
                    score,
                    *id,
                    LayerwiseEntry {
                        settings: path.clone(),
                        fine_tune: None,
                        score,
                        trial: *id,
                        model: m,
                    },
                );
            }
            trials.push(Trial {
                stage: Some(format!("level{level}")),
                ..trial
            });
        }
        kept = best.into_vec().into_iter().map(|(_, _, e)| e).collect();
        if kept.is_empty() {
            return Ok(GreedyOutcome {
                best: Vec::new(),
                trials,
            });
        }
    }

    let mut jobs = Vec::new();
    for c in sft_settings {
        for h in &kept {
            jobs.push((next_id, c, h));
            next_id += 1;
        }
    }
    let results = parallel_map(&jobs, workers, |(_, c, h)| {
        let s = path_seed(seed, &flatten_path(&h.settings, Some(c)));
        (s, problem.fine_tune(c, &h.model, s))
    });
    let mut best = KBest::new(k);
    for ((id, c, h), (s, r)) in jobs.iter().zip(results) {
        let flat = flatten_path(&h.settings, Some(c));
        let (trial, model) = match r {
            Ok((m, score)) => (Trial::from_result(*id, flat, s, Ok(score)), Some(m)),
            Err(e) => (Trial::from_result(*id, flat, s, Err(e)), None),
        };
        if let (Some(score), Some(m)) = (trial.objective, model) {
            best.push(
                score,
                *id,
                LayerwiseEntry {
                    settings: h.settings.clone(),
                    fine_tune: Some((*c).clone()),
                    score,
                    trial: *id,
                    model: m,
                },
            );
        }
        trials.push(Trial {
            stage: Some("fine-tune".into()),
            ..trial
        });
    }
    Ok(GreedyOutcome {
        best: best.into_vec().into_iter().map(|(_, _, e)| e).collect(),
        trials,
    })
}

/// Stacked auto-encoders scored by a linear probe, then fine-tuned.
///
/// Level settings understand `code_size`, `learning_rate`, `batch_size`,
/// `max_updates`, `l2`, `masking`, `noise`, `contraction` and `encoder`;
/// fine-tuning settings understand `learning_rate`, `batch_size`,
/// `max_updates` and `l2`.
pub struct StackedAutoencoderProblem<'a> {
    pub train: &'a Dataset,
    pub valid: &'a Dataset,
    /// Template for every level; `fan_in` and `code_size` are filled in.
    pub level_template: AutoencoderSpec,
    pub pretrain_config: TrainConfig,
    pub pretrain_stop: EarlyStopConfig,
    pub probe_config: TrainConfig,
    pub probe_stop: EarlyStopConfig,
    pub finetune_config: TrainConfig,
    pub finetune_stop: EarlyStopConfig,
    pub head: LossHead,
}

fn get_f64(setting: &Config, key: &str) -> Result<Option<f64>> {
    setting
        .get(key)
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| Error::spec(format!("setting `{key}` must be numeric, got `{v}`")))
        })
        .transpose()
}

fn get_usize(setting: &Config, key: &str) -> Result<Option<usize>> {
    setting
        .get(key)
        .map(|v| {
            v.as_i64()
                .filter(|i| *i >= 0)
                .map(|i| i as usize)
                .ok_or_else(|| {
                    Error::spec(format!(
                        "setting `{key}` must be a non-negative integer, got `{v}`"
                    ))
                })
        })
        .transpose()
}

fn check_keys(setting: &Config, allowed: &[&str]) -> Result<()> {
    match setting.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::spec(format!(
            "unknown setting `{k}`; expected one of {allowed:?}"
        ))),
        None => Ok(()),
    }
}

/// Overrides optimizer fields named in `setting`.
pub fn apply_train_settings(config: &TrainConfig, setting: &Config) -> Result<TrainConfig> {
    let mut c = config.clone();
    if let Some(v) = get_f64(setting, "learning_rate")? {
        c.learning_rate = v;
    }
    if let Some(v) = get_usize(setting, "batch_size")? {
        c.batch_size = v;
    }
    if let Some(v) = get_usize(setting, "max_updates")? {
        c.max_updates = v as u64;
    }
    if let Some(v) = get_f64(setting, "l2")? {
        c.l2 = v;
    }
    Ok(c)
}

const TRAIN_KEYS: [&str; 4] = ["learning_rate", "batch_size", "max_updates", "l2"];

impl StackedAutoencoderProblem<'_> {
    pub fn level_spec(&self, fan_in: usize, setting: &Config) -> Result<AutoencoderSpec> {
        let mut keys = TRAIN_KEYS.to_vec();
        keys.extend(["code_size", "masking", "noise", "contraction", "encoder"]);
        check_keys(setting, &keys)?;
        let mut spec = AutoencoderSpec {
            fan_in,
            ..self.level_template.clone()
        };
        if let Some(n) = get_usize(setting, "code_size")? {
            spec.code_size = n;
        }
        if let Some(p) = get_f64(setting, "masking")? {
            spec.corruption = Corruption::Masking(p);
        }
        if let Some(s) = get_f64(setting, "noise")? {
            spec.corruption = Corruption::Gaussian(s);
        }
        if let Some(c) = get_f64(setting, "contraction")? {
            spec.contraction = c;
        }
        if let Some(v) = setting.get("encoder") {
            spec.encoder = v.to_string().parse::<Nonlinearity>()?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl LayerwiseProblem for StackedAutoencoderProblem<'_> {
    type Stack = Vec<Encoder>;
    type Tuned = (ModelSpec, ModelParams);

    fn pretrain(
        &self,
        _level: usize,
        setting: &Config,
        below: Option<&Vec<Encoder>>,
        seed: u64,
    ) -> Result<(Vec<Encoder>, f64)> {
        let below: Vec<Encoder> = below.cloned().unwrap_or_default();
        let fan_in = below
            .last()
            .map_or(self.train.features(), |e| e.code_size());
        let spec = self.level_spec(fan_in, setting)?;
        let config = apply_train_settings(&self.pretrain_config, setting)?;
        let level = pretrain_level(
            &spec,
            &below,
            self.train,
            self.valid,
            &config,
            &self.pretrain_stop,
            seed,
        )?;
        let mut stack = below;
        stack.push(level.encoder);
        let score = probe_with_linear_head(
            &stack,
            self.train,
            self.valid,
            &self.probe_config,
            &self.probe_stop,
            crate::rng::derive(seed, &[7]),
        )?;
        Ok((stack, score))
    }

    fn fine_tune(
        &self,
        setting: &Config,
        stack: &Vec<Encoder>,
        seed: u64,
    ) -> Result<((ModelSpec, ModelParams), f64)> {
        check_keys(setting, &TRAIN_KEYS)?;
        let config = apply_train_settings(&self.finetune_config, setting)?;
        let settings = FineTuneSettings {
            head: self.head,
            config: &config,
            stop: &self.finetune_stop,
            metric: ValidationMetric::ClassificationError,
            seed,
        };
        let (spec, out) = fine_tune(stack, self.train, self.valid, settings)?;
        Ok(((spec, out.best), out.best_validation))
    }
}
