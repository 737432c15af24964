//! Flat experiment files.
//!
//! One `section.key = value` assignment per line; `#` starts a comment;
//! blank lines are ignored; each key may appear once. Lists are
//! comma-separated. See the README for every recognised key.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use gradstack::autoencoder::{AutoencoderSpec, Corruption, ReconstructionLoss, Sparsity};
use gradstack::dataio::PreprocessKind;
use gradstack::hyperopt::{Condition, Config, Dimension, DimensionSpec, ParamSpace, Scale, Value};
use gradstack::nn::{InitScheme, LossHead, Nonlinearity};
use gradstack::optim::{AdaptiveTau, RegularizerScaling, TrainConfig};
use gradstack::train::{EarlyStopConfig, PatienceGrowth, ValidationMetric, DEFAULT_PATIENCE};

use crate::error::{CliError, Result};

/// Keys that change where or how fast a run executes, never its results.
pub const RUNTIME_KEYS: [&str; 2] = ["out", "workers"];

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but uninterpreted assignments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
    /// Syntax errors kept by [`RawConfig::parse_lenient`].
    problems: Vec<String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut raw = RawConfig::parse_lenient(text);
        if raw.problems.is_empty() {
            Ok(raw)
        } else {
            Err(CliError::Config(std::mem::take(&mut raw.problems)))
        }
    }

    /// Keeps every well-formed line and records the rest, so that
    /// [`ExperimentConfig::from_raw`] reports syntax and value errors together.
    pub fn parse_lenient(text: &str) -> RawConfig {
        let mut entries = BTreeMap::new();
        let mut errors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                errors.push(format!("line {n}: expected `key = value`, got `{content}`"));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
            {
                errors.push(format!("line {n}: invalid key `{key}`"));
                continue;
            }
            if let Some(prev) = entries.get(key) {
                let prev: &Entry = prev;
                errors.push(format!(
                    "line {n}: `{key}` already set on line {}",
                    prev.line
                ));
                continue;
            }
            entries.insert(
                key.to_owned(),
                Entry {
                    value: value.to_owned(),
                    line: n,
                },
            );
        }
        RawConfig {
            entries,
            problems: errors,
        }
    }

    pub fn from_file(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            std::io::Error::new(e.kind(), format!("reading config {}: {e}", path.display()))
        })?;
        let mut raw = RawConfig::parse_lenient(&text);
        // data files are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for key in ["data.path", "data.labels"] {
            if let Some(v) = raw.get(key) {
                if Path::new(v).is_relative() {
                    let joined = base.join(v).display().to_string();
                    let line = raw.line(key);
                    raw.entries.insert(
                        key.to_owned(),
                        Entry {
                            value: joined,
                            line,
                        },
                    );
                }
            }
        }
        Ok(raw)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    /// Sets or replaces a key (command-line flags and search overrides).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(
            key.to_owned(),
            Entry {
                value: value.into(),
                line: 0,
            },
        );
    }

    pub fn with_overrides(&self, overrides: &Config) -> RawConfig {
        let mut out = self.clone();
        for (k, v) in overrides {
            out.set(k, v.to_string());
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.value.as_str()))
    }

    /// Assignments that affect results, i.e. all but `out` and `workers`.
    pub fn semantic(&self) -> impl Iterator<Item = (&str, &str)> {
        self.iter().filter(|(k, _)| !RUNTIME_KEYS.contains(k))
    }

    /// Sorted `key = value` lines of [`RawConfig::semantic`]; the hashed
    /// form of the config.
    pub fn canonical(&self) -> String {
        self.semantic()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }
}

/// Typed access that remembers consumed keys and collects every error.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: RefCell<BTreeSet<String>>,
    errors: RefCell<Vec<String>>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Self {
            raw,
            used: RefCell::default(),
            errors: RefCell::default(),
        }
    }

    fn error(&self, key: &str, msg: impl Display) {
        let line = self.raw.line(key);
        let at = if line > 0 {
            format!("line {line}: ")
        } else {
            String::new()
        };
        self.errors.borrow_mut().push(format!("{at}`{key}`: {msg}"));
    }

    fn str(&self, key: &str) -> Option<&'a str> {
        self.used.borrow_mut().insert(key.to_owned());
        self.raw.get(key)
    }

    fn opt<T: FromStr>(&self, key: &str) -> Option<T>
    where
        T::Err: Display,
    {
        let s = self.str(key)?;
        match s.parse::<T>() {
            Ok(v) => Some(v),
            Err(e) => {
                self.error(key, format!("cannot parse `{s}`: {e}"));
                None
            }
        }
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> T
    where
        T::Err: Display,
    {
        self.opt(key).unwrap_or(default)
    }

    fn list<T: FromStr>(&self, key: &str) -> Option<Vec<T>>
    where
        T::Err: Display,
    {
        let s = self.str(key)?;
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.parse::<T>() {
                Ok(v) => out.push(v),
                Err(e) => {
                    self.error(key, format!("cannot parse list item `{part}`: {e}"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn bool(&self, key: &str, default: bool) -> bool {
        match self.str(key) {
            None => default,
            Some("true" | "yes" | "on" | "1") => true,
            Some("false" | "no" | "off" | "0") => false,
            Some(other) => {
                self.error(key, format!("expected true or false, got `{other}`"));
                default
            }
        }
    }

    /// `(suffix, value)` for every key under `prefix`.
    fn prefixed(&self, prefix: &str) -> Vec<(String, &'a str)> {
        let found: Vec<(String, &str)> = self
            .raw
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_owned(), v)))
            .collect();
        for (s, _) in &found {
            self.used.borrow_mut().insert(format!("{prefix}{s}"));
        }
        found
    }

    fn finish(self) -> Vec<String> {
        let used = self.used.into_inner();
        let mut errors = self.errors.into_inner();
        for (k, _) in self.raw.iter() {
            if !used.contains(k) {
                let line = self.raw.line(k);
                let at = if line > 0 {
                    format!("line {line}: ")
                } else {
                    String::new()
                };
                errors.push(format!("{at}unknown key `{k}`"));
            }
        }
        errors
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    SingleFit,
    PretrainFinetune,
    Grid,
    Random,
    GreedyLayerwise,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "single-fit" => Mode::SingleFit,
            "pretrain-finetune" => Mode::PretrainFinetune,
            "grid" => Mode::Grid,
            "random" => Mode::Random,
            "greedy-layerwise" => Mode::GreedyLayerwise,
            other => {
                return Err(format!(
                    "unknown mode `{other}`; expected single-fit, pretrain-finetune, grid, random or greedy-layerwise"
                ))
            }
        })
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SingleFit => "single-fit",
            Mode::PretrainFinetune => "pretrain-finetune",
            Mode::Grid => "grid",
            Mode::Random => "random",
            Mode::GreedyLayerwise => "greedy-layerwise",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    TwoMoons {
        n: usize,
        noise: f64,
    },
    LowRank {
        n: usize,
        features: usize,
        rank: usize,
        noise: f64,
    },
    Csv {
        path: PathBuf,
        header: Option<bool>,
        targets: usize,
    },
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: [f64; 3],
    pub preprocess: Vec<PreprocessKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub head: LossHead,
    pub init: InitScheme,
    pub init_scale: f64,
    pub metric: ValidationMetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub code_sizes: Vec<usize>,
    /// Every level's shape except `fan_in` and `code_size`.
    pub template: AutoencoderSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    /// What each grid or random trial runs.
    pub trial: Mode,
    pub budget: Option<usize>,
    pub space: ParamSpace,
    pub grid_counts: Vec<usize>,
    pub k: usize,
    pub levels: usize,
    pub level_settings: Vec<Config>,
    pub finetune_settings: Vec<Config>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub rows: usize,
    pub jitter: f64,
    pub sweep: Vec<f64>,
    pub sign_flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryConfig {
    pub factor: f64,
    pub max_attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: TrainConfig,
    pub stop: EarlyStopConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub search: SearchConfig,
    pub gradcheck: GradcheckConfig,
    pub retry: RetryConfig,
    pub raw: RawConfig,
}

/// Parses `1.5`, `inf`, `infinity`.
#[derive(Clone, Copy, Debug)]
struct Real(f64);

impl FromStr for Real {
    type Err = std::num::ParseFloatError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "inf" | "infinity" => Ok(Real(f64::INFINITY)),
            _ => s.parse().map(Real),
        }
    }
}

/// `x2` multiplies, `+5000` adds.
fn parse_growth(s: &str) -> std::result::Result<PatienceGrowth, String> {
    if let Some(f) = s.strip_prefix(['x', '*']) {
        f.trim()
            .parse()
            .map(PatienceGrowth::Multiplicative)
            .map_err(|e| format!("{e}"))
    } else if let Some(k) = s.strip_prefix('+') {
        k.trim()
            .parse()
            .map(PatienceGrowth::Additive)
            .map_err(|e| format!("{e}"))
    } else {
        Err(format!("expected `xFACTOR` or `+EXAMPLES`, got `{s}`"))
    }
}

/// `log-uniform(lo, hi)`, `uniform(lo, hi)`, `int(lo, hi)`, `int-log(lo, hi)`,
/// `choice(a, b, …)` or `choice(a:w, b:w, …)`.
pub fn parse_dimension(s: &str) -> std::result::Result<Dimension, String> {
    let s = s.trim();
    let (name, rest) = s
        .split_once('(')
        .ok_or_else(|| format!("expected `kind(args)`, got `{s}`"))?;
    let args = rest
        .strip_suffix(')')
        .ok_or_else(|| format!("missing `)` in `{s}`"))?;
    let parts: Vec<&str> = args
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    let two_reals = || -> std::result::Result<(f64, f64), String> {
        match parts.as_slice() {
            [a, b] => Ok((
                a.parse().map_err(|e| format!("`{a}`: {e}"))?,
                b.parse().map_err(|e| format!("`{b}`: {e}"))?,
            )),
            _ => Err(format!("`{name}` takes two bounds")),
        }
    };
    let two_ints = || -> std::result::Result<(i64, i64), String> {
        match parts.as_slice() {
            [a, b] => Ok((
                a.parse().map_err(|e| format!("`{a}`: {e}"))?,
                b.parse().map_err(|e| format!("`{b}`: {e}"))?,
            )),
            _ => Err(format!("`{name}` takes two integer bounds")),
        }
    };
    Ok(match name.trim() {
        "log-uniform" => {
            let (lo, hi) = two_reals()?;
            Dimension::LogUniform { lo, hi }
        }
        "uniform" => {
            let (lo, hi) = two_reals()?;
            Dimension::Uniform { lo, hi }
        }
        "int" => {
            let (lo, hi) = two_ints()?;
            Dimension::IntRange {
                lo,
                hi,
                scale: Scale::Linear,
            }
        }
        "int-log" => {
            let (lo, hi) = two_ints()?;
            Dimension::IntRange {
                lo,
                hi,
                scale: Scale::Log,
            }
        }
        "choice" => {
            if parts.is_empty() {
                return Err("`choice` needs at least one value".into());
            }
            let weighted = parts.iter().any(|p| p.contains(':'));
            if weighted {
                let mut values = Vec::new();
                let mut weights = Vec::new();
                for p in &parts {
                    let (v, w) = p
                        .rsplit_once(':')
                        .ok_or_else(|| format!("`{p}` lacks a `:weight`"))?;
                    values.push(Value::parse(v));
                    weights.push(
                        w.trim()
                            .parse::<f64>()
                            .map_err(|e| format!("weight `{w}`: {e}"))?,
                    );
                }
                Dimension::Categorical { values, weights }
            } else {
                Dimension::categorical(parts.iter().map(|p| Value::parse(p)).collect())
            }
        }
        other => return Err(format!("unknown dimension kind `{other}`")),
    })
}

/// `parent in (a, b)`.
fn parse_condition(s: &str) -> std::result::Result<Condition, String> {
    let (parent, rest) = s
        .split_once(" in ")
        .ok_or_else(|| format!("expected `parent in (values)`, got `{s}`"))?;
    let list = rest
        .trim()
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or("values must be parenthesised")?;
    let values = list
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(Value::parse)
        .collect();
    Ok(Condition {
        parent: parent.trim().to_owned(),
        values,
    })
}

/// Whitespace-separated `key=value` pairs.
pub fn parse_setting(s: &str) -> std::result::Result<Config, String> {
    let mut out = Config::new();
    for pair in s.split_whitespace() {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected `key=value`, got `{pair}`"))?;
        out.insert(k.to_owned(), Value::parse(v));
    }
    if out.is_empty() {
        return Err("empty setting".into());
    }
    Ok(out)
}

/// Numbered entries `prefix.1`, `prefix.2`, … in numeric order.
fn numbered<T>(
    r: &Reader<'_>,
    prefix: &str,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Vec<T> {
    let mut items: Vec<(usize, T)> = Vec::new();
    for (suffix, value) in r.prefixed(prefix) {
        let key = format!("{prefix}{suffix}");
        match suffix.parse::<usize>() {
            Ok(i) => match parse(value) {
                Ok(v) => items.push((i, v)),
                Err(e) => r.error(&key, e),
            },
            Err(_) => r.error(&key, "expected a numeric index"),
        }
    }
    items.sort_by_key(|(i, _)| *i);
    items.into_iter().map(|(_, v)| v).collect()
}

fn read_train(r: &Reader<'_>, prefix: &str, base: &TrainConfig) -> TrainConfig {
    let key = |k: &str| format!("{prefix}.{k}");
    let mut c = base.clone();
    c.learning_rate = r.get(&key("learning_rate"), c.learning_rate);
    c.batch_size = r.get(&key("batch_size"), c.batch_size);
    c.max_updates = r.get(&key("max_updates"), c.max_updates);
    c.l2 = r.get(&key("l2"), c.l2);
    c
}

/// Reports each out-of-range training field under its own key. With
/// `inherited`, values not set in this section came from `optim` and were
/// reported there.
fn check_train(r: &Reader<'_>, prefix: &str, c: &TrainConfig, inherited: bool) {
    let key = |k: &str| format!("{prefix}.{k}");
    let mut clean = true;
    let mut fail = |k: &str, msg: &str| {
        clean = false;
        if !inherited || r.raw.get(&key(k)).is_some() {
            r.error(&key(k), msg);
        }
    };
    if !(c.learning_rate > 0.0 && c.learning_rate.is_finite()) {
        fail("learning_rate", "must be positive and finite");
    }
    if !(c.tau > 0.0) {
        fail("tau", "must be positive (inf for a constant rate)");
    }
    if c.batch_size == 0 {
        fail("batch_size", "must be at least 1");
    }
    if !(c.momentum > 0.0 && c.momentum <= 1.0) {
        fail("momentum", "must lie in (0, 1]");
    }
    if !(c.l1 >= 0.0) {
        fail("l1", "must be non-negative");
    }
    if !(c.l2 >= 0.0) {
        fail("l2", "must be non-negative");
    }
    if c.layer_multipliers.iter().any(|m| !(*m > 0.0)) {
        fail("layer_multipliers", "must all be positive");
    }
    // T is only known once data is loaded; validate the rest with a stand-in
    if clean && !inherited {
        if let Err(e) = (TrainConfig {
            train_size: 1,
            ..c.clone()
        })
        .validate()
        {
            r.error(prefix, e);
        }
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: RawConfig) -> Result<ExperimentConfig> {
        let r = Reader::new(&raw);
        let mode = r.opt::<Mode>("mode").unwrap_or_else(|| {
            if raw.get("mode").is_none() {
                r.error("mode", "missing; expected one of single-fit, pretrain-finetune, grid, random, greedy-layerwise");
            }
            Mode::SingleFit
        });
        let seed = r.get("seed", 0u64);
        let out = PathBuf::from(r.str("out").unwrap_or("run"));
        let workers = r.get("workers", 1usize);
        if workers == 0 {
            r.error("workers", "must be at least 1");
        }

        let data = read_data(&r);

        let head = r.get("model.head", LossHead::Nll);
        let metric = match r.str("model.metric") {
            None if head == LossHead::SquaredError => ValidationMetric::Loss,
            None | Some("classification") => ValidationMetric::ClassificationError,
            Some("loss") => ValidationMetric::Loss,
            Some(other) => {
                r.error(
                    "model.metric",
                    format!("expected `classification` or `loss`, got `{other}`"),
                );
                ValidationMetric::Loss
            }
        };
        let model = ModelConfig {
            hidden: r.list("model.hidden").unwrap_or_else(|| vec![50]),
            nonlinearity: r.get("model.nonlinearity", Nonlinearity::Tanh),
            head,
            init: r.get("model.init", InitScheme::GlorotTanh),
            init_scale: r.get("model.init_scale", 1.0),
            metric,
        };

        let mut optim = TrainConfig {
            learning_rate: r.get(
                "optim.learning_rate",
                gradstack::optim::DEFAULT_LEARNING_RATE,
            ),
            tau: r.get("optim.tau", Real(f64::INFINITY)).0,
            batch_size: r.get("optim.batch_size", gradstack::optim::DEFAULT_BATCH_SIZE),
            momentum: r.get("optim.momentum", 1.0),
            l1: r.get("optim.l1", 0.0),
            l2: r.get("optim.l2", 0.0),
            polyak: r.bool("optim.polyak", false),
            max_updates: r.get("optim.max_updates", 10_000),
            layer_multipliers: r.list("optim.layer_multipliers").unwrap_or_default(),
            ..TrainConfig::default()
        };
        optim.regularizer_scaling = match r.str("optim.regularizer_scaling") {
            None | Some("fixed-set") => RegularizerScaling::FixedSet,
            Some("online") => RegularizerScaling::Online,
            Some(other) => {
                r.error(
                    "optim.regularizer_scaling",
                    format!("expected `fixed-set` or `online`, got `{other}`"),
                );
                RegularizerScaling::FixedSet
            }
        };
        if let Some(threshold) = r.opt::<f64>("optim.adaptive_tau_threshold") {
            optim.adaptive_tau = Some(AdaptiveTau {
                threshold,
                check_every: r.get("optim.adaptive_tau_every", 1),
            });
        } else if r.str("optim.adaptive_tau_every").is_some() {
            r.error(
                "optim.adaptive_tau_every",
                "needs optim.adaptive_tau_threshold",
            );
        }
        check_train(&r, "optim", &optim, false);

        let growth = r
            .str("stop.growth")
            .map_or(Ok(PatienceGrowth::Multiplicative(2.0)), parse_growth)
            .unwrap_or_else(|e| {
                r.error("stop.growth", e);
                PatienceGrowth::Multiplicative(2.0)
            });
        let stop = EarlyStopConfig {
            enabled: r.bool("stop.enabled", true),
            patience: r.get("stop.patience", DEFAULT_PATIENCE),
            growth,
            eval_every: r.opt("stop.eval_every"),
        };
        if let Err(e) = stop.validate() {
            r.error("stop", e);
        }

        let pretrain = read_pretrain(&r, &optim);
        let probe = ProbeConfig {
            train: TrainConfig {
                learning_rate: r.get("probe.learning_rate", 0.1),
                batch_size: r.get("probe.batch_size", optim.batch_size),
                max_updates: r.get("probe.max_updates", 1000),
                ..TrainConfig::default()
            },
        };
        check_train(&r, "pretrain", &pretrain.train, true);
        check_train(&r, "probe", &probe.train, true);

        let search = read_search(&r, mode, &pretrain);

        let gradcheck = GradcheckConfig {
            epsilon: r.get("gradcheck.epsilon", gradstack::flowgraph::DEFAULT_STEP),
            tolerance: r.get(
                "gradcheck.tolerance",
                gradstack::flowgraph::DEFAULT_TOLERANCE,
            ),
            rows: r.get("gradcheck.rows", 4),
            jitter: r.get("gradcheck.jitter", 0.1),
            sweep: r.list("gradcheck.sweep").unwrap_or_default(),
            sign_flip: match r.str("gradcheck.inject_fault") {
                None | Some("none") => false,
                Some("sign-flip") => true,
                Some(other) => {
                    r.error(
                        "gradcheck.inject_fault",
                        format!("expected `none` or `sign-flip`, got `{other}`"),
                    );
                    false
                }
            },
        };
        if !(gradcheck.epsilon > 0.0) || gradcheck.sweep.iter().any(|e| !(*e > 0.0)) {
            r.error("gradcheck.epsilon", "steps must be positive");
        }
        if gradcheck.rows == 0 {
            r.error("gradcheck.rows", "must be at least 1");
        }

        let retry = RetryConfig {
            factor: r.get("retry.factor", 3.0),
            max_attempts: r.get("retry.max_attempts", 5),
        };
        if !(retry.factor > 1.0) {
            r.error(
                "retry.factor",
                format!("must be greater than 1, got {}", retry.factor),
            );
        }
        if retry.max_attempts == 0 {
            r.error("retry.max_attempts", "must be at least 1");
        }

        let mut errors = raw.problems.clone();
        errors.extend(r.finish());
        if !errors.is_empty() {
            return Err(CliError::Config(errors));
        }
        let config = ExperimentConfig {
            mode,
            seed,
            out,
            workers,
            data,
            model,
            optim,
            stop,
            pretrain,
            probe,
            search,
            gradcheck,
            retry,
            raw,
        };
        config.check_search_overrides()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::from_raw(RawConfig::from_file(path)?)
    }

    /// The config a single search trial runs.
    pub fn trial_config(&self, overrides: &Config) -> Result<ExperimentConfig> {
        let mut raw = self.raw.with_overrides(overrides);
        raw.set("mode", self.search.trial.name());
        ExperimentConfig::from_raw(raw)
    }

    /// Every search dimension must name a key the trial config accepts.
    fn check_search_overrides(&self) -> Result<()> {
        if !matches!(self.mode, Mode::Grid | Mode::Random) {
            return Ok(());
        }
        let mut errors = Vec::new();
        for d in &self.search.space.dimensions {
            if d.name.starts_with("search.") || d.name == "mode" {
                errors.push(format!(
                    "search dimension `{}` cannot override {}",
                    d.name, d.name
                ));
                continue;
            }
            let probe = Config::from([(d.name.clone(), d.dimension.quantile(0.5))]);
            if let Err(CliError::Config(e)) = self.trial_config(&probe) {
                errors.extend(
                    e.into_iter()
                        .map(|m| format!("search dimension `{}`: {m}", d.name)),
                );
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errors))
        }
    }
}

fn read_data(r: &Reader<'_>) -> DataConfig {
    let source = match r.str("data.source").unwrap_or("two-moons") {
        "two-moons" => DataSource::TwoMoons {
            n: r.get("data.n", 200),
            noise: r.get("data.noise", 0.2),
        },
        "low-rank" => DataSource::LowRank {
            n: r.get("data.n", 200),
            features: r.get("data.features", 10),
            rank: r.get("data.rank", 2),
            noise: r.get("data.noise", 0.1),
        },
        "csv" => DataSource::Csv {
            path: PathBuf::from(r.str("data.path").unwrap_or_else(|| {
                r.error("data.path", "required for csv data");
                ""
            })),
            header: r.str("data.header").map(|_| r.bool("data.header", false)),
            targets: r.get("data.targets", 1),
        },
        "idx" => DataSource::Idx {
            images: PathBuf::from(r.str("data.path").unwrap_or_else(|| {
                r.error("data.path", "required for idx data");
                ""
            })),
            labels: r.str("data.labels").map(PathBuf::from),
        },
        other => {
            r.error(
                "data.source",
                format!("expected two-moons, low-rank, csv or idx, got `{other}`"),
            );
            DataSource::TwoMoons { n: 0, noise: 0.0 }
        }
    };
    let split = match r.list::<f64>("data.split") {
        None => [0.6, 0.2, 0.2],
        Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
        Some(v) => {
            r.error(
                "data.split",
                format!("expected three fractions, got {}", v.len()),
            );
            [0.6, 0.2, 0.2]
        }
    };
    if split.iter().any(|f| !(*f >= 0.0)) || split.iter().sum::<f64>() > 1.0 + 1e-12 {
        r.error(
            "data.split",
            "fractions must be non-negative and sum to at most 1",
        );
    }
    if !(split[1] > 0.0) {
        r.error("data.split", "the validation fraction must be positive");
    }
    let preprocess = r.list("data.preprocess").unwrap_or_default();
    DataConfig {
        source,
        split,
        preprocess,
    }
}

fn read_pretrain(r: &Reader<'_>, optim: &TrainConfig) -> PretrainConfig {
    let mut t = AutoencoderSpec::new(0, 0);
    t.encoder = r.get("pretrain.encoder", t.encoder);
    t.decoder = r.get("pretrain.decoder", t.decoder);
    t.loss = match r.str("pretrain.loss") {
        None | Some("cross-entropy") => ReconstructionLoss::CrossEntropy,
        Some("squared") => ReconstructionLoss::Squared,
        Some(other) => {
            r.error(
                "pretrain.loss",
                format!("expected `cross-entropy` or `squared`, got `{other}`"),
            );
            ReconstructionLoss::CrossEntropy
        }
    };
    t.tied = r.bool("pretrain.tied", true);
    t.init = r.get("pretrain.init", t.init);
    let level: f64 = r.get("pretrain.corruption_level", 0.25);
    t.corruption = match r.str("pretrain.corruption") {
        None | Some("none") => Corruption::None,
        Some("masking") => Corruption::Masking(level),
        Some("gaussian") => Corruption::Gaussian(level),
        Some(other) => {
            r.error(
                "pretrain.corruption",
                format!("expected none, masking or gaussian, got `{other}`"),
            );
            Corruption::None
        }
    };
    t.contraction = r.get("pretrain.contraction", 0.0);
    let weight: f64 = r.get("pretrain.sparsity_weight", 0.0);
    let target: f64 = r.get("pretrain.sparsity_target", 0.05);
    t.sparsity = match r.str("pretrain.sparsity") {
        None | Some("none") => Sparsity::None,
        Some("l1") => Sparsity::L1(weight),
        Some("student-t") => Sparsity::StudentT(weight),
        Some("kl") => Sparsity::KlTarget {
            alpha: weight,
            rho: target,
        },
        Some(other) => {
            r.error(
                "pretrain.sparsity",
                format!("expected none, l1, student-t or kl, got `{other}`"),
            );
            Sparsity::None
        }
    };
    let code_sizes = r.list("pretrain.code_sizes").unwrap_or_default();
    if let Err(e) = (AutoencoderSpec {
        fan_in: 1,
        code_size: 1,
        ..t.clone()
    })
    .validate()
    {
        r.error("pretrain", e);
    }
    PretrainConfig {
        code_sizes,
        template: t,
        train: read_train(r, "pretrain", optim),
    }
}

fn read_search(r: &Reader<'_>, mode: Mode, pretrain: &PretrainConfig) -> SearchConfig {
    let trial = r.get("search.trial", Mode::SingleFit);
    if !matches!(trial, Mode::SingleFit | Mode::PretrainFinetune) {
        r.error("search.trial", "trials run single-fit or pretrain-finetune");
    }
    let budget = r.opt::<usize>("search.budget");
    if budget == Some(0) {
        r.error("search.budget", "must be at least 1");
    }

    let mut dims: Vec<DimensionSpec> = Vec::new();
    for (name, value) in r.prefixed("search.dim.") {
        match parse_dimension(value) {
            Ok(dimension) => dims.push(DimensionSpec {
                name,
                dimension,
                condition: None,
            }),
            Err(e) => r.error(&format!("search.dim.{name}"), e),
        }
    }
    for (name, value) in r.prefixed("search.when.") {
        let key = format!("search.when.{name}");
        match (
            parse_condition(value),
            dims.iter_mut().find(|d| d.name == name),
        ) {
            (Ok(c), Some(d)) => d.condition = Some(c),
            (Err(e), _) => r.error(&key, e),
            (_, None) => r.error(&key, format!("no dimension `search.dim.{name}`")),
        }
    }
    let space = ParamSpace {
        dimensions: order_by_parents(dims),
    };
    if matches!(mode, Mode::Grid | Mode::Random) {
        if space.is_empty() {
            r.error(
                "search.dim",
                "grid and random modes need at least one `search.dim.NAME`",
            );
        }
        if let Err(e) = space.validate() {
            r.error("search.dim", e);
        }
    }
    if mode == Mode::Random && budget.is_none() {
        r.error("search.budget", "required for random search");
    }

    let default_points: usize = r.get("search.grid_points", 3);
    let overrides: BTreeMap<String, &str> = r.prefixed("search.grid.").into_iter().collect();
    let mut grid_counts = Vec::new();
    for d in &space.dimensions {
        let k = match overrides.get(&d.name) {
            Some(v) => v.parse().unwrap_or_else(|e| {
                r.error(&format!("search.grid.{}", d.name), e);
                default_points
            }),
            None => default_points,
        };
        grid_counts.push(k);
    }
    for name in overrides.keys() {
        if !space.dimensions.iter().any(|d| &d.name == name) {
            r.error(
                &format!("search.grid.{name}"),
                format!("no dimension `search.dim.{name}`"),
            );
        }
    }

    let k = r.get("search.k", 1usize);
    let levels = r.get("search.levels", pretrain.code_sizes.len().max(1));
    let level_settings = numbered(r, "search.level_setting.", parse_setting);
    let finetune_settings = numbered(r, "search.finetune_setting.", parse_setting);
    if mode == Mode::GreedyLayerwise {
        if k == 0 {
            r.error("search.k", "must be at least 1");
        }
        if levels == 0 {
            r.error("search.levels", "must be at least 1");
        }
        if level_settings.is_empty() {
            r.error(
                "search.level_setting",
                "greedy-layerwise needs at least one `search.level_setting.N`",
            );
        }
        if finetune_settings.is_empty() {
            r.error(
                "search.finetune_setting",
                "greedy-layerwise needs at least one `search.finetune_setting.N`",
            );
        }
    }
    if mode == Mode::PretrainFinetune
        || (matches!(mode, Mode::Grid | Mode::Random) && trial == Mode::PretrainFinetune)
    {
        if pretrain.code_sizes.is_empty()
            && !space
                .dimensions
                .iter()
                .any(|d| d.name == "pretrain.code_sizes")
        {
            r.error(
                "pretrain.code_sizes",
                "pretrain-finetune needs at least one level",
            );
        }
    }
    SearchConfig {
        trial,
        budget,
        space,
        grid_counts,
        k,
        levels,
        level_settings,
        finetune_settings,
    }
}

/// Declared order is key order; move each conditional after its parent.
fn order_by_parents(mut dims: Vec<DimensionSpec>) -> Vec<DimensionSpec> {
    let mut out: Vec<DimensionSpec> = Vec::with_capacity(dims.len());
    while !dims.is_empty() {
        let ready = dims
            .iter()
            .position(|d| {
                d.condition
                    .as_ref()
                    .is_none_or(|c| out.iter().any(|o| o.name == c.parent))
            })
            .unwrap_or(0);
        out.push(dims.remove(ready));
    }
    out
}
