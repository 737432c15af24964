//! Datasets, splits, preprocessing and file formats.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Train / validation / test row indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Examples as rows of `x`, with optional targets as rows of `y`
/// (one-hot rows for class labels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Option<Tensor>,
    pub feature_names: Option<Vec<String>>,
    pub splits: Option<Splits>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Option<Tensor>) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::Shape(format!(
                "examples must be a matrix, got {:?}",
                x.shape()
            )));
        }
        if let Some(y) = &y {
            if y.rank() != 2 || y.rows() != x.rows() {
                return Err(Error::Shape(format!(
                    "targets {:?} do not match {} examples",
                    y.shape(),
                    x.rows()
                )));
            }
        }
        if !x.is_finite() {
            return Err(Error::input("examples must be finite"));
        }
        Ok(Self {
            x,
            y,
            feature_names: None,
            splits: None,
        })
    }

    /// Unsupervised data, `z = x`.
    pub fn unlabeled(x: Tensor) -> Result<Self> {
        Self::new(x, None)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn targets(&self) -> Result<&Tensor> {
        self.y
            .as_ref()
            .ok_or_else(|| Error::input("dataset has no targets"))
    }

    /// Rows `indices` as a new dataset without splits.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: self.y.as_ref().map(|y| y.select_rows(indices)),
            feature_names: self.feature_names.clone(),
            splits: None,
        }
    }

    fn split_part(&self, pick: impl Fn(&Splits) -> &Vec<usize>) -> Dataset {
        match &self.splits {
            Some(s) => self.subset(pick(s)),
            None => self.clone(),
        }
    }

    /// Training rows; the whole dataset when no split was made.
    pub fn train(&self) -> Dataset {
        self.split_part(|s| &s.train)
    }

    pub fn valid(&self) -> Dataset {
        self.split_part(|s| &s.valid)
    }

    pub fn test(&self) -> Dataset {
        self.split_part(|s| &s.test)
    }

    /// Argmax of each target row.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        let y = self.targets()?;
        Ok((0..y.rows()).map(|r| argmax(y.row(r))).collect())
    }

    /// Replaces the features, keeping targets and splits.
    pub fn with_features(&self, x: Tensor) -> Result<Dataset> {
        if x.rank() != 2 || x.rows() != self.len() {
            return Err(Error::Shape(format!(
                "{:?} features for {} examples",
                x.shape(),
                self.len()
            )));
        }
        Ok(Dataset {
            x,
            y: self.y.clone(),
            feature_names: None,
            splits: self.splits.clone(),
        })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hot rows for class labels in `0..classes`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut y = Tensor::zeros(&[labels.len(), classes]);
    for (r, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::input(format!(
                "label {c} at row {r} is not below {classes}"
            )));
        }
        y.row_mut(r)[c] = 1.0;
    }
    Ok(y)
}

/// Random disjoint splits. Sizes are `⌊f·n⌋`; when the fractions sum to 1
/// the leftover rows go to the splits with the largest fractional parts.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    if fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::spec("split fractions must be non-negative"));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::spec(format!(
            "split fractions sum to {total}, more than 1"
        )));
    }
    let n = dataset.len();
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (f * n as f64 + 1e-9).floor() as usize)
        .collect();
    if (total - 1.0).abs() <= 1e-9 {
        let mut order: Vec<usize> = (0..3).collect();
        let frac = |i: usize| fractions[i] * n as f64 - sizes[i] as f64;
        order.sort_by(|&a, &b| {
            frac(b)
                .partial_cmp(&frac(a))
                .expect("finite")
                .then(a.cmp(&b))
        });
        let mut left = n - sizes.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if fractions[i] > 0.0 {
                sizes[i] += 1;
                left -= 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::rng(seed));
    let train = order[..sizes[0]].to_vec();
    let valid = order[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = order[sizes[0] + sizes[1]..sizes[0] + sizes[1] + sizes[2]].to_vec();
    let mut out = dataset.clone();
    out.splits = Some(Splits { train, valid, test });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessKind {
    Standardize,
    Uniformize,
    Log1p,
    Sqrt,
    UnitInterval,
}

impl std::str::FromStr for PreprocessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "standardize" => PreprocessKind::Standardize,
            "uniformize" => PreprocessKind::Uniformize,
            "log1p" | "log" => PreprocessKind::Log1p,
            "sqrt" => PreprocessKind::Sqrt,
            "unit-interval" | "to-unit-interval" | "minmax" => PreprocessKind::UnitInterval,
            other => return Err(Error::spec(format!("unknown preprocessor `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocessor {
    Standardize {
        means: Vec<f64>,
        stds: Vec<f64>,
    },
    /// Per feature: the distinct training values and their CDF values.
    Uniformize {
        values: Vec<Vec<f64>>,
        cdf: Vec<Vec<f64>>,
    },
    Log1p,
    Sqrt,
    UnitInterval {
        mins: Vec<f64>,
        maxs: Vec<f64>,
    },
}

impl Preprocessor {
    /// Fits per-feature statistics on `train` (rows are examples).
    pub fn fit(kind: PreprocessKind, train: &Tensor) -> Result<Self> {
        if train.rank() != 2 || train.rows() == 0 {
            return Err(Error::input(
                "preprocessors are fitted on a non-empty training matrix",
            ));
        }
        let cols = columns(train);
        Ok(match kind {
            PreprocessKind::Standardize => {
                let n = train.rows() as f64;
                let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n).collect();
                let stds = cols
                    .iter()
                    .zip(&means)
                    .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
                    .collect();
                Preprocessor::Standardize { means, stds }
            }
            PreprocessKind::Uniformize => {
                let mut values = Vec::with_capacity(cols.len());
                let mut cdf = Vec::with_capacity(cols.len());
                for mut c in cols {
                    c.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                    let n = c.len() as f64;
                    let (mut u, mut f) = (Vec::new(), Vec::new());
                    let mut i = 0;
                    while i < c.len() {
                        let mut j = i;
                        while j + 1 < c.len() && c[j + 1] == c[i] {
                            j += 1;
                        }
                        // average of 1-based ranks i+1 ..= j+1
                        u.push(c[i]);
                        f.push((i + j + 2) as f64 / 2.0 / n);
                        i = j + 1;
                    }
                    values.push(u);
                    cdf.push(f);
                }
                Preprocessor::Uniformize { values, cdf }
            }
            PreprocessKind::Log1p => Preprocessor::Log1p,
            PreprocessKind::Sqrt => Preprocessor::Sqrt,
            PreprocessKind::UnitInterval => Preprocessor::UnitInterval {
                mins: cols
                    .iter()
                    .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
                    .collect(),
                maxs: cols
                    .iter()
                    .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect(),
            },
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let cols = x.cols();
        let mut out = x.clone();
        let width = match self {
            Preprocessor::Standardize { means, .. } => Some(means.len()),
            Preprocessor::Uniformize { values, .. } => Some(values.len()),
            Preprocessor::UnitInterval { mins, .. } => Some(mins.len()),
            _ => None,
        };
        if let Some(w) = width {
            if w != cols {
                return Err(Error::Shape(format!(
                    "preprocessor fitted on {w} features applied to {cols}"
                )));
            }
        }
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % cols;
            *v = match self {
                Preprocessor::Standardize { means, stds } => {
                    if stds[j] > 0.0 {
                        (*v - means[j]) / stds[j]
                    } else {
                        *v
                    }
                }
                Preprocessor::Uniformize { values, cdf } => {
                    interpolate_cdf(&values[j], &cdf[j], *v)
                }
                Preprocessor::Log1p | Preprocessor::Sqrt => {
                    if *v < 0.0 {
                        return Err(Error::input(format!(
                            "feature {j} has negative value {v} for a {} transform",
                            self.name()
                        )));
                    }
                    if matches!(self, Preprocessor::Log1p) {
                        v.ln_1p()
                    } else {
                        v.sqrt()
                    }
                }
                Preprocessor::UnitInterval { mins, maxs } => {
                    let span = maxs[j] - mins[j];
                    if span > 0.0 {
                        // held-out values beyond the training range are clamped
                        ((*v - mins[j]) / span).clamp(0.0, 1.0)
                    } else {
                        0.5
                    }
                }
            };
        }
        Ok(out)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preprocessor::Standardize { .. } => "standardize",
            Preprocessor::Uniformize { .. } => "uniformize",
            Preprocessor::Log1p => "log1p",
            Preprocessor::Sqrt => "sqrt",
            Preprocessor::UnitInterval { .. } => "unit-interval",
        }
    }

    fn warn_constant(&self) {
        let constant: Vec<usize> = match self {
            Preprocessor::Standardize { stds, .. } => {
                (0..stds.len()).filter(|&j| stds[j] == 0.0).collect()
            }
            Preprocessor::UnitInterval { mins, maxs } => {
                (0..mins.len()).filter(|&j| mins[j] == maxs[j]).collect()
            }
            _ => Vec::new(),
        };
        if !constant.is_empty() {
            log::warn!(
                "{}: constant features {:?} left untransformed",
                self.name(),
                constant
            );
        }
    }
}

fn columns(x: &Tensor) -> Vec<Vec<f64>> {
    let cols = x.cols();
    let mut out = vec![Vec::with_capacity(x.rows()); cols];
    for r in 0..x.rows() {
        for (j, &v) in x.row(r).iter().enumerate() {
            out[j].push(v);
        }
    }
    out
}

fn interpolate_cdf(values: &[f64], cdf: &[f64], v: f64) -> f64 {
    let last = values.len() - 1;
    if v < values[0] {
        return 0.0;
    }
    if v > values[last] {
        return 1.0;
    }
    match values.binary_search_by(|u| u.partial_cmp(&v).expect("finite")) {
        Ok(i) => cdf[i],
        Err(i) => {
            let (u0, u1) = (values[i - 1], values[i]);
            cdf[i - 1] + (cdf[i] - cdf[i - 1]) * (v - u0) / (u1 - u0)
        }
    }
}

/// Fits on the training rows only and transforms every row.
pub fn fit_apply(kind: PreprocessKind, dataset: &Dataset) -> Result<(Dataset, Preprocessor)> {
    let pre = Preprocessor::fit(kind, &dataset.train().x)?;
    pre.warn_constant();
    let x = pre.apply(&dataset.x)?;
    let mut out = dataset.clone();
    out.x = x;
    Ok((out, pre))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsvOptions {
    /// `None` detects a header from a non-numeric first row.
    pub header: Option<bool>,
    /// Number of trailing columns holding targets.
    pub target_columns: usize,
}

pub fn load_csv(path: &Path, options: CsvOptions) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, options).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}:{location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn parse_csv(text: &str, options: CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(format!("line {line}"), e.to_string())
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::parse("line 1", "empty file"));
    }
    let numeric = |s: &str| s.trim().parse::<f64>().is_ok();
    let has_header = options
        .header
        .unwrap_or_else(|| !records[0].iter().all(numeric));
    let names = has_header.then(|| {
        records[0]
            .iter()
            .map(|s| s.trim().to_owned())
            .collect::<Vec<_>>()
    });
    let body = if has_header {
        &records[1..]
    } else {
        &records[..]
    };
    if body.is_empty() {
        return Err(Error::parse("line 2", "no data rows"));
    }
    let width = body[0].len();
    if options.target_columns >= width {
        return Err(Error::parse(
            "line 1",
            format!(
                "{} target columns leave no features in {width} columns",
                options.target_columns
            ),
        ));
    }
    let nf = width - options.target_columns;
    let (mut xs, mut ys) = (Vec::with_capacity(body.len() * nf), Vec::new());
    for (r, rec) in body.iter().enumerate() {
        let line = r + 1 + usize::from(has_header);
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::parse(
                    format!("line {line}, column {}", c + 1),
                    format!("`{cell}` is not a number"),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    format!("line {line}, column {}", c + 1),
                    "non-finite value",
                ));
            }
            if c < nf {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = body.len();
    let y = (options.target_columns > 0)
        .then(|| Tensor::matrix(n, options.target_columns, ys))
        .transpose()?;
    let mut ds = Dataset::new(Tensor::matrix(n, nf, xs)?, y)?;
    ds.feature_names = names.map(|mut v| {
        v.truncate(nf);
        v
    });
    Ok(ds)
}

/// Writes features then targets, one example per line, with a header row.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = match &dataset.feature_names {
        Some(n) if n.len() == dataset.features() => n.clone(),
        _ => (1..=dataset.features()).map(|j| format!("x{j}")).collect(),
    };
    if let Some(y) = &dataset.y {
        header.extend((1..=y.cols()).map(|j| format!("y{j}")));
    }
    w.write_record(&header).map_err(csv_io)?;
    for r in 0..dataset.len() {
        let mut row: Vec<String> = dataset.x.row(r).iter().map(|v| v.to_string()).collect();
        if let Some(y) = &dataset.y {
            row.extend(y.row(r).iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::parse("csv", format!("{other:?}")),
    }
}

/// Reads an IDX array; the first dimension indexes examples and the rest
/// are flattened, so (n, r, c) becomes an (n, r·c) matrix.
pub fn load_idx(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::parse("offset 0", "file too short for an IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::parse(
            "offset 0",
            format!(
                "bad magic number {:02x}{:02x}{:02x}{:02x}",
                bytes[0], bytes[1], bytes[2], bytes[3]
            ),
        ));
    }
    let width = match bytes[2] {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        t => {
            return Err(Error::parse(
                "offset 2",
                format!("unknown IDX type code 0x{t:02x}"),
            ))
        }
    };
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::parse("offset 3", "IDX array has no dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::parse("offset 4", "truncated dimension list"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * width;
    if bytes.len() != expected {
        return Err(Error::parse(
            format!("offset {header}"),
            format!(
                "expected {} data bytes, found {}",
                count * width,
                bytes.len() - header
            ),
        ));
    }
    let body = &bytes[header..];
    let data: Vec<f64> = match bytes[2] {
        0x08 => body.iter().map(|&b| f64::from(b)).collect(),
        0x09 => body.iter().map(|&b| f64::from(b as i8)).collect(),
        0x0B => body
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_be_bytes([c[0], c[1]])))
            .collect(),
        0x0C => body
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_be_bytes(c.try_into().expect("4"))))
            .collect(),
        0x0D => body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_be_bytes(c.try_into().expect("4"))))
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8")))
            .collect(),
    };
    let n = dims[0];
    let rest = if n == 0 { 0 } else { count / n };
    if ndim == 1 {
        return Tensor::matrix(n, 1, data);
    }
    Tensor::matrix(n, rest, data)
}

/// Two interleaved half circles with Gaussian jitter; one-hot targets.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = crate::rng::rng(seed);
    let (mut xs, mut labels) = (Vec::with_capacity(2 * n), Vec::with_capacity(n));
    for i in 0..n {
        let class = i % 2;
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        xs.push(x + noise * e1);
        xs.push(y + noise * e2);
        labels.push(class);
    }
    let y = one_hot(&labels, 2).expect("two classes");
    Dataset::new(Tensor::matrix(n, 2, xs).expect("shape"), Some(y)).expect("finite")
}

/// Inputs on a random `rank`-dimensional subspace of ℝ^d; targets are a
/// random linear function plus noise.
pub fn low_rank_regression(n: usize, d: usize, rank: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = crate::rng::rng(seed);
    let normal = StandardNormal;
    let basis: Vec<f64> = (0..rank * d)
        .map(|_| normal.sample(&mut rng))
        .collect::<Vec<f64>>()
        .iter()
        .map(|v| v / (rank as f64).sqrt())
        .collect();
    let w: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let (mut xs, mut ys) = (Vec::with_capacity(n * d), Vec::with_capacity(n));
    for _ in 0..n {
        let z: Vec<f64> = (0..rank).map(|_| normal.sample(&mut rng)).collect();
        let row: Vec<f64> = (0..d)
            .map(|j| (0..rank).map(|k| z[k] * basis[k * d + j]).sum())
            .collect();
        let e: f64 = normal.sample(&mut rng);
        ys.push(
            row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt() + noise * e,
        );
        xs.extend(row);
    }
    Dataset::new(
        Tensor::matrix(n, d, xs).expect("shape"),
        Some(Tensor::matrix(n, 1, ys).expect("shape")),
    )
    .expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> Tensor {
        Tensor::matrix(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn standardize_hand_values() {
        let pre =
            Preprocessor::fit(PreprocessKind::Standardize, &column(&[1.0, 2.0, 3.0])).unwrap();
        let out = pre.apply(&column(&[1.0, 2.0, 3.0])).unwrap();
        let s = (1.5f64).sqrt();
        for (a, b) in out.data().iter().zip([-s, 0.0, s]) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = Preprocessor::fit(PreprocessKind::Standardize, &out)
            .unwrap()
            .apply(&out)
            .unwrap();
        for (a, b) in again.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniformize_ranks_and_ties() {
        let x = column(&[3.0, 1.0, 2.0]);
        let pre = Preprocessor::fit(PreprocessKind::Uniformize, &x).unwrap();
        let out = pre.apply(&x).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0 / 3.0, 2.0 / 3.0]);
        let held = pre.apply(&column(&[0.0, 1.5, 9.0])).unwrap();
        assert_eq!(held.data(), &[0.0, 0.5, 1.0]);
        let ties =
            Preprocessor::fit(PreprocessKind::Uniformize, &column(&[1.0, 1.0, 2.0, 5.0])).unwrap();
        assert_eq!(ties.apply(&column(&[1.0])).unwrap().data(), &[0.375]);
    }

    #[test]
    fn tail_transforms() {
        let pre = Preprocessor::fit(PreprocessKind::Sqrt, &column(&[4.0])).unwrap();
        assert_eq!(pre.apply(&column(&[4.0, 9.0])).unwrap().data(), &[2.0, 3.0]);
        let err = pre
            .apply(&Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap())
            .unwrap_err();
        assert!(err.to_string().contains("feature 1"));
        let log = Preprocessor::fit(PreprocessKind::Log1p, &column(&[0.0])).unwrap();
        assert_eq!(log.apply(&column(&[0.0])).unwrap().data(), &[0.0]);
    }

    #[test]
    fn unit_interval() {
        let x = Tensor::matrix(3, 2, vec![0.0, 5.0, 5.0, 5.0, 10.0, 5.0]).unwrap();
        let pre = Preprocessor::fit(PreprocessKind::UnitInterval, &x).unwrap();
        assert_eq!(
            pre.apply(&x).unwrap().data(),
            &[0.0, 0.5, 0.5, 0.5, 1.0, 0.5]
        );
        let held_out = Tensor::matrix(2, 2, vec![-3.0, 1.0, 12.0, 9.0]).unwrap();
        assert_eq!(pre.apply(&held_out).unwrap().data(), &[0.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn fitting_ignores_held_out_rows() {
        let x = column(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let ds = split(&Dataset::unlabeled(x).unwrap(), [0.6, 0.2, 0.2], 3).unwrap();
        let (_, a) = fit_apply(PreprocessKind::Standardize, &ds).unwrap();
        let mut perturbed = ds.clone();
        for &i in &ds.splits.as_ref().unwrap().valid {
            perturbed.x.data_mut()[i] += 100.0;
        }
        let (_, b) = fit_apply(PreprocessKind::Standardize, &perturbed).unwrap();
        assert_eq!(a, b);
        let mut train_perturbed = ds.clone();
        train_perturbed.x.data_mut()[ds.splits.as_ref().unwrap().train[0]] += 100.0;
        let (_, c) = fit_apply(PreprocessKind::Standardize, &train_perturbed).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes() {
        let ds = Dataset::unlabeled(Tensor::zeros(&[10, 1])).unwrap();
        let s = split(&ds, [0.6, 0.2, 0.2], 1).unwrap().splits.unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (6, 2, 2));
        let all = split(&ds, [1.0, 0.0, 0.0], 1).unwrap().splits.unwrap();
        assert_eq!(all.train.len(), 10);
        assert_eq!(
            split(&ds, [0.5, 0.3, 0.1], 4).unwrap(),
            split(&ds, [0.5, 0.3, 0.1], 4).unwrap()
        );
        assert!(split(&ds, [0.5, 0.5, 0.1], 4).is_err());
        let odd = Dataset::unlabeled(Tensor::zeros(&[7, 1])).unwrap();
        let s = split(&odd, [0.5, 0.25, 0.25], 0).unwrap().splits.unwrap();
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), 7);
    }

    #[test]
    fn csv_parsing() {
        let ds = parse_csv("1,2\n3,4\n5,6\n", CsvOptions::default()).unwrap();
        assert_eq!(ds.x.shape(), &[3, 2]);
        let ds = parse_csv(
            "a,b,label\n1,2,0\n3,4,1\n",
            CsvOptions {
                header: None,
                target_columns: 1,
            },
        )
        .unwrap();
        assert_eq!(ds.x.shape(), &[2, 2]);
        assert_eq!(ds.targets().unwrap().data(), &[0.0, 1.0]);
        assert_eq!(ds.feature_names.as_deref().unwrap(), ["a", "b"]);
        assert!(matches!(
            parse_csv("", CsvOptions::default()),
            Err(Error::Parse { .. })
        ));
        let ragged = parse_csv("1,2\n3\n", CsvOptions::default()).unwrap_err();
        assert!(matches!(ragged, Error::Parse { .. }));
        let bad = parse_csv(
            "1,2\n3,x\n",
            CsvOptions {
                header: Some(false),
                target_columns: 0,
            },
        )
        .unwrap_err();
        assert!(bad.to_string().contains("line 2, column 2"), "{bad}");
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = low_rank_regression(5, 3, 2, 0.1, 4);
        save_csv(&ds, &path).unwrap();
        let back = load_csv(
            &path,
            CsvOptions {
                header: Some(true),
                target_columns: 1,
            },
        )
        .unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn idx_images() {
        let mut bytes = vec![0, 0, 0x08, 3];
        for d in [2u32, 2, 2] {
            bytes.extend(d.to_be_bytes());
        }
        bytes.extend(0u8..8);
        let x = parse_idx(&bytes).unwrap();
        assert_eq!(x.shape(), &[2, 4]);
        assert_eq!(x.row(1), &[4.0, 5.0, 6.0, 7.0]);
        let mut bad = bytes.clone();
        bad[0] = 1;
        assert!(parse_idx(&bad).is_err());
        bytes.pop();
        assert!(parse_idx(&bytes).is_err());
        let mut floats = vec![0, 0, 0x0D, 1];
        floats.extend(2u32.to_be_bytes());
        floats.extend(1.5f32.to_be_bytes());
        floats.extend((-2.0f32).to_be_bytes());
        assert_eq!(parse_idx(&floats).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn synthetic_generators() {
        let m = two_moons(100, 0.1, 1);
        assert_eq!(m.x.shape(), &[100, 2]);
        assert_eq!(
            m.class_labels()
                .unwrap()
                .iter()
                .filter(|&&c| c == 1)
                .count(),
            50
        );
        assert_eq!(two_moons(10, 0.1, 2), two_moons(10, 0.1, 2));
        let r = low_rank_regression(50, 6, 2, 0.0, 3);
        assert_eq!(r.targets().unwrap().shape(), &[50, 1]);
    }

    proptest! {
        #[test]
        fn uniformize_ranges(values in proptest::collection::vec(-100i32..100, 1..40), held in proptest::collection::vec(-200i32..200, 1..10)) {
            let x = column(&values.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
            let pre = Preprocessor::fit(PreprocessKind::Uniformize, &x).unwrap();
            for &v in pre.apply(&x).unwrap().data() {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
            let h = column(&held.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
            for &v in pre.apply(&h).unwrap().data() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn splits_are_disjoint(n in 1usize..60, a in 0.0f64..0.5, b in 0.0f64..0.5, seed in any::<u64>()) {
            let ds = Dataset::unlabeled(Tensor::zeros(&[n, 1])).unwrap();
            let s = split(&ds, [a, b, 0.0], seed).unwrap().splits.unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            let len = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), len);
            prop_assert!(all.iter().all(|&i| i < n));
        }
    }
}
