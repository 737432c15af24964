//! Central-difference verification of backward passes.

use std::fmt::Write as _;

use serde::Serialize;

use super::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
const RELATIVE_FLOOR: f64 = 1e-12;

/// `(f(x+ε) − f(x−ε)) / 2ε`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates moving a kink input closer than `kink_margin · step` to
    /// its kink are skipped.
    pub kink_margin: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            kink_margin: 10.0,
        }
    }
}

impl CheckOptions {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// A perturbation straddled a non-differentiable point.
    Skipped,
    /// The loss was not finite at a perturbed point.
    NonFinite,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub status: CheckStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<CoordinateCheck>,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.entries
            .iter()
            .all(|e| matches!(e.status, CheckStatus::Pass | CheckStatus::Skipped))
    }

    /// Largest relative error over the compared coordinates.
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| matches!(e.status, CheckStatus::Pass | CheckStatus::Fail))
            .map(|e| e.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.entries
            .iter()
            .filter(|e| matches!(e.status, CheckStatus::Fail | CheckStatus::NonFinite))
    }

    pub fn count(&self, status: CheckStatus) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>14} {:>14} {:>12}  status",
            "coordinate", "analytic", "numeric", "rel-error"
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<24} {:>14.6e} {:>14.6e} {:>12.3e}  {}",
                format!("{}[{}]", e.parameter, e.index),
                e.analytic,
                e.numeric,
                e.relative_error,
                match e.status {
                    CheckStatus::Pass => "pass",
                    CheckStatus::Fail => "FAIL",
                    CheckStatus::Skipped => "skipped",
                    CheckStatus::NonFinite => "NON-FINITE",
                }
            );
        }
        let _ = writeln!(
            out,
            "step {:e}, tolerance {:e}, max relative error {:.3e}, {} failing",
            self.step,
            self.tolerance,
            self.max_relative_error(),
            self.failures().count()
        );
        out
    }

    /// One JSON record per coordinate.
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `backward` with central differences on every coordinate of
/// every bound parameter node.
pub fn check_gradient(
    graph: &mut Graph,
    bindings: &Bindings,
    options: &CheckOptions,
) -> Result<GradientCheckReport> {
    if !(options.step > 0.0) {
        return Err(Error::input("gradient-check step must be positive"));
    }
    graph.forward(bindings)?;
    let analytic = graph.backward()?;
    let base_kinks = graph.kink_distances();
    let params: Vec<NodeId> = graph
        .parameters()
        .iter()
        .copied()
        .filter(|p| bindings.get(*p).is_some())
        .collect();

    let mut work = bindings.clone();
    let mut entries = Vec::new();
    for p in params {
        let name = graph.node(p).name().to_owned();
        let n = work.get(p).expect("bound").len();
        for i in 0..n {
            let original = work.get(p).expect("bound").data()[i];
            work.get_mut(p).expect("bound").data_mut()[i] = original + options.step;
            let plus = graph.forward(&work)?;
            let plus_kinks = graph.kink_distances();
            work.get_mut(p).expect("bound").data_mut()[i] = original - options.step;
            let minus = graph.forward(&work)?;
            let minus_kinks = graph.kink_distances();
            work.get_mut(p).expect("bound").data_mut()[i] = original;

            let a = analytic[&p].data()[i];
            let (numeric, status, rel) = if !plus.is_finite() || !minus.is_finite() {
                (f64::NAN, CheckStatus::NonFinite, f64::NAN)
            } else {
                let num = (plus - minus) / (2.0 * options.step);
                let margin = options.kink_margin * options.step;
                if near_moving_kink(&base_kinks, &plus_kinks, &minus_kinks, margin) {
                    (num, CheckStatus::Skipped, relative_error(a, num))
                } else {
                    let rel = relative_error(a, num);
                    let status = if rel <= options.tolerance {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    };
                    (num, status, rel)
                }
            };
            entries.push(CoordinateCheck {
                parameter: name.clone(),
                index: i,
                analytic: a,
                numeric,
                relative_error: rel,
                status,
            });
        }
    }
    // leave the graph evaluated at the unperturbed point
    graph.forward(bindings)?;
    graph.backward()?;
    Ok(GradientCheckReport {
        step: options.step,
        tolerance: options.tolerance,
        entries,
    })
}

fn near_moving_kink(base: &[Vec<f64>], plus: &[Vec<f64>], minus: &[Vec<f64>], margin: f64) -> bool {
    for ((b, p), m) in base.iter().zip(plus).zip(minus) {
        for ((&db, &dp), &dm) in b.iter().zip(p).zip(m) {
            let moved = dp != db || dm != db;
            if moved && db.min(dp).min(dm) < margin {
                return true;
            }
        }
    }
    false
}
