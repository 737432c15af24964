//! The `report` verb: tab-separated tables derived from a run directory.
//! Reading never touches the store.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gradstack::hyperopt::{best_in_subset_curve, config_string, load_trials, Trial, TrialStatus};
use gradstack::train::TrainLog;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub subset_curve: PathBuf,
    pub curves: Vec<PathBuf>,
}

/// Trials sorted by objective; failed trials last, by id.
pub fn summary_table(trials: &[Trial]) -> String {
    let mut sorted: Vec<&Trial> = trials.iter().collect();
    sorted.sort_by(|a, b| match (a.objective, b.objective) {
        (Some(x), Some(y)) => x.partial_cmp(&y).expect("finite").then(a.id.cmp(&b.id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.id.cmp(&b.id),
    });
    let mut out = String::from("rank\ttrial\tstatus\tobjective\tseed\tstage\tconfig\terror\n");
    for (rank, t) in sorted.iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            rank + 1,
            t.id,
            match t.status {
                TrialStatus::Ok => "ok",
                TrialStatus::Failed => "failed",
            },
            t.objective.map(|v| v.to_string()).unwrap_or_default(),
            t.seed,
            t.stage.as_deref().unwrap_or(""),
            config_string(&t.config),
            t.error.as_deref().unwrap_or("").replace(['\t', '\n'], " "),
        );
    }
    out
}

pub fn subset_curve_table(trials: &[Trial]) -> Result<String> {
    let objectives: Vec<f64> = trials.iter().filter_map(|t| t.objective).collect();
    let mut out = String::from("n\tmean\tstd\n");
    if objectives.is_empty() {
        return Ok(out);
    }
    let sizes: Vec<usize> = (1..=objectives.len()).collect();
    for p in best_in_subset_curve(&objectives, &sizes)? {
        let _ = writeln!(out, "{}\t{}\t{}", p.size, p.mean, p.std);
    }
    Ok(out)
}

pub fn curve_table(log: &TrainLog) -> String {
    let mut out = String::from("age\tupdate\tepoch\ttrain_loss\tvalid_error\tlearning_rate\n");
    for r in &log.records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.age, r.update, r.epoch, r.train_loss, r.valid_error, r.learning_rate
        );
    }
    out
}

/// Writes `DIR/report/{summary,subset_curve}.tsv` and one learning-curve
/// table per training log found under `DIR/logs`.
pub fn report(dir: &Path) -> Result<ReportFiles> {
    let store = dir.join("trials.jsonl");
    if !store.exists() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no trial store at {}", store.display()),
        )
        .into());
    }
    let trials = load_trials(&store)?;
    let out = dir.join("report");
    std::fs::create_dir_all(out.join("curves"))?;
    let summary = out.join("summary.tsv");
    std::fs::write(&summary, summary_table(&trials))?;
    let subset_curve = out.join("subset_curve.tsv");
    std::fs::write(&subset_curve, subset_curve_table(&trials)?)?;

    let mut curves = Vec::new();
    let logs = dir.join("logs");
    if logs.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&logs)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        names.sort();
        for p in names {
            let log = TrainLog::read_jsonl(&p)?;
            let name = p
                .file_stem()
                .expect("file name")
                .to_string_lossy()
                .into_owned();
            let target = out.join("curves").join(format!("{name}.tsv"));
            std::fs::write(&target, curve_table(&log))?;
            curves.push(target);
        }
    }
    Ok(ReportFiles {
        summary,
        subset_curve,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradstack::hyperopt::{Config, Value};

    fn trial(id: u64, objective: Option<f64>) -> Trial {
        let config = Config::from([("optim.learning_rate".to_string(), Value::Real(0.1))]);
        let result = objective.ok_or_else(|| gradstack::Error::Diverged {
            update: 1,
            loss: f64::NAN,
        });
        Trial::from_result(id, config, 7, result)
    }

    #[test]
    fn subset_curve_rows() {
        let trials: Vec<Trial> = [2.0, 1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, v)| trial(i as u64, Some(*v)))
            .collect();
        let table = subset_curve_table(&trials).unwrap();
        let row: Vec<f64> = table
            .lines()
            .nth(2)
            .unwrap()
            .split('\t')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(row[0], 2.0);
        assert!((row[1] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_store_gives_headers() {
        assert_eq!(subset_curve_table(&[]).unwrap(), "n\tmean\tstd\n");
        assert_eq!(summary_table(&[]).lines().count(), 1);
    }

    #[test]
    fn failed_trials_sort_last_without_objective() {
        let table = summary_table(&[trial(0, None), trial(1, Some(0.5))]);
        let rows: Vec<Vec<&str>> = table
            .lines()
            .skip(1)
            .map(|l| l.split('\t').collect())
            .collect();
        assert_eq!(rows[0][1], "1");
        assert_eq!(rows[1][2], "failed");
        assert_eq!(rows[1][3], "");
        assert_eq!(rows[0][6], "optim.learning_rate=0.1");
    }
}
