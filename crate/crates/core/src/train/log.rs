use std::path::Path;

use crate::error::{Error, Result};
use crate::model::LEVELS;

/// Branch columns in the CSV; topologies with fewer supervised branches leave the rest empty.
pub const MAX_BRANCHES: usize = 4;
/// Theta columns in the CSV.
pub const MAX_THETAS: usize = 2;

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global step counter, starting at 0.
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub base: Vec<f64>,
    pub cross: Vec<f64>,
    pub distill: Vec<f64>,
    /// Gate parameters after the update.
    pub theta: Vec<f64>,
    pub transpose_dev: f64,
    pub weight_sum_dev: f64,
    /// S matrices built at each level during this step, summed over the batch.
    pub s_matrices: Vec<usize>,
    /// D matrices built at each level during this step, summed over the batch.
    pub d_matrices: Vec<usize>,
    /// Set on the last step of each epoch when a validation split exists.
    pub val_acc: Option<f64>,
}

/// Append-only record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

fn header() -> String {
    let mut cols = vec!["epoch".to_string(), "step".into(), "lr".into(), "total".into()];
    for series in ["base", "cross", "distill"] {
        cols.extend((0..MAX_BRANCHES).map(|i| format!("{series}_{i}")));
    }
    cols.extend((0..MAX_THETAS).map(|i| format!("theta_{i}")));
    cols.extend(["transpose_dev".into(), "weight_sum_dev".into()]);
    for kind in ["s", "d"] {
        cols.extend((0..LEVELS).map(|l| format!("{kind}_matrices_l{l}")));
    }
    cols.push("val_acc".into());
    cols.join(",")
}

fn padded(v: &[f64], n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| v.get(i).map_or_else(String::new, |x| x.to_string()))
}

impl TrainLog {
    /// The fixed CSV header.
    pub fn header() -> String {
        header()
    }

    pub fn to_csv(&self) -> String {
        let mut out = header();
        out.push('\n');
        for r in &self.records {
            let mut cells = vec![r.epoch.to_string(), r.step.to_string(), r.lr.to_string(), r.total.to_string()];
            cells.extend(padded(&r.base, MAX_BRANCHES));
            cells.extend(padded(&r.cross, MAX_BRANCHES));
            cells.extend(padded(&r.distill, MAX_BRANCHES));
            cells.extend(padded(&r.theta, MAX_THETAS));
            cells.push(r.transpose_dev.to_string());
            cells.push(r.weight_sum_dev.to_string());
            cells.extend(r.s_matrices.iter().chain(&r.d_matrices).map(|n| n.to_string()));
            cells.push(r.val_acc.map_or_else(String::new, |v| v.to_string()));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(origin, d);
        let mut lines = text.lines();
        if lines.next() != Some(header().as_str()) {
            return Err(bad("missing or unexpected train log header".into()));
        }
        let width = header().split(',').count();
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(bad(format!("row {} has {} cells, expected {width}", n + 1, cells.len())));
            }
            let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", n + 1))) };
            let int = |s: &str| -> Result<usize> { s.parse::<usize>().map_err(|e| bad(format!("row {}: {e}", n + 1))) };
            let series = |from: usize, len: usize| -> Result<Vec<f64>> {
                cells[from..from + len].iter().filter(|c| !c.is_empty()).map(|c| num(c)).collect()
            };
            let b = 4;
            let t = b + 3 * MAX_BRANCHES;
            let m = t + MAX_THETAS + 2;
            let counts = |from: usize| -> Result<Vec<usize>> { cells[from..from + LEVELS].iter().map(|c| int(c)).collect() };
            records.push(StepRecord {
                epoch: int(cells[0])?,
                step: int(cells[1])?,
                lr: num(cells[2])?,
                total: num(cells[3])?,
                base: series(b, MAX_BRANCHES)?,
                cross: series(b + MAX_BRANCHES, MAX_BRANCHES)?,
                distill: series(b + 2 * MAX_BRANCHES, MAX_BRANCHES)?,
                theta: series(t, MAX_THETAS)?,
                transpose_dev: num(cells[t + MAX_THETAS])?,
                weight_sum_dev: num(cells[t + MAX_THETAS + 1])?,
                s_matrices: counts(m)?,
                d_matrices: counts(m + LEVELS)?,
                val_acc: match cells[m + 2 * LEVELS] {
                    "" => None,
                    s => Some(num(s)?),
                },
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }

    /// Validation accuracy per epoch, in epoch order.
    pub fn val_accuracies(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.val_acc.map(|a| (r.epoch, a))).collect()
    }
}
