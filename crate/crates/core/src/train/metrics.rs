use rayon::prelude::*;
use serde::Serialize;

use super::log::TrainLog;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::Model;

/// Single-branch evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Accuracy per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per image using only the base branch.
pub fn predict(model: &Model, split: &Split) -> Result<Vec<usize>> {
    split
        .images
        .par_iter()
        .map(|img| model.forward_inference(img).map(|l| argmax(&l)))
        .collect()
}

pub fn evaluate(model: &Model, split: &Split) -> Result<Metrics> {
    let k = model.config().num_classes;
    if split.num_classes > k {
        return Err(Error::Config(format!(
            "split has {} classes, model predicts {k}",
            split.num_classes
        )));
    }
    let preds = predict(model, split)?;
    let mut confusion = vec![vec![0usize; k]; k];
    for (r, p) in split.records.iter().zip(&preds) {
        confusion[r.label][*p] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    Ok(Metrics {
        accuracy: correct as f64 / split.len().max(1) as f64,
        per_class,
        confusion,
    })
}

/// Per-epoch mean base and cross losses and their difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapRow {
    pub epoch: usize,
    pub base: f64,
    pub cross: f64,
    pub gap: f64,
}

pub const GAP_HEADER: &str = "epoch,base_loss,cross_loss,gap";

/// Mean over each epoch's steps of the branch-averaged base and cross cross entropies.
pub fn compare_cls_gap(log: &TrainLog) -> Result<Vec<GapRow>> {
    if log.records.iter().any(|r| r.cross.is_empty()) || log.records.is_empty() {
        return Err(Error::Contract("gap report needs both base and cross loss series".into()));
    }
    let mut rows: Vec<GapRow> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in &log.records {
        let b = r.base.iter().sum::<f64>() / r.base.len() as f64;
        let c = r.cross.iter().sum::<f64>() / r.cross.len() as f64;
        match rows.last_mut() {
            Some(row) if row.epoch == r.epoch => {
                row.base += b;
                row.cross += c;
                *counts.last_mut().expect("count") += 1;
            }
            _ => {
                rows.push(GapRow {
                    epoch: r.epoch,
                    base: b,
                    cross: c,
                    gap: 0.0,
                });
                counts.push(1);
            }
        }
    }
    for (row, n) in rows.iter_mut().zip(counts) {
        row.base /= n as f64;
        row.cross /= n as f64;
        row.gap = row.base - row.cross;
    }
    Ok(rows)
}

pub fn gap_csv(rows: &[GapRow]) -> String {
    let mut s = String::from(GAP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.base, r.cross, r.gap));
    }
    s
}
