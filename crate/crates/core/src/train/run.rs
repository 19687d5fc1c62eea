use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::log::{StepRecord, TrainLog};
use super::loss::total_loss;
use super::metrics::evaluate;
use super::optim::Adam;
use crate::autograd::{Tape, Tensor};
use crate::data::{augment, ClassIndex, Split};
use crate::error::{Error, Result};
use crate::model::{branch_count, BranchBatch, Model, Topology};

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy (the last epoch without validation).
    pub model: Model,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub epochs_run: usize,
}

/// Hold out `fraction` of every class, deterministically in `seed`. Returns (train, validation).
pub fn split_validation(split: &Split, fraction: f64, seed: u64) -> (Split, Split) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c00);
    let idx = ClassIndex::new(&split.labels(), split.num_classes);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for k in 0..split.num_classes {
        let mut members = idx.class_members(k).to_vec();
        members.shuffle(&mut rng);
        let n_val = (members.len() as f64 * fraction).round() as usize;
        // keep two images per class for pair sampling
        let n_val = n_val.min(members.len().saturating_sub(2));
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (split.subset(&train), split.subset(&val))
}

/// Draw one batch of index tuples, laid out `[branch][sample]`.
pub fn draw_indices(
    topology: Topology,
    index: &ClassIndex,
    batch: usize,
    balance: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::with_capacity(batch); branch_count(topology)];
    for _ in 0..batch {
        let tuple: Vec<usize> = match topology {
            Topology::Baseline => vec![index.sample_single(rng, balance)?],
            Topology::Dcs => {
                let (a, p) = index.sample_pair(rng)?;
                vec![a, p]
            }
            Topology::Qcs => {
                let q = index.sample_quadruplet(rng, balance)?;
                vec![q.anchor, q.pos, q.neg, q.neg2]
            }
            Topology::TripletControl => {
                let t = index.sample_triplet(rng, balance)?;
                vec![t.anchor, t.pos, t.neg]
            }
        };
        for (b, i) in tuple.into_iter().enumerate() {
            out[b].push(i);
        }
    }
    Ok(out)
}

fn thetas(model: &Model) -> Vec<f64> {
    ["fusion.theta.0", "fusion.theta.1"]
        .iter()
        .filter_map(|n| model.params().get(*n).map(|t| t.values()[0]))
        .collect()
}

/// Train on `data`, holding out `config.val_fraction` of it for model selection.
pub fn train(config: &TrainConfig, data: &Split) -> Result<TrainOutcome> {
    config.validate()?;
    let (tr, val) = split_validation(data, config.val_fraction, config.seed);
    train_with_validation(config, &tr, &val)
}

/// Train on `train`; select the best epoch on `val` (when non-empty).
pub fn train_with_validation(config: &TrainConfig, train: &Split, val: &Split) -> Result<TrainOutcome> {
    config.validate()?;
    let mc = &config.model;
    if train.size != mc.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0}, model expects {1}x{1}",
            train.size, mc.image_size
        )));
    }
    if train.num_classes > mc.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            train.num_classes, mc.num_classes
        )));
    }
    let mut model = Model::new(mc.clone(), config.seed)?;
    let index = ClassIndex::new(&train.labels(), train.num_classes);
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7361_6d70);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6175_6700);
    let mut adam = Adam::new(config.optimizer);
    let steps_per_epoch = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        train.len().div_ceil(config.batch_size)
    };

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        let lr = config.optimizer.lr * config.lr_decay.powi(epoch as i32);
        for _ in 0..steps_per_epoch {
            let ids = draw_indices(mc.topology, &index, config.batch_size, config.balance, &mut sampler)?;
            let images: Vec<Vec<Tensor>> = ids
                .iter()
                .map(|b| b.iter().map(|&i| augment(&train.images[i], &config.augment, &mut aug_rng)).collect())
                .collect();
            let labels: Vec<Vec<usize>> = ids
                .iter()
                .map(|b| b.iter().map(|&i| train.records[i].label).collect())
                .collect();
            let batch = BranchBatch {
                images: images.iter().map(|b| b.iter().collect()).collect(),
                labels: labels.clone(),
            };

            let dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut tape = Tape::new();
            let mut sess = crate::model::Session::training(model.params(), Some(dropout_rng));
            let out = model.forward_train(&mut sess, &mut tape, &batch)?;
            let parts = total_loss(&mut tape, &out, &labels, &config.loss)?;
            if !parts.total_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("total loss is {}", parts.total_value),
                });
            }
            let grads = tape.backward(parts.total)?;
            let mut named = BTreeMap::new();
            for (name, var) in sess.bound() {
                if !tape.requires_grad(*var) {
                    continue;
                }
                if let Some(g) = grads.get(*var) {
                    if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                        return Err(Error::Diverged {
                            epoch,
                            step,
                            detail: format!("gradient of {name} contains {bad}"),
                        });
                    }
                    named.insert(name.clone(), g.to_vec());
                }
            }
            drop(sess);
            adam.update(model.params_mut(), &named, lr);
            log.records.push(StepRecord {
                epoch,
                step,
                lr,
                total: parts.total_value,
                base: parts.base,
                cross: parts.cross,
                distill: parts.distill,
                theta: thetas(&model),
                transpose_dev: out.stats.max_transpose_dev,
                weight_sum_dev: out.stats.max_weight_sum_dev,
                s_matrices: out.stats.s_matrices.clone(),
                d_matrices: out.stats.d_matrices.clone(),
                val_acc: None,
            });
            step += 1;
        }
        epochs_run += 1;

        if val.is_empty() {
            best = Some((f64::NAN, epoch, model.clone()));
            continue;
        }
        let acc = evaluate(&model, val)?.accuracy;
        if let Some(last) = log.records.last_mut() {
            last.val_acc = Some(acc);
        }
        // ties move the selection to the later epoch; only a strict gain resets patience
        let prev = best.as_ref().map(|(b, _, _)| *b);
        if prev.is_none_or(|b| acc >= b) {
            best = Some((acc, epoch, model.clone()));
        }
        if prev.is_none_or(|b| acc > b) {
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }
    let (acc, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_acc: (!acc.is_nan()).then_some(acc),
        epochs_run,
    })
}
