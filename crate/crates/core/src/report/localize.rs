//! Scores where the cross attention puts its mass relative to the planted glyph cells.

use serde::Serialize;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{Model, PairMaps, LEVELS};

/// Softmax over the whole vector, as the attention applies it.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LocalizationScore {
    pub same_class_pairs: usize,
    /// Same-class pairs whose key-side S mass on the key image's discriminative cell exceeds `1/l`.
    pub s_above_uniform: usize,
    pub cross_class_pairs: usize,
    /// Cross-class pairs whose key-side D mass on the key image's confound cell exceeds `1/l`.
    pub d_above_uniform: usize,
}

impl LocalizationScore {
    pub fn s_fraction(&self) -> f64 {
        self.s_above_uniform as f64 / self.same_class_pairs.max(1) as f64
    }

    pub fn d_fraction(&self) -> f64 {
        self.d_above_uniform as f64 / self.cross_class_pairs.max(1) as f64
    }
}

/// Attention weights averaged over the levels for one side of one map kind.
fn level_mean(maps: &[PairMaps], pick: impl Fn(&PairMaps) -> &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; pick(&maps[0]).len()];
    for m in maps {
        for (a, w) in acc.iter_mut().zip(softmax(pick(m))) {
            *a += w / maps.len() as f64;
        }
    }
    acc
}

/// Pair every test image (as key) with the next image of the same class and the
/// next image of a different class (as queries), up to `max_pairs` keys.
///
/// The model's feature grid must coincide with the dataset's glyph grid.
pub fn score_localization(model: &Model, split: &Split, max_pairs: usize) -> Result<LocalizationScore> {
    let grid = model.config().grid();
    if split.size != model.config().image_size {
        return Err(Error::Config("split and model image sizes differ".into()));
    }
    if split.records.iter().any(|r| r.disc.0 >= grid || r.disc.1 >= grid || r.conf.0 >= grid || r.conf.1 >= grid) {
        return Err(Error::Config(format!(
            "glyph cells fall outside the model's {grid}x{grid} feature grid"
        )));
    }
    let l = grid * grid;
    let uniform = 1.0 / l as f64;
    let n = split.len();
    let mut score = LocalizationScore {
        same_class_pairs: 0,
        s_above_uniform: 0,
        cross_class_pairs: 0,
        d_above_uniform: 0,
    };
    let maps = |ki: usize, qi: usize| -> Result<Vec<PairMaps>> {
        (0..LEVELS)
            .map(|lv| model.pair_maps(&split.images[ki], &split.images[qi], lv))
            .collect()
    };
    for ki in 0..n.min(max_pairs) {
        let rec = split.records[ki];
        let next = |same: bool| (1..n).map(|o| (ki + o) % n).find(|&j| (split.records[j].label == rec.label) == same);
        if let Some(qi) = next(true) {
            let w = level_mean(&maps(ki, qi)?, |m| &m.s_key);
            score.same_class_pairs += 1;
            if w[rec.disc.1 * grid + rec.disc.0] > uniform {
                score.s_above_uniform += 1;
            }
        }
        if let Some(qi) = next(false) {
            let w = level_mean(&maps(ki, qi)?, |m| &m.d_key);
            score.cross_class_pairs += 1;
            if w[rec.conf.1 * grid + rec.conf.0] > uniform {
                score.d_above_uniform += 1;
            }
        }
    }
    Ok(score)
}
