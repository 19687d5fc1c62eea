use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Record, Split};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Everything that determines a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Number of classes.
    pub k: usize,
    /// Number of confound ids.
    pub m: usize,
    /// Probability that an image's confound is its label's partner id (`label mod m`).
    pub rho_train: f64,
    pub rho_test: f64,
    pub noise_sigma: f64,
    /// Image side in pixels.
    pub size: usize,
    /// Glyph side in pixels; also the feature-grid cell size.
    pub cell: usize,
    /// Peak-to-peak intensity of the discriminative glyph.
    pub signal_contrast: f64,
    /// Peak-to-peak intensity of the confound glyph.
    pub confound_contrast: f64,
    /// Relative class frequencies for the training split; empty means balanced.
    pub class_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 1400,
            n_test: 700,
            k: 7,
            m: 7,
            rho_train: 1.0,
            rho_test: 1.0 / 7.0,
            noise_sigma: 0.1,
            size: 56,
            cell: 8,
            signal_contrast: 0.8,
            confound_contrast: 0.8,
            class_weights: Vec::new(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn grid(&self) -> usize {
        self.size / self.cell
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, rho) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(0.0..=1.0).contains(&rho) {
                return bad(format!("{name} must lie in [0, 1], got {rho}"));
            }
            if self.m == 1 && rho < 1.0 {
                return bad(format!("{name} < 1 needs at least two confound ids"));
            }
        }
        if self.k < 2 || self.m < 1 {
            return bad(format!("need k >= 2 and m >= 1, got k = {}, m = {}", self.k, self.m));
        }
        if self.cell == 0 || !self.size.is_multiple_of(self.cell) {
            return bad(format!("size {} must be a multiple of cell {}", self.size, self.cell));
        }
        if self.grid() < 3 {
            return bad(format!("grid of {} cells per side leaves no interior cell", self.grid()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        for (name, c) in [("signal_contrast", self.signal_contrast), ("confound_contrast", self.confound_contrast)] {
            if !(0.0..=1.0).contains(&c) {
                return bad(format!("{name} must lie in [0, 1], got {c}"));
            }
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.k || self.class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())))
        {
            return bad(format!("class_weights needs {} positive entries", self.k));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DatasetSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// Train and test splits generated from one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlyphKind {
    Discriminative,
    Confound,
}

/// The `side × side` binary pattern for glyph `id`. Fixed per (kind, id); any two
/// glyphs of the same kind differ in at least a quarter of their pixels.
pub fn glyph(kind: GlyphKind, id: usize, side: usize) -> Vec<bool> {
    let stream = match kind {
        GlyphKind::Discriminative => 0x6469_7363,
        GlyphKind::Confound => 0x636f_6e66,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut made: Vec<Vec<bool>> = Vec::new();
    while made.len() <= id {
        let g: Vec<bool> = (0..side * side).map(|_| rng.random::<bool>()).collect();
        let distinct = made
            .iter()
            .all(|o| o.iter().zip(&g).filter(|(a, b)| a != b).count() * 4 >= side * side);
        if distinct {
            made.push(g);
        }
    }
    made.swap_remove(id)
}

fn interior_cells(grid: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for y in 1..grid - 1 {
        for x in 1..grid - 1 {
            v.push((x, y));
        }
    }
    v
}

fn corner_cells(grid: usize) -> [(usize, usize); 4] {
    let e = grid - 1;
    [(0, 0), (e, 0), (0, e), (e, e)]
}

/// Exact per-class counts for `n` images by largest remainder.
fn class_counts(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn stamp(px: &mut [f64], size: usize, cell: usize, at: (usize, usize), pattern: &[bool], contrast: f64) {
    for y in 0..cell {
        for x in 0..cell {
            let v = if pattern[y * cell + x] { 0.5 + contrast / 2.0 } else { 0.5 - contrast / 2.0 };
            px[(at.1 * cell + y) * size + at.0 * cell + x] = v;
        }
    }
}

fn make_split(spec: &DatasetSpec, n: usize, rho: f64, weights: &[f64], rng: &mut ChaCha8Rng) -> Split {
    let grid = spec.grid();
    let counts = class_counts(n, weights);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    labels.shuffle(rng);

    let disc_glyphs: Vec<Vec<bool>> = (0..spec.k)
        .map(|k| glyph(GlyphKind::Discriminative, k, spec.cell))
        .collect();
    let conf_glyphs: Vec<Vec<bool>> = (0..spec.m).map(|m| glyph(GlyphKind::Confound, m, spec.cell)).collect();
    let interior = interior_cells(grid);
    let corners = corner_cells(grid);

    let mut images = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for &label in &labels {
        let partner = label % spec.m;
        let confound = if spec.m == 1 || rng.random::<f64>() < rho {
            partner
        } else {
            // uniform over the other m − 1 ids
            let r = rng.random_range(0..spec.m - 1);
            if r >= partner {
                r + 1
            } else {
                r
            }
        };
        let disc = interior[rng.random_range(0..interior.len())];
        let conf = corners[rng.random_range(0..corners.len())];

        let mut px: Vec<f64> = (0..spec.size * spec.size)
            .map(|_| 0.5 + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        stamp(&mut px, spec.size, spec.cell, disc, &disc_glyphs[label], spec.signal_contrast);
        stamp(&mut px, spec.size, spec.cell, conf, &conf_glyphs[confound], spec.confound_contrast);
        // glyph pixels get noise too, then everything is clamped and stored at f32 precision
        for cell_at in [disc, conf] {
            for y in 0..spec.cell {
                for x in 0..spec.cell {
                    let i = (cell_at.1 * spec.cell + y) * spec.size + cell_at.0 * spec.cell + x;
                    px[i] += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        for v in px.iter_mut() {
            *v = f64::from(v.clamp(0.0, 1.0) as f32);
        }
        images.push(Tensor::new(vec![spec.size, spec.size], px).expect("image shape"));
        records.push(Record {
            label,
            confound,
            disc,
            conf,
        });
    }
    Split {
        size: spec.size,
        num_classes: spec.k,
        num_confounds: spec.m,
        images,
        records,
    }
}

/// Deterministic in `spec`; the test split is always class-balanced.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let balanced = vec![1.0; spec.k];
    let train_w = if spec.class_weights.is_empty() {
        balanced.clone()
    } else {
        spec.class_weights.clone()
    };
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7465_7374_0000_0000);
    Ok(Dataset {
        spec: spec.clone(),
        train: make_split(spec, spec.n_train, spec.rho_train, &train_w, &mut train_rng),
        test: make_split(spec, spec.n_test, spec.rho_test, &balanced, &mut test_rng),
    })
}

/// Plug-in estimate of I(label; confound) in nats.
pub fn mutual_information(pairs: &[(usize, usize)], k: usize, m: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut joint = vec![0.0; k * m];
    let mut pa = vec![0.0; k];
    let mut pb = vec![0.0; m];
    for &(a, b) in pairs {
        joint[a * m + b] += 1.0;
        pa[a] += 1.0;
        pb[b] += 1.0;
    }
    let mut mi = 0.0;
    for a in 0..k {
        for b in 0..m {
            let j = joint[a * m + b];
            if j > 0.0 {
                mi += j / n * (j * n / (pa[a] * pb[b])).ln();
            }
        }
    }
    mi
}

/// Accuracy of the rule "predict the class whose partner id is the image's confound".
///
/// With more classes than confound ids the rule picks the smallest such class.
pub fn confound_oracle_accuracy(split: &Split) -> f64 {
    let hits = split
        .records
        .iter()
        .filter(|r| r.confound < split.num_classes && r.confound == r.label)
        .count();
    hits as f64 / split.len().max(1) as f64
}
