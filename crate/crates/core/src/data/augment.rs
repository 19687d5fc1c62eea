use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

/// Random crop within a padded field, small rotation and brightness jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentOptions {
    pub enabled: bool,
    /// Maximum shift in pixels of the crop window.
    pub max_shift: usize,
    /// Maximum rotation in degrees.
    pub max_degrees: f64,
    /// Maximum additive brightness change.
    pub brightness: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            enabled: false,
            max_shift: 2,
            max_degrees: 10.0,
            brightness: 0.1,
        }
    }
}

/// Augmented copy of a square image; pixels outside the source read as mid-grey.
pub fn augment<R: Rng>(image: &Tensor, opts: &AugmentOptions, rng: &mut R) -> Tensor {
    if !opts.enabled {
        return image.clone();
    }
    let n = image.shape()[0];
    let s = opts.max_shift as i64;
    let dx = rng.random_range(-s..=s) as f64;
    let dy = rng.random_range(-s..=s) as f64;
    let angle = rng.random_range(-opts.max_degrees..=opts.max_degrees).to_radians();
    let shift = rng.random_range(-opts.brightness..=opts.brightness);
    let (sin, cos) = angle.sin_cos();
    let c = (n as f64 - 1.0) / 2.0;
    let src = image.values();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // inverse map: rotate about the centre, then undo the shift; nearest neighbour
            let (u, v) = (x as f64 - c - dx, y as f64 - c - dy);
            let sx = (cos * u + sin * v + c).round();
            let sy = (-sin * u + cos * v + c).round();
            let p = if sx >= 0.0 && sy >= 0.0 && (sx as usize) < n && (sy as usize) < n {
                src[sy as usize * n + sx as usize]
            } else {
                0.5
            };
            out.push((p + shift).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![n, n], out).expect("same shape")
}
