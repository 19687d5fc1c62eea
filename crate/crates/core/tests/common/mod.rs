//! Brute-force reference implementations shared by the oracle and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn euclid(q: &Mat, k: &Mat) -> Mat {
    let mut d = vec![vec![0.0; k.len()]; q.len()];
    for i in 0..q.len() {
        for j in 0..k.len() {
            let mut s = 0.0;
            for c in 0..q[i].len() {
                s += (q[i][c] - k[j][c]) * (q[i][c] - k[j][c]);
            }
            d[i][j] = s.sqrt();
        }
    }
    d
}

pub fn global_max(m: &Mat) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for row in m {
        for &x in row {
            if x > best {
                best = x;
            }
        }
    }
    best
}

pub fn global_min(m: &Mat) -> f64 {
    let mut best = f64::INFINITY;
    for row in m {
        for &x in row {
            if x < best {
                best = x;
            }
        }
    }
    best
}

pub fn similarity(q: &Mat, k: &Mat) -> Mat {
    let d = euclid(q, k);
    let m = global_max(&d);
    d.iter().map(|r| r.iter().map(|x| m - x).collect()).collect()
}

pub fn shifted_distance(q: &Mat, k: &Mat) -> Mat {
    let d = euclid(q, k);
    let m = global_min(&d);
    d.iter().map(|r| r.iter().map(|x| x - m).collect()).collect()
}

/// Normalize each row to unit L2 norm (floor 1e-12), then sum every column.
pub fn key_side(m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    let mut out = vec![0.0; cols];
    for row in m {
        let mut n = 0.0;
        for x in row {
            n += x * x;
        }
        let n = f64::max(n.sqrt(), 1e-12);
        for j in 0..cols {
            out[j] += row[j] / n;
        }
    }
    out
}

/// Normalize each column to unit L2 norm, then sum every row.
pub fn query_side(m: &Mat) -> Vec<f64> {
    let rows = m.len();
    let cols = m[0].len();
    let mut norms = vec![0.0; cols];
    for j in 0..cols {
        let mut n = 0.0;
        for i in 0..rows {
            n += m[i][j] * m[i][j];
        }
        norms[j] = f64::max(n.sqrt(), 1e-12);
    }
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        for j in 0..cols {
            out[i] += m[i][j] / norms[j];
        }
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = Vec::new();
    let mut z = 0.0;
    for x in v {
        let y = (x - m).exp();
        z += y;
        e.push(y);
    }
    e.iter().map(|x| x / z).collect()
}

/// Row `i` of `v` scaled by `l · softmax(raw)_i`.
pub fn spatial_attention(raw: &[f64], v: &Mat) -> Mat {
    let w = softmax(raw);
    let l = raw.len() as f64;
    v.iter().enumerate().map(|(i, row)| row.iter().map(|x| l * w[i] * x).collect()).collect()
}

pub fn fuse(s: &[f64], d: &[f64], gamma: f64, theta: f64) -> Vec<f64> {
    let g = 1.0 + (gamma * theta).tanh();
    s.iter().zip(d).map(|(a, b)| a + g * b).collect()
}

pub fn sdpa(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for i in 0..q.len() {
        let logits: Vec<f64> = k
            .iter()
            .map(|kr| q[i].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let w = softmax(&logits);
        for (j, vr) in v.iter().enumerate() {
            for c in 0..vr.len() {
                out[i][c] += w[j] * vr[c];
            }
        }
    }
    out
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
    v.iter().map(|x| x - m - z.ln()).collect()
}

pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        s -= log_softmax(row)[y];
    }
    s / labels.len() as f64
}

pub fn kl(student: &Mat, teacher: &Mat) -> f64 {
    let mut s = 0.0;
    for (sr, tr) in student.iter().zip(teacher) {
        let (lq, lp) = (log_softmax(sr), log_softmax(tr));
        for j in 0..sr.len() {
            s += lp[j].exp() * (lp[j] - lq[j]);
        }
    }
    s / student.len() as f64
}

pub fn mse(a: &Mat, b: &Mat) -> f64 {
    let (fa, fb) = (flat(a), flat(b));
    fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / fa.len() as f64
}

pub fn cosine(q: &Mat, k: &Mat) -> Mat {
    let norm = |r: &Vec<f64>| f64::max(r.iter().map(|x| x * x).sum::<f64>().sqrt(), 1e-12);
    q.iter()
        .map(|a| {
            k.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b)))
                .collect()
        })
        .collect()
}

pub fn dot(q: &Mat, k: &Mat) -> Mat {
    q.iter()
        .map(|a| k.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// Whether entry `i` attains the row maximum (ties allowed).
pub fn diagonal_is_row_max(row: &[f64], i: usize) -> bool {
    row.iter().all(|x| *x <= row[i])
}

pub fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = j;
        }
    }
    best
}

use csim::attention::{
    aggregate_key_side, aggregate_query_side, apply_spatial_attention, cosine_similarity_matrix, distance_matrix,
    sdpa_cross_attention, similarity_matrix, FeatureMap, Side, SpatialWeights,
};
use csim::autograd::{Tape, Tensor, Var};
use csim::fusion::{fuse_sd, min_shift_distance, FusionParams};

fn put(tape: &mut Tape, m: &Mat) -> Var {
    tape.constant(Tensor::from_rows(m).unwrap())
}

fn vals(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).values().to_vec()
}

/// Largest absolute deviation between each library op and its brute-force oracle over
/// `instances` random problems with `l` and `c` drawn from 1..=16.
pub fn oracle_deviations(instances: u64) -> Vec<(&'static str, f64)> {
    let names = [
        "pairwise_euclidean",
        "similarity",
        "key_side_s",
        "query_side_s",
        "key_side_d",
        "query_side_d",
        "spatial_attention",
        "sd_fusion",
        "sdpa",
        "cross_entropy",
        "kl_divergence",
        "mse_loss",
        "cosine",
    ];
    let mut worst = vec![0.0f64; names.len()];
    for seed in 0..instances {
        let mut r = rng(seed ^ 0x6f72_6163);
        let l = r.random_range(1..=16);
        let c = r.random_range(1..=16);
        let (q, k, v) = (random_mat(&mut r, l, c), random_mat(&mut r, l, c), random_mat(&mut r, l, c));
        let (q2, k2) = (random_mat(&mut r, l, c), random_mat(&mut r, l, c));
        let theta = r.random_range(-2.0..2.0);
        let gamma = r.random_range(0.1..3.0);
        let labels: Vec<usize> = (0..l).map(|_| r.random_range(0..c)).collect();

        let mut t = Tape::new();
        let (vq, vk, vv) = (put(&mut t, &q), put(&mut t, &k), put(&mut t, &v));
        let (vq2, vk2) = (put(&mut t, &q2), put(&mut t, &k2));
        let fq = FeatureMap::new(vq, 0);
        let fk = FeatureMap::new(vk, 0);
        let dm = distance_matrix(&mut t, fq, fk).unwrap();
        let sm = similarity_matrix(&mut t, fq, fk).unwrap();
        let ks = aggregate_key_side(&mut t, sm);
        let qs = aggregate_query_side(&mut t, sm);
        let dd = distance_matrix(&mut t, FeatureMap::new(vq2, 0), FeatureMap::new(vk2, 0)).unwrap();
        let shifted = min_shift_distance(&mut t, dd);
        let kd = aggregate_key_side(&mut t, shifted);
        let qd = aggregate_query_side(&mut t, shifted);
        let att = apply_spatial_attention(&mut t, ks, vv).unwrap();
        let th = t.leaf(Tensor::scalar(theta));
        let fused = fuse_sd(&mut t, ks, kd, FusionParams::new(gamma, th).unwrap()).unwrap();
        let sd = sdpa_cross_attention(&mut t, vq, vk, vv).unwrap();
        let ce = t.cross_entropy(vq, &labels).unwrap();
        let klv = t.kl_divergence(vq, vk).unwrap();
        let ms = t.mse_loss(vq, vk).unwrap();
        let cs = cosine_similarity_matrix(&mut t, vq, vk).unwrap();

        let s_ref = similarity(&q, &k);
        let d_ref = shifted_distance(&q2, &k2);
        let ks_ref = key_side(&s_ref);
        let kd_ref = key_side(&d_ref);
        let checks: [(Vec<f64>, Vec<f64>); 13] = [
            (vals(&t, dm.var), flat(&euclid(&q, &k))),
            (vals(&t, sm.var), flat(&s_ref)),
            (vals(&t, ks.var), ks_ref.clone()),
            (vals(&t, qs.var), query_side(&s_ref)),
            (vals(&t, kd.var), kd_ref.clone()),
            (vals(&t, qd.var), query_side(&d_ref)),
            (vals(&t, att.out), flat(&spatial_attention(&ks_ref, &v))),
            (vals(&t, fused.var), fuse(&ks_ref, &kd_ref, gamma, theta)),
            (vals(&t, sd), flat(&sdpa(&q, &k, &v))),
            (vals(&t, ce), vec![cross_entropy(&q, &labels)]),
            (vals(&t, klv), vec![kl(&q, &k)]),
            (vals(&t, ms), vec![mse(&q, &k)]),
            (vals(&t, cs.var), flat(&cosine(&q, &k))),
        ];
        for (w, (got, want)) in worst.iter_mut().zip(checks) {
            *w = w.max(max_abs_diff(&got, &want));
        }
    }
    names.into_iter().zip(worst).collect()
}

/// Raw weights wrapped for [`apply_spatial_attention`].
pub fn raw_weights(tape: &mut Tape, v: &[f64]) -> SpatialWeights {
    SpatialWeights {
        var: tape.constant(Tensor::vector(v.to_vec())),
        side: Side::Key,
    }
}
