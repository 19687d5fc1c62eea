use serde::Serialize;

/// Mean and sample standard deviation; `None` for an empty slice, sd 0 for one value.
pub fn mean_sd(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One-sided sign test of "differences are positive". Zero differences are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// `P(X ≥ positive)` for `X ~ Binomial(positive + negative, 1/2)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

fn choose(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn sign_test_greater(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|d| **d > 0.0).count();
    let negative = diffs.iter().filter(|d| **d < 0.0).count();
    let n = positive + negative;
    let p_value = if n == 0 {
        1.0
    } else {
        (positive..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
    };
    SignTest {
        positive,
        negative,
        ties: diffs.len() - n,
        p_value,
    }
}
