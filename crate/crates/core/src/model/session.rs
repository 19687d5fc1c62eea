use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Per-forward counters and audits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphStats {
    /// Similarity matrices built, per level.
    pub s_matrices: Vec<usize>,
    /// Distance matrices built, per level.
    pub d_matrices: Vec<usize>,
    /// Largest `|M(x,y) − M(y,x)ᵀ|` seen across pairings.
    pub max_transpose_dev: f64,
    /// Largest `|Σ w − 1|` over applied softmax weights.
    pub max_weight_sum_dev: f64,
}

impl GraphStats {
    pub(crate) fn new(levels: usize) -> Self {
        Self {
            s_matrices: vec![0; levels],
            d_matrices: vec![0; levels],
            ..Default::default()
        }
    }
}

/// Binds model parameters onto one tape for one forward pass.
///
/// Parameters are bound lazily, so after a forward the bound names are exactly
/// the parameters that forward read.
pub struct Session<'m> {
    params: &'m ParamSet,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    frozen: BTreeSet<String>,
    dropout: Option<ChaCha8Rng>,
    pub stats: GraphStats,
}

impl<'m> Session<'m> {
    /// Parameters bind as differentiable leaves; dropout draws from `dropout_rng` when given.
    pub fn training(params: &'m ParamSet, dropout_rng: Option<ChaCha8Rng>) -> Self {
        Self::build(params, true, dropout_rng)
    }

    /// Parameters bind as constants; no dropout.
    pub fn inference(params: &'m ParamSet) -> Self {
        Self::build(params, false, None)
    }

    /// Use caller-provided tape variables for the named parameters (gradient checking).
    pub fn with_bindings(params: &'m ParamSet, names: &[String], vars: &[Var]) -> Self {
        let mut s = Self::build(params, true, None);
        for (n, v) in names.iter().zip(vars) {
            s.bound.insert(n.clone(), *v);
        }
        s
    }

    fn build(params: &'m ParamSet, trainable: bool, dropout: Option<ChaCha8Rng>) -> Self {
        Self {
            params,
            bound: BTreeMap::new(),
            trainable,
            frozen: BTreeSet::new(),
            dropout,
            stats: GraphStats::default(),
        }
    }

    /// Bind `name` as a constant even in a training session.
    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name:?}")))?
            .clone();
        let v = if self.trainable && !self.frozen.contains(name) {
            tape.leaf(t)
        } else {
            tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters read so far, with their tape handles.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn dropout_active(&self) -> bool {
        self.dropout.is_some()
    }

    /// `x · W + b` for the `prefix.w` / `prefix.b` pair.
    pub fn linear(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(tape, &format!("{prefix}.w"))?;
        let b = self.param(tape, &format!("{prefix}.b"))?;
        let y = tape.matmul(x, w)?;
        tape.add_row_vec(y, b)
    }

    /// Row-wise layer norm with learned gain and shift.
    pub fn layer_norm(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(tape, &format!("{prefix}.g"))?;
        let b = self.param(tape, &format!("{prefix}.b"))?;
        let n = tape.layer_norm_rows(x);
        let s = tape.mul_row_vec(n, g)?;
        tape.add_row_vec(s, b)
    }

    /// Inverted dropout; identity when the session has no dropout stream or `p == 0`.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..tape.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        tape.dropout_with_mask(x, mask)
    }

    /// Pre-norm single-head encoder block over the rows of `x`.
    pub fn encoder_block(&mut self, tape: &mut Tape, prefix: &str, x: Var, dropout: f64) -> Result<Var> {
        let width = tape.value(x).dims2().1;
        let h = self.layer_norm(tape, &format!("{prefix}.ln1"), x)?;
        let wq = self.param(tape, &format!("{prefix}.wq"))?;
        let wk = self.param(tape, &format!("{prefix}.wk"))?;
        let wv = self.param(tape, &format!("{prefix}.wv"))?;
        let wo = self.param(tape, &format!("{prefix}.wo"))?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (width as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v)?;
        let proj = tape.matmul(mixed, wo)?;
        let proj = self.dropout(tape, proj, dropout)?;
        let x = tape.add(x, proj)?;

        let h = self.layer_norm(tape, &format!("{prefix}.ln2"), x)?;
        let h = self.linear(tape, &format!("{prefix}.fc1"), h)?;
        let h = tape.gelu(h);
        let h = self.linear(tape, &format!("{prefix}.fc2"), h)?;
        let h = self.dropout(tape, h, dropout)?;
        tape.add(x, h)
    }
}
