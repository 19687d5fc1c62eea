//! Define-by-run reverse-mode tape.
//!
//! Every forward primitive appends a node whose output is fully materialized.
//! `backward` walks the nodes in reverse creation order and accumulates
//! vector-Jacobian products into per-node gradient buffers. A tape is built
//! fresh for every forward pass and dropped afterwards.

use super::kernels::{self, gemm, gemm_at_acc, gemm_bt_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Guard inside the square root of the Euclidean-distance backward rule.
pub const DIST_EPS: f64 = 1e-12;
/// Floor on row norms in [`Tape::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;
/// Variance guard for [`Tape::layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for gradient checking.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Scales the tanh derivative by 1.1.
    Tanh,
    /// Drops the `Bᵀ` factor's contribution to `dA` on every other column.
    MatMul,
    /// Uses `y·g` instead of the softmax Jacobian product.
    Softmax,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis0(Var),
    SumAxis1(Var),
    MeanAxis0(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    PairwiseEuclidean(Var, Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SoftmaxVec { x: Var, scale: f64 },
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    ExtremumMinus { x: Var, idx: usize },
    MinusExtremum { x: Var, idx: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDiv { student: Var, teacher_probs: Vec<f64>, student_probs: Vec<f64> },
    Mse(Var, Var),
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Fault,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) || value.is_finite(),
            "non-finite output from {op:?} on finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::new(shape, values).expect("kernel produced inconsistent shape")
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.vals(a), self.vals(b), m, k, n);
        Ok(self.push(Self::make(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        Self::make(self.shape(a).to_vec(), out)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let out = self.vals(a).iter().map(|&x| f(x)).collect();
        Self::make(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::AddConst(a), &[a])
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).len() != n {
            return Err(Error::dim("add_row_vec", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let (xv, bv) = (self.vals(x), self.vals(b));
        let out = (0..m * n).map(|i| xv[i] + bv[i % n]).collect();
        let t = Self::make(self.shape(x).to_vec(), out);
        Ok(self.push(t, Op::AddRowVec(x, b), &[x, b]))
    }

    /// `x[m×n] ⊙ g[n]`, broadcasting `g` over rows.
    pub fn mul_row_vec(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(g).len() != n {
            return Err(Error::dim("mul_row_vec", format!("{:?} * {:?}", self.shape(x), self.shape(g))));
        }
        let (xv, gv) = (self.vals(x), self.vals(g));
        let out = (0..m * n).map(|i| xv[i] * gv[i % n]).collect();
        let t = Self::make(self.shape(x).to_vec(), out);
        Ok(self.push(t, Op::MulRowVec(x, g), &[x, g]))
    }

    /// Row `i` of `x[m×n]` multiplied by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(w).len() != m {
            return Err(Error::dim("scale_rows", format!("{:?} rows vs weights {:?}", self.shape(x), self.shape(w))));
        }
        let (xv, wv) = (self.vals(x), self.vals(w));
        let out = (0..m * n).map(|i| xv[i] * wv[i / n]).collect();
        let t = Self::make(self.shape(x).to_vec(), out);
        Ok(self.push(t, Op::ScaleRows(x, w), &[x, w]))
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.vals(s)[0];
        let t = self.map(x, |v| v * sv);
        Ok(self.push(t, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows", "no inputs"));
        };
        let n = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::dim("concat_rows", format!("column count {c} vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.vals(p));
        }
        let t = Self::make(vec![rows, n], out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let m = self.dims(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.vals(p)[i * w..(i + 1) * w]);
            }
        }
        let t = Self::make(vec![m, n], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.vals(x)[start * n..(start + len) * n].to_vec();
        let t = Self::make(vec![len, n], out);
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let xv = self.vals(x);
        let out = (0..m).flat_map(|i| xv[i * n + start..i * n + start + len].iter().copied()).collect();
        let t = Self::make(vec![m, len], out);
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.vals(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.vals(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column sums of `x[m×n]` as a length-`n` vector.
    pub fn sum_axis0(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.vals(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            add_into(&mut out, &xv[i * n..(i + 1) * n]);
        }
        self.push(Tensor::vector(out), Op::SumAxis0(x), &[x])
    }

    /// Row sums of `x[m×n]` as a length-`m` vector.
    pub fn sum_axis1(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.vals(x);
        let out = (0..m).map(|i| xv[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Tensor::vector(out), Op::SumAxis1(x), &[x])
    }

    /// Column means of `x[m×n]` (global average pooling over positions).
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.vals(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            add_into(&mut out, &xv[i * n..(i + 1) * n]);
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        self.push(Tensor::vector(out), Op::MeanAxis0(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    /// Entry `(i, j)` is the Euclidean distance between row `i` of `q` and row `j` of `k`.
    pub fn pairwise_euclidean(&mut self, q: Var, k: Var) -> Result<Var> {
        let ((lq, cq), (lk, ck)) = (self.dims(q), self.dims(k));
        if cq != ck || self.shape(q).len() != 2 || self.shape(k).len() != 2 {
            return Err(Error::dim(
                "pairwise_euclidean",
                format!("{:?} vs {:?}", self.shape(q), self.shape(k)),
            ));
        }
        let (qv, kv) = (self.vals(q), self.vals(k));
        let mut out = vec![0.0; lq * lk];
        for i in 0..lq {
            let qi = &qv[i * cq..(i + 1) * cq];
            for j in 0..lk {
                let kj = &kv[j * cq..(j + 1) * cq];
                let d2: f64 = qi.iter().zip(kj).map(|(a, b)| (a - b) * (a - b)).sum();
                out[i * lk + j] = d2.sqrt();
            }
        }
        let t = Self::make(vec![lq, lk], out);
        Ok(self.push(t, Op::PairwiseEuclidean(q, k), &[q, k]))
    }

    /// Divide each row by `max(‖row‖₂, NORM_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.vals(x);
        let norms: Vec<f64> = (0..m)
            .map(|i| xv[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = (0..m * n).map(|i| xv[i] / norms[i / n].max(NORM_EPS)).collect();
        let t = Self::make(self.shape(x).to_vec(), out);
        self.push(t, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Softmax over every entry of `x`, treated as one vector.
    pub fn softmax_vec(&mut self, x: Var) -> Var {
        self.softmax_vec_scaled(x, 1.0)
    }

    /// `scale · softmax(x)`, computed as `e_i / (Σe / scale)` so a uniform input
    /// with `scale == n` yields exactly one in every entry.
    pub fn softmax_vec_scaled(&mut self, x: Var, scale: f64) -> Var {
        let xv = self.vals(x);
        let max = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
        let denom = e.iter().sum::<f64>() / scale;
        let out = e.iter().map(|v| v / denom).collect();
        let t = Self::make(self.shape(x).to_vec(), out);
        self.push(t, Op::SoftmaxVec { x, scale }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, n) = self.dims(x);
        let mut out = self.vals(x).to_vec();
        out.chunks_mut(n).for_each(kernels::softmax_in_place);
        let t = Self::make(self.shape(x).to_vec(), out);
        self.push(t, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.vals(x);
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = r;
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * r;
            }
        }
        let t = Self::make(self.shape(x).to_vec(), out);
        self.push(t, Op::LayerNormRows { x, inv_std }, &[x])
    }

    /// `max(x) − x` with the global maximum taken over all entries.
    ///
    /// The gradient routes through the maximizing entry.
    pub fn max_minus(&mut self, x: Var) -> Var {
        let xv = self.vals(x);
        let idx = argext(xv, |a, b| a > b);
        let m = xv[idx];
        let t = self.map(x, |v| m - v);
        self.push(t, Op::ExtremumMinus { x, idx }, &[x])
    }

    /// `x − min(x)` with the global minimum taken over all entries.
    ///
    /// The gradient routes through the minimizing entry.
    pub fn minus_min(&mut self, x: Var) -> Var {
        let xv = self.vals(x);
        let idx = argext(xv, |a, b| a < b);
        let m = xv[idx];
        let t = self.map(x, |v| v - m);
        self.push(t, Op::MinusExtremum { x, idx }, &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` row-wise.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.dims(logits);
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", format!("{b} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index(format!("label {bad} outside [0, {k})")));
        }
        let lv = self.vals(logits);
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let ls = kernels::log_softmax(&lv[i * k..(i + 1) * k]);
            loss -= ls[y];
            probs.extend(ls.iter().map(|v| v.exp()));
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Batch mean of `KL(softmax(teacher) ‖ softmax(student))`; the teacher receives no gradient.
    pub fn kl_divergence(&mut self, student: Var, teacher: Var) -> Result<Var> {
        self.same_shape("kl_divergence", student, teacher)?;
        let (b, k) = self.dims(student);
        let (sv, tv) = (self.vals(student), self.vals(teacher));
        let mut teacher_probs = Vec::with_capacity(b * k);
        let mut student_probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for i in 0..b {
            let lp = kernels::log_softmax(&tv[i * k..(i + 1) * k]);
            let lq = kernels::log_softmax(&sv[i * k..(i + 1) * k]);
            for j in 0..k {
                let p = lp[j].exp();
                if p > 0.0 {
                    loss += p * (lp[j] - lq[j]);
                }
                teacher_probs.push(p);
                student_probs.push(lq[j].exp());
            }
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            t,
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            },
            &[student],
        ))
    }

    /// Mean squared elementwise difference. Detach `b` to use it as a fixed target.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let (av, bv) = (self.vals(a), self.vals(b));
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    /// Inverted dropout with a caller-supplied keep mask (entries 0 or `1/(1-p)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("dropout", "mask length"));
        }
        let out = self.vals(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Self::make(self.shape(x).to_vec(), out);
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let y = node.value.values();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                let (av, bv) = (self.vals(a), self.vals(b));
                let fault = self.fault == Fault::MatMul;
                acc(a, grads, &|da| {
                    if fault {
                        let mut tmp = vec![0.0; m * k];
                        gemm_bt_acc(g, bv, &mut tmp, m, n, k);
                        for (i, t) in tmp.iter().enumerate() {
                            if i % 2 == 0 {
                                da[i] += t;
                            }
                        }
                    } else {
                        gemm_bt_acc(g, bv, da, m, n, k);
                    }
                });
                acc(b, grads, &|db| gemm_at_acc(av, g, db, m, k, n));
            }
            &Op::Add(a, b) => {
                acc(a, grads, &|d| add_into(d, g));
                acc(b, grads, &|d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, grads, &|d| add_into(d, g));
                acc(b, grads, &|d| d.iter_mut().zip(g).for_each(|(x, gv)| *x -= gv));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.vals(a), self.vals(b));
                acc(a, grads, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(b, grads, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, grads, &|d| d.iter_mut().zip(g).for_each(|(x, gv)| *x += c * gv)),
            &Op::AddConst(a) | &Op::Reshape(a) => acc(a, grads, &|d| add_into(d, g)),
            &Op::AddRowVec(x, b) => {
                let n = self.dims(x).1;
                acc(x, grads, &|d| add_into(d, g));
                acc(b, grads, &|d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
            }
            &Op::MulRowVec(x, s) => {
                let n = self.dims(x).1;
                let (xv, sv) = (self.vals(x), self.vals(s));
                acc(x, grads, &|d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += gv * sv[i % n];
                    }
                });
                acc(s, grads, &|d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv * xv[i];
                    }
                });
            }
            &Op::ScaleRows(x, w) => {
                let n = self.dims(x).1;
                let (xv, wv) = (self.vals(x), self.vals(w));
                acc(x, grads, &|d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += gv * wv[i / n];
                    }
                });
                acc(w, grads, &|d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i / n] += gv * xv[i];
                    }
                });
            }
            &Op::MulScalar(x, s) => {
                let (xv, sv) = (self.vals(x), self.vals(s)[0]);
                acc(x, grads, &|d| d.iter_mut().zip(g).for_each(|(v, gv)| *v += gv * sv));
                acc(s, grads, &|d| d[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
            }
            &Op::Transpose(x) => {
                let (r, c) = self.dims(x);
                acc(x, grads, &|d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    let off = offset;
                    acc(p, grads, &|d| add_into(d, &g[off..off + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
                let mut col = 0;
                for &p in parts {
                    let (m, w) = self.dims(p);
                    let c0 = col;
                    acc(p, grads, &|d| {
                        for i in 0..m {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + c0..i * total + c0 + w]);
                        }
                    });
                    col += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let n = self.dims(x).1;
                acc(x, grads, &|d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = self.dims(x);
                let w = g.len() / m;
                acc(x, grads, &|d| {
                    for i in 0..m {
                        add_into(&mut d[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            &Op::Sum(x) => acc(x, grads, &|d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(x, grads, &|d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            &Op::SumAxis0(x) => {
                let n = self.dims(x).1;
                acc(x, grads, &|d| d.iter_mut().enumerate().for_each(|(i, v)| *v += g[i % n]));
            }
            &Op::SumAxis1(x) => {
                let n = self.dims(x).1;
                acc(x, grads, &|d| d.iter_mut().enumerate().for_each(|(i, v)| *v += g[i / n]));
            }
            &Op::MeanAxis0(x) => {
                let (m, n) = self.dims(x);
                acc(x, grads, &|d| d.iter_mut().enumerate().for_each(|(i, v)| *v += g[i % n] / m as f64));
            }
            &Op::Tanh(x) => {
                let k = if self.fault == Fault::Tanh { 1.1 } else { 1.0 };
                acc(x, grads, &|d| {
                    for i in 0..d.len() {
                        d[i] += k * g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.vals(x);
                acc(x, grads, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = self.vals(x);
                acc(x, grads, &|d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            &Op::PairwiseEuclidean(q, k) => {
                let (lq, c) = self.dims(q);
                let lk = self.dims(k).0;
                let (qv, kv) = (self.vals(q), self.vals(k));
                // coefficient g_ij / sqrt(d_ij² + eps) shared by both sides
                let coef: Vec<f64> = (0..lq * lk).map(|i| g[i] / (y[i] * y[i] + DIST_EPS).sqrt()).collect();
                acc(q, grads, &|d| {
                    for i in 0..lq {
                        for j in 0..lk {
                            let w = coef[i * lk + j];
                            for ch in 0..c {
                                d[i * c + ch] += w * (qv[i * c + ch] - kv[j * c + ch]);
                            }
                        }
                    }
                });
                acc(k, grads, &|d| {
                    for i in 0..lq {
                        for j in 0..lk {
                            let w = coef[i * lk + j];
                            for ch in 0..c {
                                d[j * c + ch] -= w * (qv[i * c + ch] - kv[j * c + ch]);
                            }
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = self.dims(*x).1;
                acc(*x, grads, &|d| {
                    for (i, &norm) in norms.iter().enumerate() {
                        let row = i * n..(i + 1) * n;
                        if norm > NORM_EPS {
                            let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                            for j in row {
                                d[j] += (g[j] - y[j] * dot) / norm;
                            }
                        } else {
                            for j in row {
                                d[j] += g[j] / NORM_EPS;
                            }
                        }
                    }
                });
            }
            &Op::SoftmaxVec { x, scale } => {
                let fault = self.fault == Fault::Softmax;
                acc(x, grads, &|d| softmax_backward(y, g, d, scale, fault));
            }
            &Op::SoftmaxRows(x) => {
                let n = self.dims(x).1;
                let fault = self.fault == Fault::Softmax;
                acc(x, grads, &|d| {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                        softmax_backward(yr, gr, dr, 1.0, fault);
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = self.dims(*x).1;
                acc(*x, grads, &|d| {
                    for (i, &r) in inv_std.iter().enumerate() {
                        let row = i * n..(i + 1) * n;
                        let gr = &g[row.clone()];
                        let yr = &y[row.clone()];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, dj) in row.enumerate() {
                            d[dj] += r * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                });
            }
            &Op::ExtremumMinus { x, idx } => {
                let total: f64 = g.iter().sum();
                acc(x, grads, &|d| {
                    d.iter_mut().zip(g).for_each(|(v, gv)| *v -= gv);
                    d[idx] += total;
                });
            }
            &Op::MinusExtremum { x, idx } => {
                let total: f64 = g.iter().sum();
                acc(x, grads, &|d| {
                    add_into(d, g);
                    d[idx] -= total;
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.dims(*logits).1;
                let b = labels.len() as f64;
                acc(*logits, grads, &|d| {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == lab { 1.0 } else { 0.0 };
                            d[i * k + j] += g[0] * (probs[i * k + j] - onehot) / b;
                        }
                    }
                });
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            } => {
                let b = self.dims(*student).0 as f64;
                acc(*student, grads, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[0] * (student_probs[i] - teacher_probs[i]) / b;
                    }
                });
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (self.vals(a), self.vals(b));
                let n = av.len() as f64;
                acc(a, grads, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[0] * 2.0 * (av[i] - bv[i]) / n;
                    }
                });
                acc(b, grads, &|d| {
                    for i in 0..d.len() {
                        d[i] -= g[0] * 2.0 * (av[i] - bv[i]) / n;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, grads, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
        }
    }
}

/// Backward of `y = scale · softmax(x)`.
fn softmax_backward(y: &[f64], g: &[f64], d: &mut [f64], scale: f64, fault: bool) {
    if fault {
        for i in 0..d.len() {
            d[i] += y[i] * g[i];
        }
        return;
    }
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / scale;
    for i in 0..d.len() {
        d[i] += y[i] * (g[i] - dot);
    }
}

/// First index whose value beats every other under `better`.
fn argext(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if better(x, v[best]) {
            best = i;
        }
    }
    best
}
