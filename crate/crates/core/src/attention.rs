//! Cross similarity attention.
//!
//! Two images' projected feature maps are compared position by position with
//! Euclidean distance. The resulting `l × l` interaction matrix is collapsed
//! along one axis into a single weight per spatial position of one image,
//! and those weights rescale that image's own value vectors. The scaled
//! dot-product cross-attention and cosine-similarity baselines live here too.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Spatial feature vectors of one image at one abstraction level, `l × c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub level: usize,
}

impl FeatureMap {
    pub fn new(var: Var, level: usize) -> Self {
        Self { var, level }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MatrixKind {
    Distance,
    Similarity,
}

/// `l × l` matrix of pairwise relations; rows index the query image, columns the key image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InteractionMatrix {
    pub var: Var,
    pub kind: MatrixKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    /// Positions of the key image (columns).
    Key,
    /// Positions of the query image (rows).
    Query,
}

/// Length-`l` raw (pre-softmax) weights for the positions of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialWeights {
    pub var: Var,
    pub side: Side,
}

fn check_pair(tape: &Tape, op: &'static str, q: FeatureMap, k: FeatureMap) -> Result<()> {
    if q.level != k.level {
        return Err(Error::Contract(format!(
            "{op}: features from level {} and level {} cannot interact",
            q.level, k.level
        )));
    }
    let (sq, sk) = (tape.shape(q.var), tape.shape(k.var));
    if sq != sk {
        return Err(Error::dim(op, format!("{sq:?} vs {sk:?}")));
    }
    Ok(())
}

/// Raw Euclidean distance matrix `D(q, k)`.
pub fn distance_matrix(tape: &mut Tape, q: FeatureMap, k: FeatureMap) -> Result<InteractionMatrix> {
    check_pair(tape, "distance_matrix", q, k)?;
    let var = tape.pairwise_euclidean(q.var, k.var)?;
    Ok(InteractionMatrix {
        var,
        kind: MatrixKind::Distance,
    })
}

/// `S = max(D) − D` with the maximum taken over the whole matrix.
pub fn similarity_matrix(tape: &mut Tape, q: FeatureMap, k: FeatureMap) -> Result<InteractionMatrix> {
    let d = distance_matrix(tape, q, k)?;
    Ok(similarity_from_distance(tape, d))
}

pub fn similarity_from_distance(tape: &mut Tape, d: InteractionMatrix) -> InteractionMatrix {
    debug_assert_eq!(d.kind, MatrixKind::Distance);
    InteractionMatrix {
        var: tape.max_minus(d.var),
        kind: MatrixKind::Similarity,
    }
}

/// Row-normalize (L2) and sum down each column: one weight per key-image position.
pub fn aggregate_key_side(tape: &mut Tape, m: InteractionMatrix) -> SpatialWeights {
    let normed = tape.l2_normalize_rows(m.var);
    SpatialWeights {
        var: tape.sum_axis0(normed),
        side: Side::Key,
    }
}

/// Column-normalize (L2) and sum across each row: one weight per query-image position.
pub fn aggregate_query_side(tape: &mut Tape, m: InteractionMatrix) -> SpatialWeights {
    let t = tape.transpose(m.var);
    let normed_t = tape.l2_normalize_rows(t);
    let normed = tape.transpose(normed_t);
    SpatialWeights {
        var: tape.sum_axis1(normed),
        side: Side::Query,
    }
}

/// Output of [`apply_spatial_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `l × d′` reweighted values.
    pub out: Var,
    /// Softmax-normalized weights (sum to one), length `l`.
    pub weights: Var,
}

/// Softmax the raw weights over the whole spatial dimension and rescale row `i`
/// of `v` by `l · w_i`, so a uniform weight vector leaves `v` unchanged.
pub fn apply_spatial_attention(tape: &mut Tape, raw: SpatialWeights, v: Var) -> Result<Attended> {
    let l = tape.value(raw.var).len();
    let rows = tape.value(v).dims2().0;
    if l != rows || tape.shape(v).len() != 2 {
        return Err(Error::dim(
            "apply_spatial_attention",
            format!("{l} weights for values {:?}", tape.shape(v)),
        ));
    }
    let scaled = tape.softmax_vec_scaled(raw.var, l as f64);
    let out = tape.scale_rows(v, scaled)?;
    let weights = tape.scale(scaled, 1.0 / l as f64);
    Ok(Attended { out, weights })
}

/// `softmax(q·kᵀ / √d) · v`, row-wise softmax.
pub fn sdpa_cross_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 2 || sq != sk || sv.len() != 2 || sv[0] != sk[0] {
        return Err(Error::dim("sdpa_cross_attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
    }
    let d = sq[1] as f64;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / d.sqrt());
    let w = tape.softmax_rows(scaled);
    tape.matmul(w, v)
}

/// Entry `(i, j)` is the cosine between row `i` of `q` and row `j` of `k`
/// (zero rows stay zero through the normalization floor).
pub fn cosine_similarity_matrix(tape: &mut Tape, q: Var, k: Var) -> Result<InteractionMatrix> {
    if tape.shape(q).len() != 2 || tape.shape(q)[1..] != tape.shape(k)[1..] {
        return Err(Error::dim(
            "cosine_similarity_matrix",
            format!("{:?} vs {:?}", tape.shape(q), tape.shape(k)),
        ));
    }
    let qn = tape.l2_normalize_rows(q);
    let kn = tape.l2_normalize_rows(k);
    let knt = tape.transpose(kn);
    Ok(InteractionMatrix {
        var: tape.matmul(qn, knt)?,
        kind: MatrixKind::Similarity,
    })
}

/// Plain dot-product interaction `q·kᵀ` (unscaled), for comparison with the similarity forms.
pub fn dot_product_matrix(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let kt = tape.transpose(k);
    tape.matmul(q, kt)
}
