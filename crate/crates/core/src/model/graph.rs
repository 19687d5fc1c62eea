use std::collections::BTreeMap;

use super::config::{AttentionKind, ModelConfig, ResidualKind, Topology, LEVELS};
use super::params::{init_params, ParamSet};
use super::session::{GraphStats, Session};
use crate::attention::{
    aggregate_key_side, aggregate_query_side, apply_spatial_attention, distance_matrix, sdpa_cross_attention,
    similarity_from_distance, FeatureMap, MatrixKind, SpatialWeights,
};
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{min_shift_distance, select_matrix_mode, FusionParams, MatrixMode};

/// Branch roles in input order.
pub const ANCHOR: usize = 0;
pub const POS: usize = 1;
pub const NEG: usize = 2;
pub const NEG2: usize = 3;

/// One interaction matrix between two branches.
///
/// The matrix is `M(Q_query, K_key)`: rows index the query branch, columns the
/// key branch. Key-side aggregation weights the key branch, query-side the query branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pairing {
    pub key: usize,
    pub query: usize,
    pub kind: MatrixKind,
    /// Projection producing both Q and K for this pairing.
    pub qk: &'static str,
    /// Gate parameter for distance pairings.
    pub theta: Option<&'static str>,
}

const fn pairing(key: usize, query: usize, kind: MatrixKind, qk: &'static str, theta: Option<&'static str>) -> Pairing {
    Pairing {
        key,
        query,
        kind,
        qk,
        theta,
    }
}

/// The pairings wired for `topology`, before matrix-mode filtering.
pub fn pairings(topology: Topology) -> Vec<Pairing> {
    use MatrixKind::{Distance, Similarity};
    match topology {
        Topology::Baseline => vec![],
        Topology::Dcs => vec![pairing(ANCHOR, POS, Similarity, "cross.qk", None)],
        Topology::Qcs => vec![
            pairing(ANCHOR, POS, Similarity, "cross.qk", None),
            pairing(POS, NEG, Distance, "cross.qk", Some("fusion.theta.0")),
            pairing(NEG, NEG2, Similarity, "cross.qk", None),
            pairing(NEG2, ANCHOR, Distance, "cross.qk", Some("fusion.theta.1")),
        ],
        Topology::TripletControl => vec![
            pairing(ANCHOR, POS, Similarity, "cross.qk", None),
            pairing(NEG, ANCHOR, Distance, "cross_d.qk", Some("fusion.theta.0")),
        ],
    }
}

/// Images per training sample for `topology`.
pub fn branch_count(topology: Topology) -> usize {
    match topology {
        Topology::Baseline => 1,
        Topology::Dcs => 2,
        Topology::Qcs => 4,
        Topology::TripletControl => 3,
    }
}

/// Training inputs laid out `[branch][sample]`.
#[derive(Clone, Debug)]
pub struct BranchBatch<'a> {
    pub images: Vec<Vec<&'a Tensor>>,
    pub labels: Vec<Vec<usize>>,
}

impl BranchBatch<'_> {
    pub fn batch_size(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }
}

/// Logits of every supervised branch, each `b × K`.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub base: Vec<Var>,
    pub cross: Vec<Var>,
    pub stats: GraphStats,
}

/// Raw (pre-softmax) aggregated weight vectors for one image pair at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMaps {
    pub s_key: Vec<f64>,
    pub s_query: Vec<f64>,
    pub d_key: Vec<f64>,
    pub d_query: Vec<f64>,
}

struct BaseOut {
    logits: Var,
    /// Encoder output tokens without the class token, `3l × c`.
    tokens: Var,
}

/// Configuration, parameters and the seed they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, seed, params })
    }

    /// Rebuild from stored parameters; names and shapes must match a fresh init exactly.
    pub fn from_parts(config: ModelConfig, seed: u64, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config, seed);
        for (name, t) in &expected {
            match params.get(name) {
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.keys().find(|n| !expected.contains_key(*n)) {
            return Err(Error::Contract(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, seed, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn patches(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let n = self.config.image_size;
        if image.shape() != [n, n] {
            return Err(Error::Config(format!(
                "image has shape {:?}, model expects [{n}, {n}]",
                image.shape()
            )));
        }
        let p = self.config.patch;
        let g = self.config.grid();
        let px = image.values();
        let mut out = Vec::with_capacity(g * g * p * p);
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    let row = (gy * p + y) * n + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
        Ok(tape.constant(Tensor::new(vec![g * g, p * p], out)?))
    }

    /// The three `l × c` backbone levels, shared by every branch.
    fn backbone(&self, sess: &mut Session, tape: &mut Tape, image: &Tensor) -> Result<[Var; LEVELS]> {
        let x = self.patches(tape, image)?;
        let l0 = sess.linear(tape, "backbone.stem", x)?;
        let l0 = tape.gelu(l0);
        let l1 = sess.linear(tape, "backbone.stage1", l0)?;
        let l1 = tape.gelu(l1);
        let l2 = sess.linear(tape, "backbone.stage2", l1)?;
        let l2 = tape.gelu(l2);
        Ok([l0, l1, l2])
    }

    fn base_head(&self, sess: &mut Session, tape: &mut Tape, feats: &[Var; LEVELS]) -> Result<BaseOut> {
        let cls = sess.param(tape, "base.cls")?;
        let tokens = tape.concat_rows(&[cls, feats[0], feats[1], feats[2]])?;
        let y = sess.encoder_block(tape, "base.block", tokens, 0.0)?;
        let c = tape.slice_rows(y, 0, 1)?;
        let c = sess.layer_norm(tape, "base.ln", c)?;
        let logits = sess.linear(tape, "base.head", c)?;
        let tokens = tape.slice_rows(y, 1, LEVELS * self.config.positions())?;
        Ok(BaseOut { logits, tokens })
    }

    /// Base logits `1 × K` on an arbitrary session.
    pub fn base_logits(&self, sess: &mut Session, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let feats = self.backbone(sess, tape, image)?;
        Ok(self.base_head(sess, tape, &feats)?.logits)
    }

    /// Single-branch prediction; reads only backbone and base-head parameters.
    pub fn forward_inference(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut sess = Session::inference(&self.params);
        let v = self.base_logits(&mut sess, &mut tape, image)?;
        Ok(tape.value(v).values().to_vec())
    }

    pub fn forward_baseline(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.forward_inference(image)
    }

    pub fn forward_dcs(&self, sess: &mut Session, tape: &mut Tape, batch: &BranchBatch) -> Result<Outputs> {
        self.expect_topology(Topology::Dcs)?;
        self.forward_train(sess, tape, batch)
    }

    pub fn forward_qcs(&self, sess: &mut Session, tape: &mut Tape, batch: &BranchBatch) -> Result<Outputs> {
        self.expect_topology(Topology::Qcs)?;
        self.forward_train(sess, tape, batch)
    }

    fn expect_topology(&self, t: Topology) -> Result<()> {
        if self.config.topology != t {
            return Err(Error::Config(format!(
                "model is wired as {}, not {}",
                self.config.topology.name(),
                t.name()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &BranchBatch) -> Result<()> {
        let t = self.config.topology;
        let n = branch_count(t);
        if batch.images.len() != n || batch.labels.len() != n {
            return Err(Error::Contract(format!(
                "{} expects {n} branches, got {} image and {} label lists",
                t.name(),
                batch.images.len(),
                batch.labels.len()
            )));
        }
        let b = batch.batch_size();
        if b == 0 || batch.images.iter().any(|v| v.len() != b) || batch.labels.iter().any(|v| v.len() != b) {
            return Err(Error::Contract("every branch needs the same non-zero number of samples".into()));
        }
        let k = self.config.num_classes;
        if let Some(bad) = batch.labels.iter().flatten().find(|&&y| y >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let lab = &batch.labels;
        for i in 0..b {
            let ok = match t {
                Topology::Baseline => true,
                Topology::Dcs => lab[ANCHOR][i] == lab[POS][i],
                Topology::Qcs => {
                    lab[ANCHOR][i] == lab[POS][i] && lab[NEG][i] == lab[NEG2][i] && lab[ANCHOR][i] != lab[NEG][i]
                }
                Topology::TripletControl => lab[ANCHOR][i] == lab[POS][i] && lab[ANCHOR][i] != lab[NEG][i],
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "sample {i} violates the {} label constraints: {:?}",
                    t.name(),
                    lab.iter().map(|l| l[i]).collect::<Vec<_>>()
                )));
            }
        }
        Ok(())
    }

    /// Branches that carry classifiers.
    fn supervised(&self) -> Vec<usize> {
        (0..self.config.topology.supervised_branches()).collect()
    }

    fn branch_mode(&self, branch: usize) -> MatrixMode {
        match self.config.topology {
            Topology::Qcs => self.config.matrix_mode,
            Topology::TripletControl if branch == ANCHOR => self.config.matrix_mode,
            _ => MatrixMode::S,
        }
    }

    fn active_pairings(&self) -> Vec<Pairing> {
        let mode = self.config.matrix_mode;
        let topo = self.config.topology;
        pairings(topo)
            .into_iter()
            .filter(|p| match (topo, p.kind) {
                (Topology::Qcs, MatrixKind::Similarity) => mode != MatrixMode::D,
                (Topology::Qcs | Topology::TripletControl, MatrixKind::Distance) => mode != MatrixMode::S,
                _ => true,
            })
            .collect()
    }

    /// Full training graph: base and cross logits for every supervised branch.
    pub fn forward_train(&self, sess: &mut Session, tape: &mut Tape, batch: &BranchBatch) -> Result<Outputs> {
        self.check_batch(batch)?;
        let topo = self.config.topology;
        let nb = branch_count(topo);
        let supervised = self.supervised();
        if topo == Topology::TripletControl && self.config.freeze_negative {
            for name in ["cross_d.qk.w", "cross_d.qk.b", "fusion.theta.0"] {
                sess.freeze(name);
            }
        }
        sess.stats = GraphStats::new(LEVELS);
        let mut base_rows: Vec<Vec<Var>> = vec![Vec::new(); supervised.len()];
        let mut cross_rows: Vec<Vec<Var>> = vec![Vec::new(); supervised.len()];
        for i in 0..batch.batch_size() {
            let mut feats = Vec::with_capacity(nb);
            for br in 0..nb {
                let mut f = self.backbone(sess, tape, batch.images[br][i])?;
                if topo == Topology::TripletControl && br == NEG && self.config.freeze_negative {
                    for v in f.iter_mut() {
                        *v = tape.detach(*v);
                    }
                }
                feats.push(f);
            }
            let mut bases = Vec::with_capacity(supervised.len());
            for &br in &supervised {
                let out = self.base_head(sess, tape, &feats[br])?;
                base_rows[br].push(out.logits);
                bases.push(out);
            }
            if topo.has_cross() {
                let attended = self.cross_attend(sess, tape, &feats)?;
                for &br in &supervised {
                    let logits = self.cross_head(sess, tape, &feats[br], &attended[br], &bases[br])?;
                    cross_rows[br].push(logits);
                }
            }
        }
        let mut base = Vec::with_capacity(supervised.len());
        for rows in &base_rows {
            base.push(tape.concat_rows(rows)?);
        }
        let mut cross = Vec::new();
        for rows in cross_rows.iter().filter(|r| !r.is_empty()) {
            cross.push(tape.concat_rows(rows)?);
        }
        Ok(Outputs {
            base,
            cross,
            stats: sess.stats.clone(),
        })
    }

    /// Per supervised branch, the attended `3l × c` features (levels stacked along positions).
    fn cross_attend(&self, sess: &mut Session, tape: &mut Tape, feats: &[[Var; LEVELS]]) -> Result<Vec<Var>> {
        let supervised = self.supervised();
        let active = self.active_pairings();
        let mut per_level: Vec<Vec<Var>> = vec![Vec::with_capacity(LEVELS); supervised.len()];
        for level in 0..LEVELS {
            let mut qk: BTreeMap<(usize, &'static str), Var> = BTreeMap::new();
            for p in &active {
                for br in [p.key, p.query] {
                    if let std::collections::btree_map::Entry::Vacant(e) = qk.entry((br, p.qk)) {
                        e.insert(sess.linear(tape, p.qk, feats[br][level])?);
                    }
                }
            }
            let mut values = Vec::with_capacity(feats.len());
            for f in feats {
                values.push(if values.len() < supervised.len() {
                    Some(sess.linear(tape, "cross.v", f[level])?)
                } else {
                    None
                });
            }

            if self.config.attention == AttentionKind::Sdpa {
                let q = |b: usize| qk[&(b, "cross.qk")];
                let a = sdpa_cross_attention(tape, q(ANCHOR), q(POS), values[POS].expect("value"))?;
                let p = sdpa_cross_attention(tape, q(POS), q(ANCHOR), values[ANCHOR].expect("value"))?;
                per_level[ANCHOR].push(a);
                per_level[POS].push(p);
                continue;
            }

            let mut raw_s: Vec<Option<SpatialWeights>> = vec![None; feats.len()];
            let mut raw_d: Vec<Option<SpatialWeights>> = vec![None; feats.len()];
            let mut theta: Vec<Option<&'static str>> = vec![None; feats.len()];
            for p in &active {
                let q = FeatureMap::new(qk[&(p.query, p.qk)], level);
                let k = FeatureMap::new(qk[&(p.key, p.qk)], level);
                let dist = distance_matrix(tape, q, k)?;
                let dev = transpose_deviation(tape.value(k.var), tape.value(q.var), tape.value(dist.var));
                sess.stats.max_transpose_dev = sess.stats.max_transpose_dev.max(dev);
                match p.kind {
                    MatrixKind::Similarity => {
                        sess.stats.s_matrices[level] += 1;
                        let s = similarity_from_distance(tape, dist);
                        raw_s[p.key] = Some(aggregate_key_side(tape, s));
                        raw_s[p.query] = Some(aggregate_query_side(tape, s));
                    }
                    MatrixKind::Distance => {
                        sess.stats.d_matrices[level] += 1;
                        let d = min_shift_distance(tape, dist);
                        raw_d[p.key] = Some(aggregate_key_side(tape, d));
                        raw_d[p.query] = Some(aggregate_query_side(tape, d));
                        theta[p.key] = p.theta;
                        theta[p.query] = p.theta;
                    }
                }
            }
            for &br in &supervised {
                let mode = self.branch_mode(br);
                let fusion = match (mode, theta[br]) {
                    (MatrixMode::SD, Some(name)) => Some(FusionParams::new(self.config.gamma, sess.param(tape, name)?)?),
                    _ => None,
                };
                let raw = select_matrix_mode(tape, mode, raw_s[br], raw_d[br], fusion)?;
                let att = apply_spatial_attention(tape, raw, values[br].expect("value"))?;
                let sum: f64 = tape.value(att.weights).values().iter().sum();
                sess.stats.max_weight_sum_dev = sess.stats.max_weight_sum_dev.max((sum - 1.0).abs());
                per_level[br].push(att.out);
            }
        }
        per_level.iter().map(|levels| tape.concat_rows(levels)).collect()
    }

    fn cross_head(
        &self,
        sess: &mut Session,
        tape: &mut Tape,
        feats: &[Var; LEVELS],
        attended: &Var,
        base: &BaseOut,
    ) -> Result<Var> {
        let attended = *attended;
        let c = self.config.channels;
        let pooled = match self.config.residual {
            ResidualKind::None => tape.mean_axis0(attended),
            ResidualKind::Gap => {
                let x = tape.concat_rows(feats)?;
                let h = tape.add(x, attended)?;
                tape.mean_axis0(h)
            }
            ResidualKind::Bp => {
                let x = tape.concat_rows(feats)?;
                let h = tape.add(x, attended)?;
                let n = tape.value(h).dims2().0;
                bilinear_pool(tape, h, h, n)?
            }
            ResidualKind::Vit => {
                let z = sess.encoder_block(tape, "cross.block", attended, self.config.dropout)?;
                let r = tape.add(z, base.tokens)?;
                tape.mean_axis0(r)
            }
        };
        let width = if self.config.residual == ResidualKind::Bp { c * c } else { c };
        let row = tape.reshape(pooled, vec![1, width])?;
        let row = sess.layer_norm(tape, "cross.ln", row)?;
        sess.linear(tape, "cross.head", row)
    }

    /// Raw aggregated S and D weights between `key` and `query` images at `level`.
    pub fn pair_maps(&self, key: &Tensor, query: &Tensor, level: usize) -> Result<PairMaps> {
        if !self.config.topology.has_cross() {
            return Err(Error::Config("baseline models have no cross projections".into()));
        }
        if level >= LEVELS {
            return Err(Error::Index(format!("level {level} out of range")));
        }
        let d_proj = if self.config.topology == Topology::TripletControl {
            "cross_d.qk"
        } else {
            "cross.qk"
        };
        let mut tape = Tape::new();
        let mut sess = Session::inference(&self.params);
        let fk = self.backbone(&mut sess, &mut tape, key)?[level];
        let fq = self.backbone(&mut sess, &mut tape, query)?[level];
        let mut maps = |proj: &str, tape: &mut Tape| -> Result<_> {
            let k = sess.linear(tape, proj, fk)?;
            let q = sess.linear(tape, proj, fq)?;
            distance_matrix(tape, FeatureMap::new(q, level), FeatureMap::new(k, level))
        };
        let ds = maps("cross.qk", &mut tape)?;
        let dd = maps(d_proj, &mut tape)?;
        let s = similarity_from_distance(&mut tape, ds);
        let d = min_shift_distance(&mut tape, dd);
        let sk = aggregate_key_side(&mut tape, s);
        let sq = aggregate_query_side(&mut tape, s);
        let dk = aggregate_key_side(&mut tape, d);
        let dq = aggregate_query_side(&mut tape, d);
        let get = |w: SpatialWeights| tape.value(w.var).values().to_vec();
        Ok(PairMaps {
            s_key: get(sk),
            s_query: get(sq),
            d_key: get(dk),
            d_query: get(dq),
        })
    }
}

/// `(1/n) · aᵀ b`, flattened to a `c·c′` vector.
pub fn bilinear_pool(tape: &mut Tape, a: Var, b: Var, n: usize) -> Result<Var> {
    let at = tape.transpose(a);
    let g = tape.matmul(at, b)?;
    let g = tape.scale(g, 1.0 / n as f64);
    let len = tape.value(g).len();
    tape.reshape(g, vec![len])
}

/// Largest gap between `dist` (query rows, key columns) and the transpose of
/// the distance matrix computed with the roles of the two projections swapped.
fn transpose_deviation(key: &Tensor, query: &Tensor, dist: &Tensor) -> f64 {
    let (l, d) = key.dims2();
    let mut worst: f64 = 0.0;
    for i in 0..l {
        for j in 0..l {
            // swapped matrix entry (i, j): query role taken by the key projection
            let s: f64 = (0..d).map(|c| (key.at(i, c) - query.at(j, c)).powi(2)).sum();
            worst = worst.max((s.sqrt() - dist.at(j, i)).abs());
        }
    }
    worst
}
