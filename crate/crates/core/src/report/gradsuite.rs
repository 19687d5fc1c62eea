//! Finite-difference verification of every tape primitive, the attention and
//! fusion compositions, and a full four-branch model.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{
    aggregate_key_side, aggregate_query_side, apply_spatial_attention, sdpa_cross_attention, similarity_matrix,
    FeatureMap,
};
use crate::autograd::{gradcheck, Fault, GradcheckOptions, GradcheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::fusion::{aggregate_distance_key_side, fuse_sd, min_shift_distance, FusionParams, MatrixMode};
use crate::model::{bilinear_pool, BranchBatch, Model, ModelConfig, ResidualKind, Session, Topology};
use crate::train::{total_loss, LossWeights};

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One checked function: its inputs and a scalar objective over them.
struct Case {
    name: &'static str,
    params: Vec<(String, Tensor)>,
    f: Objective,
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub case: String,
    pub seed: u64,
    pub report: GradcheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    /// Analytic gradient of every gate parameter of a matrix-mode-S model (all exactly zero when correct).
    pub mode_s_theta_grad: Vec<(String, f64)>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed())
    }

    /// `(case, seed, parameter, max relative error)` for every failing parameter.
    pub fn failures(&self) -> Vec<(String, u64, String, f64)> {
        self.entries
            .iter()
            .flat_map(|e| {
                e.report
                    .failures()
                    .map(|p| (e.case.clone(), e.seed, p.name.clone(), p.max_rel_err))
            })
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.report.max_rel_err()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    /// Random instances per primitive.
    pub seeds: u64,
    /// Include the full four-branch model.
    pub model: bool,
    #[doc(hidden)]
    pub fault: Fault,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 10,
            model: true,
            fault: Fault::None,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

/// Contract a tensor-valued output with fixed random weights so every output entry matters.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f62);
    let w = randn(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

fn case(name: &'static str, params: Vec<(&str, Tensor)>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        params: params.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        f: Box::new(f),
    }
}

/// Wrap a tensor-valued map into a probed scalar objective.
fn unary(name: &'static str, x: Tensor, seed: u64, op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Case {
    case(name, vec![("x", x)], move |t, v| {
        let y = op(t, v[0])?;
        probe(t, y, seed)
    })
}

fn binary(
    name: &'static str,
    a: Tensor,
    b: Tensor,
    seed: u64,
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
) -> Case {
    case(name, vec![("a", a), ("b", b)], move |t, v| {
        let y = op(t, v[0], v[1])?;
        probe(t, y, seed)
    })
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| randn(&mut rng, shape);
    let s = seed;
    let mask: Vec<f64> = (0..12).map(|i| if (i + seed as usize).is_multiple_of(3) { 0.0 } else { 1.5 }).collect();
    let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 5).collect();
    vec![
        binary("matmul", r(&[3, 4]), r(&[4, 2]), s, |t, a, b| t.matmul(a, b)),
        binary("add", r(&[3, 4]), r(&[3, 4]), s, |t, a, b| t.add(a, b)),
        binary("sub", r(&[3, 4]), r(&[3, 4]), s, |t, a, b| t.sub(a, b)),
        binary("mul", r(&[3, 4]), r(&[3, 4]), s, |t, a, b| t.mul(a, b)),
        unary("scale", r(&[3, 4]), s, |t, x| Ok(t.scale(x, -1.7))),
        unary("add_const", r(&[3, 4]), s, |t, x| Ok(t.add_const(x, 0.3))),
        binary("add_row_vec", r(&[3, 4]), r(&[4]), s, |t, a, b| t.add_row_vec(a, b)),
        binary("mul_row_vec", r(&[3, 4]), r(&[4]), s, |t, a, b| t.mul_row_vec(a, b)),
        binary("scale_rows", r(&[4, 3]), r(&[4]), s, |t, a, b| t.scale_rows(a, b)),
        binary("mul_scalar", r(&[3, 4]), r(&[1]), s, |t, a, b| t.mul_scalar(a, b)),
        unary("transpose", r(&[3, 4]), s, |t, x| Ok(t.transpose(x))),
        unary("reshape", r(&[3, 4]), s, |t, x| t.reshape(x, vec![2, 6])),
        binary("concat_rows", r(&[2, 3]), r(&[3, 3]), s, |t, a, b| t.concat_rows(&[a, b, a])),
        binary("concat_cols", r(&[3, 2]), r(&[3, 1]), s, |t, a, b| t.concat_cols(&[b, a])),
        unary("slice_rows", r(&[5, 3]), s, |t, x| t.slice_rows(x, 1, 3)),
        unary("slice_cols", r(&[3, 5]), s, |t, x| t.slice_cols(x, 2, 2)),
        unary("sum", r(&[3, 4]), s, |t, x| Ok(t.sum(x))),
        unary("mean", r(&[3, 4]), s, |t, x| Ok(t.mean(x))),
        unary("sum_axis0", r(&[3, 4]), s, |t, x| Ok(t.sum_axis0(x))),
        unary("sum_axis1", r(&[3, 4]), s, |t, x| Ok(t.sum_axis1(x))),
        unary("mean_axis0", r(&[3, 4]), s, |t, x| Ok(t.mean_axis0(x))),
        unary("tanh", r(&[3, 4]), s, |t, x| Ok(t.tanh(x))),
        unary("gelu", r(&[3, 4]), s, |t, x| Ok(t.gelu(x))),
        unary("relu", r(&[3, 4]), s, |t, x| Ok(t.relu(x))),
        binary("pairwise_euclidean", r(&[5, 3]), r(&[5, 3]), s, |t, a, b| t.pairwise_euclidean(a, b)),
        unary("l2_normalize_rows", r(&[4, 4]), s, |t, x| Ok(t.l2_normalize_rows(x))),
        unary("softmax_vec", r(&[9]), s, |t, x| Ok(t.softmax_vec(x))),
        unary("softmax_vec_scaled", r(&[9]), s, |t, x| Ok(t.softmax_vec_scaled(x, 9.0))),
        unary("softmax_rows", r(&[3, 5]), s, |t, x| Ok(t.softmax_rows(x))),
        unary("layer_norm_rows", r(&[3, 6]), s, |t, x| Ok(t.layer_norm_rows(x))),
        unary("max_minus", r(&[4, 4]), s, |t, x| Ok(t.max_minus(x))),
        unary("minus_min", r(&[4, 4]), s, |t, x| Ok(t.minus_min(x))),
        unary("dropout", r(&[3, 4]), s, move |t, x| t.dropout_with_mask(x, mask.clone())),
        case("cross_entropy", vec![("logits", r(&[4, 5]))], move |t, v| t.cross_entropy(v[0], &labels)),
        {
            let teacher = r(&[3, 7]);
            case("kl_divergence", vec![("student", r(&[3, 7]))], move |t, v| {
                let tc = t.constant(teacher.clone());
                t.kl_divergence(v[0], tc)
            })
        },
        case("mse_loss", vec![("a", r(&[3, 4])), ("b", r(&[3, 4]))], |t, v| t.mse_loss(v[0], v[1])),
        binary("bilinear_pool", r(&[5, 3]), r(&[5, 2]), s, |t, a, b| bilinear_pool(t, a, b, 5)),
    ]
}

fn composite_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6d70);
    let mut r = |shape: &[usize]| randn(&mut rng, shape);
    let s = seed;
    let theta = Tensor::scalar(0.4 * (seed as f64 % 3.0) - 0.4);
    vec![
        case(
            "csa_key_side",
            vec![("q", r(&[9, 3])), ("k", r(&[9, 3])), ("v", r(&[9, 4]))],
            move |t, v| {
                let m = similarity_matrix(t, FeatureMap::new(v[0], 0), FeatureMap::new(v[1], 0))?;
                let w = aggregate_key_side(t, m);
                let a = apply_spatial_attention(t, w, v[2])?;
                probe(t, a.out, s)
            },
        ),
        case(
            "csa_query_side",
            vec![("q", r(&[9, 3])), ("k", r(&[9, 3])), ("v", r(&[9, 4]))],
            move |t, v| {
                let m = similarity_matrix(t, FeatureMap::new(v[0], 1), FeatureMap::new(v[1], 1))?;
                let w = aggregate_query_side(t, m);
                let a = apply_spatial_attention(t, w, v[2])?;
                probe(t, a.out, s)
            },
        ),
        case(
            "sd_fusion",
            vec![
                ("q_s", r(&[4, 3])),
                ("k_s", r(&[4, 3])),
                ("q_d", r(&[4, 3])),
                ("k_d", r(&[4, 3])),
                ("v", r(&[4, 2])),
                ("theta", theta),
            ],
            move |t, v| {
                let sm = similarity_matrix(t, FeatureMap::new(v[0], 0), FeatureMap::new(v[1], 0))?;
                let sw = aggregate_key_side(t, sm);
                let dm = crate::attention::distance_matrix(t, FeatureMap::new(v[2], 0), FeatureMap::new(v[3], 0))?;
                let shifted = min_shift_distance(t, dm);
                let dw = aggregate_distance_key_side(t, shifted);
                let fused = fuse_sd(t, sw, dw, FusionParams::new(1.0, v[5])?)?;
                let a = apply_spatial_attention(t, fused, v[4])?;
                probe(t, a.out, s)
            },
        ),
        case(
            "sdpa_cross_attention",
            vec![("q", r(&[6, 3])), ("k", r(&[6, 3])), ("v", r(&[6, 4]))],
            move |t, v| {
                let y = sdpa_cross_attention(t, v[0], v[1], v[2])?;
                probe(t, y, s)
            },
        ),
    ]
}

/// The four-branch model the suite checks: 16 positions per level, 8 channels, 3 classes.
pub fn suite_model_config(mode: MatrixMode) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 4,
        channels: 8,
        qk_dim: 8,
        mlp_hidden: 8,
        num_classes: 3,
        topology: Topology::Qcs,
        matrix_mode: mode,
        residual: ResidualKind::Vit,
        dropout: 0.0,
        ..Default::default()
    }
}

fn suite_images(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696d_6773);
    (0..4)
        .map(|_| Tensor::new(vec![16, 16], (0..256).map(|_| rng.random::<f64>()).collect()).expect("16x16"))
        .collect()
}

const SUITE_LABELS: [usize; 4] = [2, 2, 0, 0];

fn model_objective(model: Model, images: Vec<Tensor>) -> (Vec<(String, Tensor)>, Objective) {
    let names: Vec<String> = model.params().keys().cloned().collect();
    let params = model
        .params()
        .iter()
        .map(|(n, t)| {
            // a nonzero gate exercises the tanh slope of the fusion path
            let t = if n.starts_with("fusion.") { Tensor::scalar(0.3) } else { t.clone() };
            (n.clone(), t)
        })
        .collect();
    let f = move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut sess = Session::with_bindings(model.params(), &names, vars);
        let batch = BranchBatch {
            images: images.iter().map(|i| vec![i]).collect(),
            labels: SUITE_LABELS.iter().map(|l| vec![*l]).collect(),
        };
        let out = model.forward_train(&mut sess, tape, &batch)?;
        let labels: Vec<Vec<usize>> = SUITE_LABELS.iter().map(|l| vec![*l]).collect();
        // distillation detaches its teacher, which finite differences cannot see
        let w = LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        Ok(total_loss(tape, &out, &labels, &w)?.total)
    };
    (params, Box::new(f))
}

/// Analytic gate gradients of a mode-S model under the full training loss.
pub fn mode_s_theta_gradient(seed: u64) -> Result<Vec<(String, f64)>> {
    let model = Model::new(suite_model_config(MatrixMode::S), seed)?;
    let images = suite_images(seed);
    let mut tape = Tape::new();
    let mut sess = Session::training(model.params(), None);
    let batch = BranchBatch {
        images: images.iter().map(|i| vec![i]).collect(),
        labels: SUITE_LABELS.iter().map(|l| vec![*l]).collect(),
    };
    let out = model.forward_train(&mut sess, &mut tape, &batch)?;
    let parts = total_loss(&mut tape, &out, &batch.labels, &LossWeights::default())?;
    let grads = tape.backward(parts.total)?;
    let mut res = Vec::new();
    for name in model.params().keys().filter(|n| n.starts_with("fusion.")) {
        let g = sess.bound().get(name).and_then(|v| grads.get(*v)).map_or(0.0, |g| g[0]);
        res.push((name.clone(), g));
    }
    Ok(res)
}

/// Run every case over `opts.seeds` seeds, then the full model once.
pub fn run_gradcheck_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let gc = GradcheckOptions {
        fault: opts.fault,
        ..Default::default()
    };
    let mut entries = Vec::new();
    for seed in 0..opts.seeds {
        for c in primitive_cases(seed).into_iter().chain(composite_cases(seed)) {
            let report = gradcheck(&c.f, &c.params, gc)?;
            entries.push(SuiteEntry {
                case: c.name.to_string(),
                seed,
                report,
            });
        }
    }
    if opts.model {
        let seed = 0;
        let model = Model::new(suite_model_config(MatrixMode::SD), seed)?;
        let (params, f) = model_objective(model, suite_images(seed));
        let report = gradcheck(&f, &params, gc)?;
        entries.push(SuiteEntry {
            case: "qcs_model".into(),
            seed,
            report,
        });
    }
    Ok(SuiteReport {
        entries,
        mode_s_theta_grad: mode_s_theta_gradient(0)?,
        elapsed: start.elapsed(),
    })
}
