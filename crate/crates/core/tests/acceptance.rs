//! Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
//! Built without the libtest harness so the report is never captured.
//!
//! Criteria 1-7 and 11 are exact properties and fail the test when violated. Criteria
//! 8-10 are directional desk-scale experiment outcomes; they are reported and only fail
//! the test when CSIM_ACCEPT_STRICT=1.

mod common;

use std::time::Instant;

use common::*;
use csim::attention::{
    aggregate_key_side, apply_spatial_attention, cosine_similarity_matrix, dot_product_matrix, sdpa_cross_attention,
    similarity_matrix, FeatureMap,
};
use csim::autograd::{Tape, Tensor};
use csim::data::{generate_dataset, split_to_bytes, Dataset, DatasetSpec};
use csim::fusion::{fuse_sd, gate_value, FusionParams, MatrixMode};
use csim::model::{checkpoint, BranchBatch, Model, ModelConfig, ResidualKind, Session, Topology, LEVELS};
use csim::report::*;
use csim::train::{train, AdamConfig, TrainConfig, TrainOutcome};
use rand::Rng;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    strict: bool,
}

fn confound_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_train: 400,
        n_test: 400,
        k: 4,
        m: 4,
        rho_train: 1.0,
        rho_test: 0.25,
        noise_sigma: 0.1,
        size: 32,
        cell: 8,
        signal_contrast: 0.8,
        confound_contrast: 0.8,
        seed,
        ..Default::default()
    }
}

fn confound_base() -> TrainConfig {
    TrainConfig {
        seed: 0,
        epochs: 10,
        batch_size: 16,
        steps_per_epoch: 0,
        patience: 0,
        val_fraction: 0.1,
        model: ModelConfig {
            image_size: 32,
            patch: 8,
            channels: 16,
            qk_dim: 16,
            mlp_hidden: 32,
            num_classes: 4,
            residual: ResidualKind::Vit,
            dropout: 0.1,
            gamma: 1.0,
            ..Default::default()
        },
        optimizer: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn outcomes<'a>(res: &'a AblationResults, id: &str) -> Vec<&'a TrainOutcome> {
    res.row(id).map_or_else(Vec::new, |r| r.runs.iter().filter_map(|x| x.outcome.as_ref()).collect())
}

fn c1_gradcheck() -> Verdict {
    let r = run_gradcheck_suite(SuiteOptions::default()).expect("suite runs");
    let cfg = suite_model_config(MatrixMode::SD);
    let shape_ok = cfg.positions() == 16 && cfg.channels == 8 && cfg.num_classes == 3 && cfg.topology == Topology::Qcs;
    let has_model = r.entries.iter().any(|e| e.case == "qcs_model");
    let secs = r.elapsed.as_secs_f64();
    Verdict {
        id: 1,
        name: "gradient suite",
        pass: r.passed() && has_model && shape_ok && secs < 120.0,
        detail: format!(
            "{} checks, max rel err {:.2e} (tol 1e-4), {} failures, {secs:.1}s",
            r.entries.len(),
            r.max_rel_err(),
            r.failures().len()
        ),
        strict: true,
    }
}

fn c2_oracles() -> Verdict {
    let devs = oracle_deviations(100);
    let (worst_name, worst) = devs.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Verdict {
        id: 2,
        name: "oracle equivalence",
        pass: devs.iter().all(|(_, d)| *d <= 1e-12),
        detail: format!("{} ops x 100 instances, worst {worst_name} {worst:.2e} (tol 1e-12)", devs.len()),
        strict: true,
    }
}

fn c3_structure(res: &AblationResults, batch: usize) -> Verdict {
    let mut steps = 0;
    let mut worst_t: f64 = 0.0;
    let mut worst_w: f64 = 0.0;
    let mut counts_ok = true;
    for o in outcomes(res, "qcs-sd") {
        for r in &o.log.records {
            steps += 1;
            worst_t = worst_t.max(r.transpose_dev);
            worst_w = worst_w.max(r.weight_sum_dev);
            counts_ok &= r.s_matrices == vec![2 * batch; LEVELS] && r.d_matrices == vec![2 * batch; LEVELS];
        }
    }
    Verdict {
        id: 3,
        name: "structural invariants",
        pass: steps > 0 && worst_t <= 1e-12 && worst_w <= 1e-12 && counts_ok,
        detail: format!(
            "{steps} QCS-SD steps: transpose dev {worst_t:.1e}, softmax sum dev {worst_w:.1e}, 2S+2D per level per quadruplet {}",
            if counts_ok { "every step" } else { "VIOLATED" }
        ),
        strict: true,
    }
}

fn c4_self_similarity() -> Verdict {
    let mut r = rng(44);
    let (mut diagonal, mut unique) = (0, 0);
    for _ in 0..50 {
        let l = r.random_range(2..=16);
        let c = r.random_range(1..=16);
        let f = random_mat(&mut r, l, c);
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_rows(&f).unwrap());
        let s = similarity_matrix(&mut t, FeatureMap::new(v, 0), FeatureMap::new(v, 0)).unwrap();
        let cs = cosine_similarity_matrix(&mut t, v, v).unwrap();
        let (sv, cv) = (t.value(s.var), t.value(cs.var));
        diagonal += (0..l).all(|i| diagonal_is_row_max(sv.row(i), i) && diagonal_is_row_max(cv.row(i), i)) as usize;
        unique += (0..l).all(|i| row_argmax(sv.row(i)) == i && row_argmax(cv.row(i)) == i) as usize;
    }
    let f = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_rows(&f).unwrap());
    let d = dot_product_matrix(&mut t, v, v).unwrap();
    let off = row_argmax(t.value(d).row(0));
    let counter = off == 1 && !diagonal_is_row_max(t.value(d).row(0), 0);
    Verdict {
        id: 4,
        name: "self-similarity argmax",
        pass: diagonal == 50 && counter,
        detail: format!(
            "{diagonal}/50 maps have the diagonal in every row's argmax set for Euclidean and cosine ({unique}/50 without ties; 1-channel maps tie under cosine); dot product on [[1,0],[3,0]] peaks off-diagonal at column {off} of row 0: {counter}"
        ),
        strict: true,
    }
}

fn branch_outputs(q: &Mat, k: &Mat, va: &Mat, vp: &Mat) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let (qv, kv) = (t.constant(Tensor::from_rows(q).unwrap()), t.constant(Tensor::from_rows(k).unwrap()));
    let (a, p) = (t.constant(Tensor::from_rows(va).unwrap()), t.constant(Tensor::from_rows(vp).unwrap()));
    let s = similarity_matrix(&mut t, FeatureMap::new(qv, 0), FeatureMap::new(kv, 0)).unwrap();
    let w = aggregate_key_side(&mut t, s);
    let csa = apply_spatial_attention(&mut t, w, a).unwrap();
    let sdpa = sdpa_cross_attention(&mut t, kv, qv, p).unwrap();
    (t.value(csa.out).values().to_vec(), t.value(sdpa).values().to_vec())
}

fn c5_direct_feedback() -> Verdict {
    let mut r = rng(55);
    let mut ok = 0;
    let trials = 50;
    for _ in 0..trials {
        let l = r.random_range(2..=16);
        let (q, k) = (random_mat(&mut r, l, 4), random_mat(&mut r, l, 4));
        let (va, vp) = (random_mat(&mut r, l, 3), random_mat(&mut r, l, 3));
        let (i, j) = (r.random_range(0..l), r.random_range(0..3));
        let mut va2 = va.clone();
        va2[i][j] += 0.5;
        let mut vp2 = vp.clone();
        vp2[i][j] += 0.5;
        let (c0, s0) = branch_outputs(&q, &k, &va, &vp);
        let (c_own, s_own) = branch_outputs(&q, &k, &va2, &vp);
        let (c_partner, s_partner) = branch_outputs(&q, &k, &va, &vp2);
        let csa_ok = c0 == c_partner && max_abs_diff(&c0, &c_own) > 0.0;
        let sdpa_ok = s0 == s_own && max_abs_diff(&s0, &s_partner) > 0.0;
        ok += (csa_ok && sdpa_ok) as usize;
    }
    Verdict {
        id: 5,
        name: "direct feedback",
        pass: ok == trials,
        detail: format!("{ok}/{trials} perturbations: CSA moves only with its own V, SDPA only with the partner's V"),
        strict: true,
    }
}

fn c6_inference_parity(res: &AblationResults) -> Verdict {
    let Some(model) = outcomes(res, "qcs-sd").first().map(|o| &o.model) else {
        return Verdict { id: 6, name: "inference parity", pass: false, detail: "no trained QCS model".into(), strict: true };
    };
    let n = model.config().image_size;
    let mut r = rng(66);
    let mut equal = 0;
    for _ in 0..25 {
        let imgs: Vec<Tensor> =
            (0..4).map(|_| Tensor::new(vec![n, n], (0..n * n).map(|_| r.random::<f64>()).collect()).unwrap()).collect();
        let batch = BranchBatch {
            images: imgs.iter().map(|i| vec![i]).collect(),
            labels: vec![vec![0], vec![0], vec![1], vec![1]],
        };
        let mut tape = Tape::new();
        let mut sess = Session::training(model.params(), None);
        let out = model.forward_train(&mut sess, &mut tape, &batch).unwrap();
        for (b, img) in imgs.iter().enumerate() {
            equal += (model.forward_inference(img).unwrap() == tape.value(out.base[b]).values()) as usize;
        }
    }
    let ops = |m: &Model| {
        let mut tape = Tape::new();
        let mut sess = Session::inference(m.params());
        m.base_logits(&mut sess, &mut tape, &Tensor::zeros(&[n, n])).unwrap();
        (tape.op_count(), sess.bound().len())
    };
    let baseline = Model::new(ModelConfig { topology: Topology::Baseline, ..model.config().clone() }, 0).unwrap();
    let (q_ops, b_ops) = (ops(model), ops(&baseline));
    Verdict {
        id: 6,
        name: "inference parity",
        pass: equal == 100 && q_ops == b_ops,
        detail: format!(
            "{equal}/100 inputs bit-identical; inference graph {} ops / {} params for QCS vs {} / {} for baseline",
            q_ops.0, q_ops.1, b_ops.0, b_ops.1
        ),
        strict: true,
    }
}

fn c7_fusion(res: &AblationResults) -> Verdict {
    let mut r = rng(77);
    let mut exact = 0;
    for _ in 0..100 {
        let l = r.random_range(1..=16);
        let s: Vec<f64> = (0..l).map(|_| r.random_range(-3.0..3.0)).collect();
        let d: Vec<f64> = (0..l).map(|_| r.random_range(0.0..3.0)).collect();
        let mut t = Tape::new();
        let (sw, dw) = (raw_weights(&mut t, &s), raw_weights(&mut t, &d));
        let th = t.leaf(Tensor::scalar(0.0));
        let gamma = r.random_range(0.1..3.0);
        let f = fuse_sd(&mut t, sw, dw, FusionParams::new(gamma, th).unwrap()).unwrap();
        let want: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + b).collect();
        exact += (t.value(f.var).values() == &want[..]) as usize;
    }
    let gamma = confound_base().model.gamma;
    let mut logged = 0;
    let mut in_range = true;
    for id in ["qcs-sd", "qcs-d", "triplet"] {
        for o in outcomes(res, id) {
            for th in o.log.records.iter().flat_map(|x| &x.theta) {
                logged += 1;
                let g = gate_value(gamma, *th);
                in_range &= g > 0.0 && g < 2.0;
            }
        }
    }
    let grads = mode_s_theta_gradient(7).unwrap();
    let grad_zero = !grads.is_empty() && grads.iter().all(|(_, g)| *g == 0.0);
    let s_runs = outcomes(res, "qcs-s");
    let frozen = !s_runs.is_empty() && s_runs.iter().all(|o| o.log.records.iter().all(|x| x.theta.iter().all(|t| *t == 0.0)));
    Verdict {
        id: 7,
        name: "fusion identities",
        pass: exact == 100 && logged > 0 && in_range && grad_zero && frozen,
        detail: format!(
            "theta=0 exact on {exact}/100; gate in (0,2) for all {logged} logged theta: {in_range}; mode-S theta grad {grads:?}, theta unmoved through every mode-S run: {frozen}"
        ),
        strict: true,
    }
}

fn c8_confound(res: &AblationResults, secs: f64) -> Verdict {
    let mean = |id: &str| res.row(id).and_then(|r| r.mean).unwrap_or(f64::NAN);
    let (sd, s, d) = (mean("qcs-sd"), mean("qcs-s"), mean("qcs-d"));
    let (csa, sdpa, base) = (mean("dcs-csa"), mean("dcs-sdpa"), mean("baseline"));
    let sign = res.paired_sign_test("qcs-sd", "baseline").expect("rows exist");
    let failed: usize = res.rows.iter().flat_map(|r| &r.runs).filter(|x| x.error.is_some()).count();
    let a = sd >= s && sd >= d;
    let b = csa >= sdpa;
    let c = sd > base && sign.significant(0.05);
    Verdict {
        id: 8,
        name: "confound experiment",
        pass: a && b && c && failed == 0 && secs < 3600.0,
        detail: format!(
            "(a) SD {sd:.4} vs S {s:.4} / D {d:.4}: {a}; (b) CSA {csa:.4} vs SDPA {sdpa:.4}: {b}; (c) SD - baseline {:.4}, sign test {}+/{}-/{}= p {:.4}: {c}; {failed} failed runs; sweep {secs:.0}s",
            sd - base,
            sign.positive,
            sign.negative,
            sign.ties,
            sign.p_value
        ),
        strict: false,
    }
}

/// Recomputes the localization score from the raw per-level maps without the library scorer.
fn independent_localization(model: &Model, data: &Dataset, max_pairs: usize) -> (usize, usize, usize, usize) {
    let split = &data.test;
    let grid = model.config().grid();
    let l = (grid * grid) as f64;
    let n = split.len();
    let mut tally = (0, 0, 0, 0);
    for ki in 0..n.min(max_pairs) {
        let rec = split.records[ki];
        for same in [true, false] {
            let Some(qi) = (1..n).map(|o| (ki + o) % n).find(|&j| (split.records[j].label == rec.label) == same) else {
                continue;
            };
            let mut mass = vec![0.0; grid * grid];
            for lv in 0..LEVELS {
                let m = model.pair_maps(&split.images[ki], &split.images[qi], lv).unwrap();
                let w = common::softmax(if same { &m.s_key } else { &m.d_key });
                for (acc, x) in mass.iter_mut().zip(w) {
                    *acc += x / LEVELS as f64;
                }
            }
            let cell = if same { rec.disc } else { rec.conf };
            let above = (mass[cell.1 * grid + cell.0] > 1.0 / l) as usize;
            if same {
                tally.0 += 1;
                tally.1 += above;
            } else {
                tally.2 += 1;
                tally.3 += above;
            }
        }
    }
    tally
}

fn c9_localization(res: &AblationResults, data: &Dataset) -> Verdict {
    let max_pairs = 100;
    let mut total = LocalizationScore { same_class_pairs: 0, s_above_uniform: 0, cross_class_pairs: 0, d_above_uniform: 0 };
    let mut agree = true;
    for o in outcomes(res, "qcs-sd") {
        let s = score_localization(&o.model, &data.test, max_pairs).unwrap();
        let ind = independent_localization(&o.model, data, max_pairs);
        agree &= ind == (s.same_class_pairs, s.s_above_uniform, s.cross_class_pairs, s.d_above_uniform);
        total.same_class_pairs += s.same_class_pairs;
        total.s_above_uniform += s.s_above_uniform;
        total.cross_class_pairs += s.cross_class_pairs;
        total.d_above_uniform += s.d_above_uniform;
    }
    let (sf, df) = (total.s_fraction(), total.d_fraction());
    Verdict {
        id: 9,
        name: "attention localization",
        pass: agree && total.same_class_pairs > 0 && sf >= 0.8 && df >= 0.6,
        detail: format!(
            "S mass above 1/l on discriminative cell {}/{} = {sf:.3} (need 0.8); D mass above 1/l on confound cell {}/{} = {df:.3} (need 0.6); independent rescoring agrees: {agree}",
            total.s_above_uniform, total.same_class_pairs, total.d_above_uniform, total.cross_class_pairs
        ),
        strict: false,
    }
}

fn c10_negative_control(res: &AblationResults) -> Verdict {
    let val = |id: &str| res.row(id).map_or_else(Vec::new, |r| r.val_accuracies());
    let (tri, qcs) = (val("triplet"), val("qcs-sd"));
    let (mt, mq) = (median(&tri), median(&qcs));
    Verdict {
        id: 10,
        name: "triplet negative control",
        pass: tri.len() == 5 && qcs.len() == 5 && mt.zip(mq).is_some_and(|(a, b)| a <= b),
        detail: format!("median validation accuracy triplet {mt:?} vs QCS-SD {mq:?} over {} / {} seeds", tri.len(), qcs.len()),
        strict: false,
    }
}

fn c11_determinism() -> Verdict {
    let spec = DatasetSpec { n_train: 80, n_test: 40, k: 4, m: 4, rho_test: 0.25, size: 32, cell: 8, seed: 11, ..Default::default() };
    let (a, b) = (generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
    let data_same = split_to_bytes(&a.train) == split_to_bytes(&b.train) && split_to_bytes(&a.test) == split_to_bytes(&b.test);
    let other = generate_dataset(&DatasetSpec { seed: 12, ..spec }).unwrap();
    let data_differs = split_to_bytes(&other.train) != split_to_bytes(&a.train);
    let mut runs_same = true;
    let mut runs_differ = true;
    for topology in [Topology::Baseline, Topology::Dcs, Topology::Qcs, Topology::TripletControl] {
        let mode = if topology == Topology::Dcs { MatrixMode::S } else { MatrixMode::SD };
        let mut cfg = confound_base();
        cfg.epochs = 2;
        cfg.steps_per_epoch = 3;
        cfg.batch_size = 4;
        cfg.seed = 5;
        cfg.model.topology = topology;
        cfg.model.matrix_mode = mode;
        let (x, y) = (train(&cfg, &a.train).unwrap(), train(&cfg, &a.train).unwrap());
        runs_same &= x.log.to_csv() == y.log.to_csv() && checkpoint::to_json(&x.model) == checkpoint::to_json(&y.model);
        cfg.seed = 6;
        let z = train(&cfg, &a.train).unwrap();
        runs_differ &= z.log.to_csv() != x.log.to_csv();
    }
    Verdict {
        id: 11,
        name: "determinism",
        pass: data_same && data_differs && runs_same && runs_differ,
        detail: format!(
            "datasets bit-identical {data_same}; logs and checkpoints bit-identical for all four topologies {runs_same}; a different seed changes them {}",
            data_differs && runs_differ
        ),
        strict: true,
    }
}

fn main() {
    let mut verdicts = vec![c1_gradcheck(), c2_oracles()];

    let data = generate_dataset(&confound_spec(1)).unwrap();
    let base = confound_base();
    let seeds = [0, 1, 2, 3, 4];
    let start = Instant::now();
    let res = run_ablation(&ExperimentMatrix::confound(), &base, &data, &seeds).unwrap();
    let secs = start.elapsed().as_secs_f64();
    print!("{}\n{}", res.summary_csv(), res.runs_csv());

    verdicts.push(c3_structure(&res, base.batch_size));
    verdicts.push(c4_self_similarity());
    verdicts.push(c5_direct_feedback());
    verdicts.push(c6_inference_parity(&res));
    verdicts.push(c7_fusion(&res));
    verdicts.push(c8_confound(&res, secs));
    verdicts.push(c9_localization(&res, &data));
    verdicts.push(c10_negative_control(&res));
    verdicts.push(c11_determinism());

    println!();
    for v in &verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let kind = if v.strict { "property" } else { "experiment" };
        println!("{tag} criterion {:>2} ({kind}) {}: {}", v.id, v.name, v.detail);
    }
    let strict_all = std::env::var("CSIM_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let broken: Vec<usize> = verdicts.iter().filter(|v| !v.pass && (v.strict || strict_all)).map(|v| v.id).collect();
    if !broken.is_empty() {
        eprintln!("criteria failed: {broken:?}");
        std::process::exit(1);
    }
    let reported: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!("acceptance: all property criteria hold; experiment criteria reported as FAIL: {reported:?}");
}
