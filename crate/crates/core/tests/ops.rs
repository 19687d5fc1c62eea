mod common;

use common::*;
use csim::attention::{
    aggregate_key_side, aggregate_query_side, apply_spatial_attention, cosine_similarity_matrix, distance_matrix,
    dot_product_matrix, sdpa_cross_attention, similarity_matrix, FeatureMap,
};
use csim::autograd::{gradcheck, Fault, GradcheckOptions, Tape, Tensor};
use csim::fusion::{fuse_sd, gate_value, min_shift_distance, FusionParams};
use csim::report::{run_gradcheck_suite, SuiteOptions};
use proptest::prelude::*;

#[test]
fn every_op_matches_its_brute_force_oracle() {
    for (name, dev) in oracle_deviations(100) {
        assert!(dev <= 1e-12, "{name} deviates by {dev:e}");
    }
}

#[test]
fn hand_worked_examples() {
    let mut t = Tape::new();
    let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let ones = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let p = t.matmul(m, ones).unwrap();
    assert_eq!(t.value(p).values(), &[3.0, 7.0]);
    let id = t.constant(Tensor::identity(2));
    let same = t.matmul(id, m).unwrap();
    assert_eq!(t.value(same), t.value(m));

    let q = t.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
    let k = t.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
    let d = t.pairwise_euclidean(q, k).unwrap();
    assert_eq!(t.value(d).values(), &[5.0]);
    let n = t.l2_normalize_rows(k);
    assert_eq!(t.value(n).values(), &[0.6, 0.8]);
    let z = t.constant(Tensor::zeros(&[1, 3]));
    let nz = t.l2_normalize_rows(z);
    assert_eq!(t.value(nz).values(), &[0.0; 3]);

    let big = t.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = t.softmax_vec(big);
    assert_eq!(t.value(s).values()[0], 1.0);
    let u = t.constant(Tensor::vector(vec![0.0; 4]));
    let su = t.softmax_vec(u);
    assert_eq!(t.value(su).values(), &[0.25; 4]);

    let uniform = t.constant(Tensor::zeros(&[3, 7]));
    let ce = t.cross_entropy(uniform, &[0, 3, 6]).unwrap();
    assert!((t.value(ce).values()[0] - 7f64.ln()).abs() < 1e-15);
    assert!(t.cross_entropy(uniform, &[7, 0, 0]).is_err());

    let sharp = t.constant(Tensor::from_rows(&[vec![60.0, 0.0]]).unwrap());
    let flat2 = t.constant(Tensor::zeros(&[1, 2]));
    let klv = t.kl_divergence(flat2, sharp).unwrap();
    assert!((t.value(klv).values()[0] - 2f64.ln()).abs() < 1e-12);
    let same_kl = t.kl_divergence(sharp, sharp).unwrap();
    assert_eq!(t.value(same_kl).values(), &[0.0]);

    let a = t.constant(Tensor::vector(vec![0.0]));
    let b = t.constant(Tensor::vector(vec![2.0]));
    let e = t.mse_loss(a, b).unwrap();
    assert_eq!(t.value(e).values(), &[4.0]);

    let x = t.constant(Tensor::scalar(30.0));
    let th = t.tanh(x);
    assert!(t.value(th).values()[0] <= 1.0);
    let x0 = t.constant(Tensor::scalar(0.0));
    let th0 = t.tanh(x0);
    assert_eq!(t.value(th0).values(), &[0.0]);
}

#[test]
fn dimension_mismatches_are_reported() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[3, 4]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    assert!(t.matmul(a, b).is_err());
    assert!(t.pairwise_euclidean(a, b).is_err());
    assert!(t.mse_loss(a, b).is_err());
    assert!(t.kl_divergence(a, b).is_err());
}

#[test]
fn gradient_suite_passes_on_every_primitive_and_the_model() {
    let r = run_gradcheck_suite(SuiteOptions::default()).unwrap();
    assert!(r.passed(), "failures: {:?}", r.failures());
    assert!(r.entries.iter().filter(|e| e.case == "tanh").count() >= 10);
    assert!(r.mode_s_theta_grad.iter().all(|(_, g)| *g == 0.0));
}

#[test]
fn broken_backward_rules_are_caught() {
    for (fault, case) in [(Fault::Tanh, "tanh"), (Fault::MatMul, "matmul"), (Fault::Softmax, "softmax_vec")] {
        let r = run_gradcheck_suite(SuiteOptions {
            seeds: 1,
            model: false,
            fault,
        })
        .unwrap();
        assert!(!r.passed());
        assert!(r.failures().iter().any(|f| f.0 == case), "{fault:?} not caught by {case}");
    }
}

#[test]
fn scalar_tanh_gradient_is_tight() {
    let r = gradcheck(
        |t, v| Ok(t.tanh(v[0])),
        &[("x".into(), Tensor::scalar(0.5))],
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-8, "{}", r.max_rel_err());
}

#[test]
fn self_similarity_argmax_sits_on_the_diagonal() {
    let mut r = rng(4);
    for _ in 0..50 {
        let l = r.random_range(2..=16);
        let ch = r.random_range(1..=16);
        let f = random_mat(&mut r, l, ch);
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_rows(&f).unwrap());
        let s = similarity_matrix(&mut t, FeatureMap::new(v, 0), FeatureMap::new(v, 0)).unwrap();
        let c = cosine_similarity_matrix(&mut t, v, v).unwrap();
        for m in [s.var, c.var] {
            let mv = t.value(m);
            for i in 0..l {
                assert!(diagonal_is_row_max(mv.row(i), i));
                if ch > 1 {
                    assert_eq!(row_argmax(mv.row(i)), i);
                }
            }
        }
    }
}

#[test]
fn dot_product_self_interaction_can_peak_off_diagonal() {
    let f = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_rows(&f).unwrap());
    let d = dot_product_matrix(&mut t, v, v).unwrap();
    assert_eq!(t.value(d).values(), &flat(&dot(&f, &f))[..]);
    assert_eq!(row_argmax(t.value(d).row(0)), 1);
    assert!(!diagonal_is_row_max(t.value(d).row(0), 0));
}

use rand::Rng;

/// Output of branch A under CSA and SDPA for the given value matrices.
fn branch_a_outputs(q: &Mat, k: &Mat, va: &Mat, vp: &Mat) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let (qv, kv) = (t.constant(Tensor::from_rows(q).unwrap()), t.constant(Tensor::from_rows(k).unwrap()));
    let (a, p) = (t.constant(Tensor::from_rows(va).unwrap()), t.constant(Tensor::from_rows(vp).unwrap()));
    let s = similarity_matrix(&mut t, FeatureMap::new(qv, 0), FeatureMap::new(kv, 0)).unwrap();
    // pairing with branch A as key: A's positions are weighted and A's own values rescaled
    let w = aggregate_key_side(&mut t, s);
    let csa = apply_spatial_attention(&mut t, w, a).unwrap();
    let sdpa = sdpa_cross_attention(&mut t, kv, qv, p).unwrap();
    (t.value(csa.out).values().to_vec(), t.value(sdpa).values().to_vec())
}

#[test]
fn csa_feeds_back_own_values_and_sdpa_mixes_the_partner() {
    let mut r = rng(9);
    for _ in 0..20 {
        let (q, k) = (random_mat(&mut r, 6, 3), random_mat(&mut r, 6, 3));
        let (va, vp) = (random_mat(&mut r, 6, 4), random_mat(&mut r, 6, 4));
        let (csa0, sdpa0) = branch_a_outputs(&q, &k, &va, &vp);
        let bump = |m: &Mat| m.iter().map(|row| row.iter().map(|x| x + 0.5).collect()).collect::<Mat>();
        let (csa_p, sdpa_p) = branch_a_outputs(&q, &k, &va, &bump(&vp));
        let (csa_a, sdpa_a) = branch_a_outputs(&q, &k, &bump(&va), &vp);
        assert_eq!(csa0, csa_p, "CSA output moved with the partner's values");
        assert!(max_abs_diff(&csa0, &csa_a) > 1e-3);
        assert_eq!(sdpa0, sdpa_a, "SDPA output moved with its own values");
        assert!(max_abs_diff(&sdpa0, &sdpa_p) > 1e-3);
    }
}

#[test]
fn zero_theta_fuses_to_a_plain_sum() {
    let mut r = rng(2);
    for _ in 0..20 {
        let l = r.random_range(1..=16);
        let s: Vec<f64> = (0..l).map(|_| r.random_range(-3.0..3.0)).collect();
        let d: Vec<f64> = (0..l).map(|_| r.random_range(0.0..3.0)).collect();
        let mut t = Tape::new();
        let (sw, dw) = (raw_weights(&mut t, &s), raw_weights(&mut t, &d));
        let th = t.leaf(Tensor::scalar(0.0));
        let f = fuse_sd(&mut t, sw, dw, FusionParams::new(1.0, th).unwrap()).unwrap();
        let want: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + b).collect();
        assert_eq!(t.value(f.var).values(), &want[..]);
    }
}

fn mat_strategy(max_l: usize, c: usize) -> impl Strategy<Value = Mat> {
    (1..=max_l).prop_flat_map(move |l| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, c), l))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_rows_have_unit_or_zero_norm(m in mat_strategy(8, 4)) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_rows(&m).unwrap());
        let n = t.l2_normalize_rows(v);
        let out = t.value(n);
        for i in 0..m.len() {
            let norm = out.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(v));
        let s = t.softmax_vec(x);
        let sum: f64 = t.value(s).values().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(t.value(s).values().iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn distance_matrices_are_transposes_under_role_swap(q in mat_strategy(8, 3), seed in 0u64..1000) {
        let k = random_mat(&mut rng(seed), q.len(), 3);
        let mut t = Tape::new();
        let (a, b) = (t.constant(Tensor::from_rows(&q).unwrap()), t.constant(Tensor::from_rows(&k).unwrap()));
        let ab = distance_matrix(&mut t, FeatureMap::new(a, 1), FeatureMap::new(b, 1)).unwrap();
        let ba = distance_matrix(&mut t, FeatureMap::new(b, 1), FeatureMap::new(a, 1)).unwrap();
        prop_assert_eq!(t.value(ab.var), &t.value(ba.var).transpose());
        // so key-side weights of one orientation equal query-side weights of the other
        let s_ab = similarity_matrix(&mut t, FeatureMap::new(a, 1), FeatureMap::new(b, 1)).unwrap();
        let s_ba = similarity_matrix(&mut t, FeatureMap::new(b, 1), FeatureMap::new(a, 1)).unwrap();
        let key = aggregate_key_side(&mut t, s_ab);
        let query = aggregate_query_side(&mut t, s_ba);
        prop_assert!(max_abs_diff(t.value(key.var).values(), t.value(query.var).values()) <= 1e-12);
    }

    #[test]
    fn similarity_and_shifted_distance_are_nonnegative(q in mat_strategy(8, 3), seed in 0u64..1000) {
        let k = random_mat(&mut rng(seed), q.len(), 3);
        let mut t = Tape::new();
        let (a, b) = (t.constant(Tensor::from_rows(&q).unwrap()), t.constant(Tensor::from_rows(&k).unwrap()));
        let s = similarity_matrix(&mut t, FeatureMap::new(a, 0), FeatureMap::new(b, 0)).unwrap();
        let d = distance_matrix(&mut t, FeatureMap::new(a, 0), FeatureMap::new(b, 0)).unwrap();
        let shifted = min_shift_distance(&mut t, d);
        prop_assert!(t.value(s.var).values().iter().all(|x| *x >= 0.0));
        let sv = t.value(shifted.var).values();
        prop_assert!(sv.iter().all(|x| *x >= 0.0));
        prop_assert_eq!(sv.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
    }

    #[test]
    fn gate_stays_strictly_inside_zero_two(theta in -30.0f64..30.0, gamma in 0.01f64..5.0) {
        let g = gate_value(gamma, theta);
        prop_assert!(g > 0.0 && g < 2.0 || (gamma * theta).abs() > 18.0);
        prop_assert!((0.0..=2.0).contains(&g));
    }

    #[test]
    fn attention_weights_sum_to_one_and_uniform_is_identity(raw in prop::collection::vec(-10.0f64..10.0, 1..20), c in 1usize..5) {
        let l = raw.len();
        let mut t = Tape::new();
        let w = raw_weights(&mut t, &raw);
        let v = t.constant(Tensor::full(&[l, c], 1.0));
        let att = apply_spatial_attention(&mut t, w, v).unwrap();
        let sum: f64 = t.value(att.weights).values().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        let flat_w = raw_weights(&mut t, &vec![raw[0]; l]);
        let same = apply_spatial_attention(&mut t, flat_w, v).unwrap();
        prop_assert_eq!(t.value(same.out), t.value(v));
    }
}
