use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, ResidualKind, Topology};
use crate::autograd::Tensor;

/// Named parameter tensors, iterated in name order.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Per-parameter stream so adding or removing one parameter never shifts another's init.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.rotate_left(17))
}

struct Builder {
    seed: u64,
    params: ParamSet,
}

impl Builder {
    fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let mut rng = param_rng(self.seed, name);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let vals = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        self.params
            .insert(name.to_string(), Tensor::new(vec![fan_in, fan_out], vals).expect("shape"));
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut rng = param_rng(self.seed, name);
        let n = shape.iter().product();
        let vals = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.params
            .insert(name.to_string(), Tensor::new(shape.to_vec(), vals).expect("shape"));
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) {
        self.params.insert(name.to_string(), Tensor::full(shape, v));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.glorot(&format!("{prefix}.w"), fan_in, fan_out);
        self.fill(&format!("{prefix}.b"), &[fan_out], 0.0);
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.fill(&format!("{prefix}.g"), &[width], 1.0);
        self.fill(&format!("{prefix}.b"), &[width], 0.0);
    }

    fn block(&mut self, prefix: &str, width: usize, hidden: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), width);
        for m in ["wq", "wk", "wv", "wo"] {
            self.glorot(&format!("{prefix}.{m}"), width, width);
        }
        self.layer_norm(&format!("{prefix}.ln2"), width);
        self.linear(&format!("{prefix}.fc1"), width, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, width);
    }
}

/// Fresh parameters for `config`, deterministic in `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamSet {
    let c = config.channels;
    let k = config.num_classes;
    let mut b = Builder {
        seed,
        params: ParamSet::new(),
    };
    b.linear("backbone.stem", config.patch * config.patch, c);
    b.linear("backbone.stage1", c, c);
    b.linear("backbone.stage2", c, c);

    b.normal("base.cls", &[1, c], 1.0);
    b.block("base.block", c, config.mlp_hidden);
    b.layer_norm("base.ln", c);
    b.linear("base.head", c, k);

    if config.topology.has_cross() {
        b.linear("cross.qk", c, config.qk_dim);
        b.linear("cross.v", c, c);
        let pooled = if config.residual == ResidualKind::Bp { c * c } else { c };
        if config.residual == ResidualKind::Vit {
            b.block("cross.block", c, config.mlp_hidden);
        }
        b.layer_norm("cross.ln", pooled);
        b.linear("cross.head", pooled, k);
    }
    match config.topology {
        Topology::Qcs => {
            b.fill("fusion.theta.0", &[1], 0.0);
            b.fill("fusion.theta.1", &[1], 0.0);
        }
        Topology::TripletControl => {
            b.linear("cross_d.qk", c, config.qk_dim);
            b.fill("fusion.theta.0", &[1], 0.0);
        }
        _ => {}
    }
    b.params
}

/// Parameters used by the single-branch inference path.
pub fn is_inference_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("base.")
}

/// Parameter group label used in gradient reports.
pub fn group_of(name: &str) -> &'static str {
    if name.starts_with("backbone.") {
        "backbone"
    } else if name.starts_with("base.") {
        "base-head"
    } else if name.starts_with("cross.qk") || name.starts_with("cross.v") || name.starts_with("cross_d.") {
        "projection"
    } else if name.starts_with("fusion.") {
        "theta"
    } else {
        "cross-head"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_topology_stable() {
        let qcs = ModelConfig::default();
        let base = ModelConfig {
            topology: Topology::Baseline,
            ..qcs.clone()
        };
        let a = init_params(&qcs, 7);
        let b = init_params(&qcs, 7);
        assert_eq!(a, b);
        let c = init_params(&base, 7);
        for (name, t) in &c {
            assert_eq!(&a[name], t, "{name}");
        }
        assert!(c.keys().all(|n| is_inference_param(n)));
        assert!(a.contains_key("fusion.theta.1"));
        assert_ne!(init_params(&qcs, 8)["backbone.stem.w"], a["backbone.stem.w"]);
    }
}
