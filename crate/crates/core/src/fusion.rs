//! Fusion of the intra-class similarity signal `S` with the inter-class
//! distance signal `D`.
//!
//! The inter-class distance matrix is shifted so its smallest entry is zero,
//! aggregated with the same normalize-and-sum operator used for `S`, and added
//! to the `S` weights through a learnable gate `1 + tanh(γ·θ)`.

use serde::{Deserialize, Serialize};

use crate::attention::{aggregate_key_side, aggregate_query_side, InteractionMatrix, MatrixKind, SpatialWeights};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Which interaction signal drives the cross attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixMode {
    /// Intra-class similarity only.
    S,
    /// Inter-class distance only.
    D,
    /// Gated sum of both.
    SD,
}

impl std::str::FromStr for MatrixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Self::S),
            "d" => Ok(Self::D),
            "sd" => Ok(Self::SD),
            other => Err(Error::Config(format!("unknown matrix mode {other:?} (expected s, d or sd)"))),
        }
    }
}

/// Gate hyperparameter plus the tape handle of the learnable `θ`.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    gamma: f64,
    pub theta: Var,
}

impl FusionParams {
    pub fn new(gamma: f64, theta: Var) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive and finite, got {gamma}")));
        }
        Ok(Self { gamma, theta })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// `1 + tanh(γ·θ)` evaluated outside any tape.
pub fn gate_value(gamma: f64, theta: f64) -> f64 {
    1.0 + (gamma * theta).tanh()
}

/// `D − min(D)` with the minimum taken over the whole matrix.
pub fn min_shift_distance(tape: &mut Tape, d: InteractionMatrix) -> InteractionMatrix {
    InteractionMatrix {
        var: tape.minus_min(d.var),
        kind: MatrixKind::Distance,
    }
}

/// Key-side aggregation of a shifted distance matrix; shares its operator with `S`.
pub fn aggregate_distance_key_side(tape: &mut Tape, shifted: InteractionMatrix) -> SpatialWeights {
    aggregate_key_side(tape, shifted)
}

pub fn aggregate_distance_query_side(tape: &mut Tape, shifted: InteractionMatrix) -> SpatialWeights {
    aggregate_query_side(tape, shifted)
}

/// `1 + tanh(γ·θ)` on the tape.
pub fn gate(tape: &mut Tape, params: FusionParams) -> Var {
    let scaled = tape.scale(params.theta, params.gamma);
    let t = tape.tanh(scaled);
    tape.add_const(t, 1.0)
}

/// `S + (1 + tanh(γ·θ)) · D`, elementwise.
pub fn fuse_sd(tape: &mut Tape, s: SpatialWeights, d: SpatialWeights, params: FusionParams) -> Result<SpatialWeights> {
    let (ls, ld) = (tape.value(s.var).len(), tape.value(d.var).len());
    if ls != ld {
        return Err(Error::dim("fuse_sd", format!("S has {ls} weights, D has {ld}")));
    }
    let g = gate(tape, params);
    let gated = tape.mul_scalar(d.var, g)?;
    Ok(SpatialWeights {
        var: tape.add(s.var, gated)?,
        side: s.side,
    })
}

/// Pick the raw weight vector for `mode`, fusing when both signals are requested.
pub fn select_matrix_mode(
    tape: &mut Tape,
    mode: MatrixMode,
    s: Option<SpatialWeights>,
    d: Option<SpatialWeights>,
    params: Option<FusionParams>,
) -> Result<SpatialWeights> {
    let missing = |what: &str| Error::Config(format!("matrix mode {mode:?} requires {what}"));
    match mode {
        MatrixMode::S => s.ok_or_else(|| missing("an S weight vector")),
        MatrixMode::D => d.ok_or_else(|| missing("a D weight vector")),
        MatrixMode::SD => {
            let s = s.ok_or_else(|| missing("an S weight vector"))?;
            let d = d.ok_or_else(|| missing("a D weight vector"))?;
            let p = params.ok_or_else(|| missing("fusion parameters"))?;
            fuse_sd(tape, s, d, p)
        }
    }
}
