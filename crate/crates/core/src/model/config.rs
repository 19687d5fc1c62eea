use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MatrixMode;

/// Number of backbone abstraction levels.
pub const LEVELS: usize = 3;

/// Training graph wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Single branch, base classifier only.
    Baseline,
    /// Anchor and positive branches joined by one similarity pairing.
    Dcs,
    /// Anchor, positive, negative, second negative in a closed ring of two
    /// similarity and two distance pairings.
    Qcs,
    /// Anchor, positive and an unsupervised negative branch with its own
    /// distance projection. Kept as a negative control.
    TripletControl,
}

impl Topology {
    /// Branches that carry supervised classifiers.
    pub fn supervised_branches(self) -> usize {
        match self {
            Topology::Baseline => 1,
            Topology::Dcs | Topology::TripletControl => 2,
            Topology::Qcs => 4,
        }
    }

    pub fn has_cross(self) -> bool {
        self != Topology::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Topology::Baseline => "baseline",
            Topology::Dcs => "dcs",
            Topology::Qcs => "qcs",
            Topology::TripletControl => "triplet-control",
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "dcs" => Ok(Self::Dcs),
            "qcs" => Ok(Self::Qcs),
            "triplet-control" | "triplet" => Ok(Self::TripletControl),
            other => Err(Error::Config(format!(
                "unknown topology {other:?} (expected baseline, dcs, qcs or triplet-control)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Cross similarity attention: weights act on the branch's own values.
    Csa,
    /// Scaled dot-product cross attention: the paired image's values are mixed in.
    Sdpa,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csa" => Ok(Self::Csa),
            "sdpa" => Ok(Self::Sdpa),
            other => Err(Error::Config(format!("unknown attention kind {other:?} (expected csa or sdpa)"))),
        }
    }
}

/// How the cross classifier is joined to the base path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualKind {
    /// No residual: the cross classifier sees only attended features.
    None,
    /// Elementwise add with backbone features, then global average pooling.
    Gap,
    /// Elementwise add with backbone features, then bilinear pooling.
    Bp,
    /// Attended features pass an extra encoder block, then add to the base encoder tokens.
    Vit,
}

impl std::str::FromStr for ResidualKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "gap" => Ok(Self::Gap),
            "bp" => Ok(Self::Bp),
            "vit" => Ok(Self::Vit),
            other => Err(Error::Config(format!(
                "unknown residual kind {other:?} (expected none, gap, bp or vit)"
            ))),
        }
    }
}

/// Every architectural switch of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input images are `image_size × image_size`.
    pub image_size: usize,
    /// Stride and kernel of the stem; the feature grid is `image_size / patch` on a side.
    pub patch: usize,
    pub channels: usize,
    pub qk_dim: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub topology: Topology,
    pub attention: AttentionKind,
    pub matrix_mode: MatrixMode,
    pub residual: ResidualKind,
    pub gamma: f64,
    /// Dropout inside the cross encoder block (only used with the `vit` residual).
    pub dropout: f64,
    /// Triplet control only: stop all gradient through the negative branch.
    pub freeze_negative: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 56,
            patch: 8,
            channels: 16,
            qk_dim: 16,
            mlp_hidden: 32,
            num_classes: 7,
            topology: Topology::Qcs,
            attention: AttentionKind::Csa,
            matrix_mode: MatrixMode::SD,
            residual: ResidualKind::Vit,
            gamma: 1.0,
            dropout: 0.1,
            freeze_negative: false,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Spatial positions per level.
    pub fn positions(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            ));
        }
        if self.channels == 0 || self.qk_dim == 0 || self.mlp_hidden == 0 {
            return bad("channels, qk_dim and mlp_hidden must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(0.0..=0.4).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 0.4], got {}", self.dropout));
        }
        match self.topology {
            Topology::Dcs if self.matrix_mode != MatrixMode::S => {
                return bad("dcs has no inter-class pairing; matrix_mode must be s".into());
            }
            Topology::Qcs | Topology::TripletControl if self.attention == AttentionKind::Sdpa => {
                return bad(format!(
                    "sdpa cross attention is only wired for the dcs topology, not {}",
                    self.topology.name()
                ));
            }
            _ => {}
        }
        if self.freeze_negative && self.topology != Topology::TripletControl {
            return bad("freeze_negative only applies to the triplet-control topology".into());
        }
        Ok(())
    }
}
