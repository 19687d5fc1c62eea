//! The multi-branch networks: shared backbone, base and cross classifiers,
//! and the baseline / dual / quadruplet / triplet-control training graphs.

pub mod checkpoint;
mod config;
mod graph;
mod params;
mod session;

pub use config::{AttentionKind, ModelConfig, ResidualKind, Topology, LEVELS};
pub use graph::{
    bilinear_pool, branch_count, pairings, BranchBatch, Model, Outputs, PairMaps, Pairing, ANCHOR, NEG, NEG2, POS,
};
pub use params::{group_of, init_params, is_inference_param, ParamSet};
pub use session::{GraphStats, Session};
