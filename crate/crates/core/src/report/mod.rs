//! Artifacts and experiment drivers: heatmaps, ablation sweeps, the gradient
//! suite, attention localization scores and dataset digests.

mod ablate;
mod gradsuite;
mod heatmap;
mod localize;
mod stats;

use sha2::{Digest, Sha256};

pub use ablate::{
    run_ablation, thread_cap, AblationResults, Delta, ExperimentMatrix, ExperimentRow, RowResult, RunResult,
    RUNS_HEADER, SUMMARY_HEADER,
};
pub use gradsuite::{mode_s_theta_gradient, run_gradcheck_suite, suite_model_config, SuiteEntry, SuiteOptions, SuiteReport};
pub use heatmap::{
    heatmap_grid, min_max_normalize, pair_heatmaps, parse_pgm, pgm, write_heatmaps, Heatmap, HeatmapGrid, GRID_HEADER,
    MAP_HEADER, NORMALIZATION,
};
pub use localize::{score_localization, softmax, LocalizationScore};
pub use stats::{mean_sd, median, sign_test_greater, SignTest};

use crate::data::{split_to_bytes, Dataset, Split};

/// SHA-256 of a split's on-disk bytes, hex encoded.
pub fn split_digest(split: &Split) -> String {
    hex::encode(Sha256::digest(split_to_bytes(split)))
}

/// SHA-256 over the train bytes followed by the test bytes.
pub fn dataset_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(split_to_bytes(&data.train));
    h.update(split_to_bytes(&data.test));
    hex::encode(h.finalize())
}
