//! Joint optimization of every base and cross classifier, logging, and evaluation.

mod config;
mod log;
mod loss;
mod metrics;
mod optim;
mod run;

pub use config::{AdamConfig, Distill, LossWeights, TrainConfig};
pub use log::{StepRecord, TrainLog, MAX_BRANCHES, MAX_THETAS};
pub use loss::{total_loss, LossParts};
pub use metrics::{compare_cls_gap, evaluate, gap_csv, predict, GapRow, Metrics, GAP_HEADER};
pub use optim::Adam;
pub use run::{draw_indices, split_validation, train, train_with_validation, TrainOutcome};
