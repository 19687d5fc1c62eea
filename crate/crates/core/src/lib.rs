//! Cross similarity attention (CSA) and the dual / quadruplet cross similarity
//! training graphs, built on a small reverse-mode autodiff engine.

pub mod autograd;
pub mod error;

pub use error::{Error, Result};
pub mod attention;
pub mod fusion;
pub mod data;
pub mod model;
pub mod train;
pub mod report;
