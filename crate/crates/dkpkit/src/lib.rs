//! Experiment harness around `dkpkit-core`: corpus loading, checkpoints,
//! training curves, single runs and the compression sweep.

pub mod checkpoint;
pub mod corpus;
pub mod curves;
pub mod error;
pub mod gradcheck;
pub mod run;
pub mod sweep;

pub use error::{AppError, AppResult};
