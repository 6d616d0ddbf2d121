//! Problem ingestion, synthetic dataset generation and result export.

mod bal;
mod ply;
mod report;
mod synth;

pub use bal::{load_bal, load_bal_from, save_bal, save_bal_to};
pub use ply::{export_ply, PlyFormat};
pub use report::{problem_bytes_estimate, write_report};
pub use synth::{synthesize, GroundTruth, SyntheticResult, SyntheticSpec};

use crate::normal_eq;
use crate::problem::{BaProblem, BlockModel, ProblemError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("line {line}: {detail}")]
    IndexOutOfRange { line: usize, detail: String },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
}

/// Ratio of structurally non-zero blocks (both triangles, diagonal included)
/// to total blocks of the reduced camera system.
pub fn rcs_sparsity(problem: &BaProblem) -> f64 {
    let block_model = BlockModel::of(problem);
    let obs_index = problem.observations_by_point();
    let point_ids: Vec<usize> = (0..problem.n_points()).collect();
    let off_diagonal =
        normal_eq::covisibility_structure(problem, &block_model, &obs_index, &point_ids).len();
    let n = block_model.n_blocks() as f64;
    (2.0 * off_diagonal as f64 + n) / (n * n)
}
