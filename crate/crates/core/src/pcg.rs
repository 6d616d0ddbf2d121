//! Preconditioned conjugate gradient over a block-sparse matrix.
//!
//! The preconditioner is block-Jacobi: the inverses of the diagonal blocks.
//! Termination uses the relative preconditioned residual norm
//! sqrt(r'M⁻¹r / b'M⁻¹b); the only matrix product per iteration is the
//! parallel block mat-vec, everything else is vector-vector work.

use crate::bsmc::{BsmcError, BsmcMatrix};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcgError {
    #[error("diagonal block {block} is singular and cannot be inverted")]
    SingularDiagonalBlock { block: usize },
    #[error(transparent)]
    Matrix(#[from] BsmcError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgConfig {
    /// Relative tolerance on the preconditioned residual norm ratio.
    pub rel_tolerance: f64,
    /// Iteration cap; `None` resolves to 2x the block-row count, capped at 1000.
    pub max_iterations: Option<usize>,
    /// Parallelism degree of the mat-vec.
    pub n_groups: usize,
}

impl Default for PcgConfig {
    fn default() -> Self {
        PcgConfig {
            rel_tolerance: 1e-6,
            max_iterations: None,
            n_groups: 1,
        }
    }
}

impl PcgConfig {
    pub fn resolved_max_iterations(&self, n_block_rows: usize) -> usize {
        self.max_iterations.unwrap_or((2 * n_block_rows).min(1000)).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcgTermination {
    Converged,
    MaxIterations,
    /// p'Rp <= 0 was encountered; the matrix is not positive definite.
    Indefinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgReport {
    pub iterations: usize,
    /// Relative preconditioned residual at the returned iterate.
    pub final_relative_residual: f64,
    pub converged: bool,
    pub termination: PcgTermination,
}

/// Inverted diagonal blocks of a symmetric block matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobiPreconditioner {
    offsets: Vec<usize>,
    inverses: Vec<DMatrix<f64>>,
}

impl BlockJacobiPreconditioner {
    /// Invert every diagonal block of `r`.
    pub fn build(r: &BsmcMatrix) -> Result<Self, PcgError> {
        let layout = r.layout();
        let mut inverses = Vec::with_capacity(layout.n_blocks());
        let mut offsets = Vec::with_capacity(layout.n_blocks());
        for block in 0..layout.n_blocks() {
            let dense = r.diagonal_block(block).to_dense();
            let inv = dense
                .try_inverse()
                .ok_or(PcgError::SingularDiagonalBlock { block })?;
            if inv.iter().any(|v| !v.is_finite()) {
                return Err(PcgError::SingularDiagonalBlock { block });
            }
            offsets.push(layout.offset(block));
            inverses.push(inv);
        }
        Ok(BlockJacobiPreconditioner { offsets, inverses })
    }

    /// Identity preconditioner over the same layout, for comparisons.
    pub fn identity(r: &BsmcMatrix) -> Self {
        let layout = r.layout();
        BlockJacobiPreconditioner {
            offsets: (0..layout.n_blocks()).map(|b| layout.offset(b)).collect(),
            inverses: (0..layout.n_blocks())
                .map(|b| DMatrix::identity(layout.size(b), layout.size(b)))
                .collect(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.inverses.len()
    }

    pub fn inverse_block(&self, block: usize) -> &DMatrix<f64> {
        &self.inverses[block]
    }

    /// z = M⁻¹ v, one dense multiply per block.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(v.len());
        for (inv, &off) in self.inverses.iter().zip(&self.offsets) {
            let n = inv.nrows();
            let seg = inv * v.rows(off, n);
            z.rows_mut(off, n).copy_from(&seg);
        }
        z
    }
}

/// Solve R y = b for SPD R. Failure to converge is reported through the
/// returned [`PcgReport`], never by dropping the best iterate.
pub fn solve(
    r: &BsmcMatrix,
    b: &DVector<f64>,
    precond: &BlockJacobiPreconditioner,
    config: &PcgConfig,
) -> Result<(DVector<f64>, PcgReport), PcgError> {
    if b.len() != r.dim() {
        return Err(PcgError::Matrix(BsmcError::VectorDimensionMismatch {
            got: b.len(),
            want: r.dim(),
        }));
    }
    let max_iterations = config.resolved_max_iterations(r.layout().n_blocks());

    let mut y = DVector::zeros(b.len());
    let mut residual = b.clone();
    let mut z = precond.apply(&residual);
    let mut rz = residual.dot(&z);
    let norm0 = rz.max(0.0).sqrt();
    if norm0 == 0.0 {
        return Ok((
            y,
            PcgReport {
                iterations: 0,
                final_relative_residual: 0.0,
                converged: true,
                termination: PcgTermination::Converged,
            },
        ));
    }

    let mut p = z.clone();
    for iteration in 1..=max_iterations {
        let rp = r.mat_vec_parallel(&p, config.n_groups)?;
        let p_rp = p.dot(&rp);
        if p_rp <= 0.0 {
            return Ok((
                y,
                PcgReport {
                    iterations: iteration - 1,
                    final_relative_residual: rz.max(0.0).sqrt() / norm0,
                    converged: false,
                    termination: PcgTermination::Indefinite,
                },
            ));
        }
        let alpha = rz / p_rp;
        y.axpy(alpha, &p, 1.0);
        residual.axpy(-alpha, &rp, 1.0);
        z = precond.apply(&residual);
        let rz_next = residual.dot(&z);
        let rel = rz_next.max(0.0).sqrt() / norm0;
        if rel <= config.rel_tolerance {
            return Ok((
                y,
                PcgReport {
                    iterations: iteration,
                    final_relative_residual: rel,
                    converged: true,
                    termination: PcgTermination::Converged,
                },
            ));
        }
        let beta = rz_next / rz;
        rz = rz_next;
        p = &z + beta * p;
    }

    let rel = rz.max(0.0).sqrt() / norm0;
    Ok((
        y,
        PcgReport {
            iterations: max_iterations,
            final_relative_residual: rel,
            converged: false,
            termination: PcgTermination::MaxIterations,
        },
    ))
}
