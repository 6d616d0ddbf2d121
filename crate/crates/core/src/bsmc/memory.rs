//! Memory-cost formulas for the CSR and block formats.
//!
//! For a matrix of n uniform camera blocks of c unknowns each and block
//! sparsity alpha (non-zero blocks over total blocks, both triangles):
//!
//! ```text
//! Y_C = alpha n^2 c^2 * 8 + alpha n^2 c^2 * 4 + n c * 4
//! Y_B = (alpha n^2 + n)/2 * c^2 * 8 + (alpha n^2 + n)/2 * 3*4 + n * 4
//! Y_C / Y_B = (6 alpha n c^2 + 2c) / (2 alpha n c^2 + 2 c^2 + 3 alpha + 5)
//! ```
//!
//! The ratio is evaluated in its published closed form; it differs from
//! dividing `Y_C` by `Y_B` in a lower-order term, which is negligible at the
//! scales of interest.

use super::{BlockLayout, BsmcError, BsmcMatrix};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::HashSet;

fn validate(n: u64, c: u64, alpha: f64) -> Result<(), BsmcError> {
    if n < 1 || c < 1 {
        return Err(BsmcError::InvalidArgument(format!(
            "n and c must be at least 1, got n={n}, c={c}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(BsmcError::InvalidArgument(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    let nonzero_blocks = alpha * (n as f64) * (n as f64);
    if nonzero_blocks < n as f64 {
        return Err(BsmcError::InvalidSparsity {
            nonzero_blocks,
            n,
        });
    }
    Ok(())
}

/// CSR bytes: scalar values and column ids for every covered element of both
/// triangles plus one start index per scalar row.
pub fn memory_bytes_csr(n: u64, c: u64, alpha: f64) -> Result<f64, BsmcError> {
    validate(n, c, alpha)?;
    let (nf, cf) = (n as f64, c as f64);
    let nnz = alpha * nf * nf * cf * cf;
    Ok(nnz * 8.0 + nnz * 4.0 + nf * cf * 4.0)
}

/// Block-format bytes: upper-triangle blocks with 3 four-byte ids each plus
/// one start index per block row.
pub fn memory_bytes_bsmc(n: u64, c: u64, alpha: f64) -> Result<f64, BsmcError> {
    validate(n, c, alpha)?;
    let (nf, cf) = (n as f64, c as f64);
    let upper = (alpha * nf * nf + nf) / 2.0;
    Ok(upper * cf * cf * 8.0 + upper * 12.0 + nf * 4.0)
}

/// CSR-to-block memory ratio in closed form.
pub fn memory_ratio(n: u64, c: u64, alpha: f64) -> Result<f64, BsmcError> {
    validate(n, c, alpha)?;
    let (nf, cf) = (n as f64, c as f64);
    let num = 6.0 * alpha * nf * cf * cf + 2.0 * cf;
    let den = 2.0 * alpha * nf * cf * cf + 2.0 * cf * cf + 3.0 * alpha + 5.0;
    Ok(num / den)
}

/// Random uniform-c occupancy with exactly `round((alpha n^2 - n) / 2)`
/// off-diagonal upper blocks, for auditing the byte formulas against
/// constructed structures. Values are zero.
pub fn uniform_occupancy(
    n: usize,
    c: usize,
    alpha: f64,
    seed: u64,
) -> Result<BsmcMatrix, BsmcError> {
    validate(n as u64, c as u64, alpha)?;
    let off_diag = ((alpha * (n as f64) * (n as f64) - n as f64) / 2.0).round() as usize;
    let max_off = n * (n - 1) / 2;
    if off_diag > max_off {
        return Err(BsmcError::InvalidArgument(format!(
            "alpha {alpha} asks for {off_diag} off-diagonal blocks, only {max_off} exist"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut chosen: HashSet<(u32, u32)> = HashSet::with_capacity(off_diag);
    while chosen.len() < off_diag {
        let row = rng.random_range(0..n as u32);
        let col = rng.random_range(0..n as u32);
        if row < col {
            chosen.insert((row, col));
        }
    }
    let pairs: Vec<(u32, u32)> = chosen.into_iter().collect();
    BsmcMatrix::zeros_with_structure(BlockLayout::uniform(n, c)?, &pairs)
}
