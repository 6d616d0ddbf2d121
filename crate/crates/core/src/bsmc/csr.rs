//! Compressed sparse row reference format.
//!
//! Three arrays: the non-zero scalars, their column ids, and the start index
//! of each scalar row. Unlike the block format this stores the full symmetric
//! matrix, both triangles.

use super::{BsmcError, BsmcMatrix};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    values: Vec<f64>,
    col_ids: Vec<u32>,
    /// Start index of each row; row i ends where row i+1 starts (or at nnz).
    row_starts: Vec<u32>,
}

impl CsrMatrix {
    /// Expand the structural non-zeros of a block matrix, both triangles.
    /// Every scalar covered by a stored block is kept, including numeric zeros.
    pub fn from_block_structure(m: &BsmcMatrix) -> Result<Self, BsmcError> {
        let dim = m.dim();
        let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
        for (row, col, h, w, data) in m.iter_blocks() {
            let ro = m.layout().offset(row);
            let co = m.layout().offset(col);
            for r in 0..h {
                for c in 0..w {
                    let v = data[r * w + c];
                    triplets.push(((ro + r) as u32, (co + c) as u32, v));
                    if row != col {
                        triplets.push(((co + c) as u32, (ro + r) as u32, v));
                    }
                }
            }
        }
        if triplets.len() > super::MAX_INDEX {
            return Err(BsmcError::IndexOverflow { what: "non-zeros" });
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));

        let mut values = Vec::with_capacity(triplets.len());
        let mut col_ids = Vec::with_capacity(triplets.len());
        let mut row_starts = vec![0u32; dim];
        let mut row = 0usize;
        for (r, c, v) in triplets {
            while row <= r as usize {
                row_starts[row] = values.len() as u32;
                row += 1;
            }
            col_ids.push(c);
            values.push(v);
        }
        while row < dim {
            row_starts[row] = values.len() as u32;
            row += 1;
        }
        Ok(CsrMatrix {
            n_rows: dim,
            values,
            col_ids,
            row_starts,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn row_range(&self, row: usize) -> (usize, usize) {
        let start = self.row_starts[row] as usize;
        let end = if row + 1 < self.n_rows {
            self.row_starts[row + 1] as usize
        } else {
            self.values.len()
        };
        (start, end)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (start, end) = self.row_range(row);
        match self.col_ids[start..end].binary_search(&(col as u32)) {
            Ok(i) => self.values[start + i],
            Err(_) => 0.0,
        }
    }

    pub fn mat_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>, BsmcError> {
        if x.len() != self.n_rows {
            return Err(BsmcError::VectorDimensionMismatch {
                got: x.len(),
                want: self.n_rows,
            });
        }
        let mut y = DVector::zeros(self.n_rows);
        for row in 0..self.n_rows {
            let (start, end) = self.row_range(row);
            let mut acc = 0.0;
            for i in start..end {
                acc += self.values[i] * x[self.col_ids[i] as usize];
            }
            y[row] = acc;
        }
        Ok(y)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_rows);
        for row in 0..self.n_rows {
            let (start, end) = self.row_range(row);
            for i in start..end {
                m[(row, self.col_ids[i] as usize)] = self.values[i];
            }
        }
        m
    }

    /// Byte count of the three arrays: 8 per value, 4 per column id, 4 per row
    /// start.
    pub fn audited_bytes(&self) -> u64 {
        8 * self.values.len() as u64 + 4 * self.col_ids.len() as u64 + 4 * self.row_starts.len() as u64
    }
}
