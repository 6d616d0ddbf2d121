//! Block-based sparse matrix compression for symmetric block matrices.
//!
//! Only the non-zero blocks of the upper triangle are stored, together with
//! their positions (column and row ids) and sizes (width and height). Blocks
//! are kept in lexicographic (row, col) order so a row's blocks can be
//! binary-searched, and every diagonal block is always present.

mod csr;
mod memory;
mod serialize;

pub use csr::CsrMatrix;
pub use memory::{memory_bytes_bsmc, memory_bytes_csr, memory_ratio, uniform_occupancy};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Structure counts are held in 32-bit ids on disk and on the wire.
pub const MAX_INDEX: usize = i32::MAX as usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BsmcError {
    #[error("block ({row}, {col}) is {got_h}x{got_w}, layout expects {want_h}x{want_w}")]
    DimensionMismatch {
        row: usize,
        col: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("vector length {got} does not match matrix dimension {want}")]
    VectorDimensionMismatch { got: usize, want: usize },
    #[error("duplicate block ({row}, {col})")]
    DuplicateBlock { row: usize, col: usize },
    #[error("block id ({row}, {col}) outside layout with {n_blocks} block rows")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n_blocks: usize,
    },
    #[error("annotation maps block {index} to unknown global id ({row}, {col})")]
    UnknownGlobalId {
        index: usize,
        row: usize,
        col: usize,
    },
    #[error("block ({row}, {col}) is not part of the matrix structure")]
    MissingBlock { row: usize, col: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("annotation has {got} entries for {want} blocks")]
    AnnotationLengthMismatch { got: usize, want: usize },
    #[error("structure exceeds 2^31-1 {what}")]
    IndexOverflow { what: &'static str },
    #[error("invalid sparsity: alpha*n^2 = {nonzero_blocks} is below n = {n}")]
    InvalidSparsity { nonzero_blocks: f64, n: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt stream at byte {offset}: {detail}")]
    CorruptStream { offset: usize, detail: String },
}

/// Per-block scalar sizes of a symmetric block matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    sizes: Vec<u32>,
    offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn new(sizes: Vec<u32>) -> Result<Self, BsmcError> {
        if sizes.is_empty() {
            return Err(BsmcError::InvalidLayout("no blocks".into()));
        }
        if sizes.len() > MAX_INDEX {
            return Err(BsmcError::IndexOverflow {
                what: "block rows",
            });
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for (i, &s) in sizes.iter().enumerate() {
            if s == 0 {
                return Err(BsmcError::InvalidLayout(format!("block {i} has size 0")));
            }
            acc += s as usize;
            offsets.push(acc);
        }
        if acc > MAX_INDEX {
            return Err(BsmcError::IndexOverflow { what: "dimension" });
        }
        Ok(BlockLayout { sizes, offsets })
    }

    pub fn uniform(n_blocks: usize, block_size: usize) -> Result<Self, BsmcError> {
        BlockLayout::new(vec![block_size as u32; n_blocks])
    }

    pub fn n_blocks(&self) -> usize {
        self.sizes.len()
    }

    /// Total scalar dimension.
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn size(&self, block: usize) -> usize {
        self.sizes[block] as usize
    }

    /// First scalar row/column of a block.
    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockEntry {
    col_id: u32,
    row_id: u32,
    width: u32,
    height: u32,
    /// Offset of the block payload in `values`; derived, not serialized.
    value_start: usize,
}

impl BlockEntry {
    fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Global block ids carried alongside a matrix whose internal ids are local.
///
/// Entry `i` holds the global `(col_id, row_id)` of stored block `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalIdAnnotation {
    pub pairs: Vec<(u32, u32)>,
}

/// Read access to one stored block, transposed transparently when the caller
/// asked for the mirrored lower-triangle position.
#[derive(Debug, Clone, Copy)]
pub struct BlockRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    mirrored: bool,
}

impl<'a> BlockRef<'a> {
    pub fn rows(&self) -> usize {
        if self.mirrored {
            self.cols
        } else {
            self.rows
        }
    }

    pub fn cols(&self) -> usize {
        if self.mirrored {
            self.rows
        } else {
            self.cols
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if self.mirrored { (c, r) } else { (r, c) };
        self.data[r * self.cols + c]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows(), self.cols(), |r, c| self.get(r, c))
    }
}

/// Symmetric block-sparse matrix, upper triangle stored block-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct BsmcMatrix {
    layout: BlockLayout,
    values: Vec<f64>,
    blocks: Vec<BlockEntry>,
    /// Index of the first stored block of each block row, length n+1.
    row_starts: Vec<usize>,
}

impl BsmcMatrix {
    /// Build a canonical matrix from blocks given in any order.
    ///
    /// Lower-triangle inputs are transposed into the upper triangle, missing
    /// diagonal blocks are inserted as zero blocks.
    pub fn build(
        layout: BlockLayout,
        blocks: impl IntoIterator<Item = (usize, usize, DMatrix<f64>)>,
    ) -> Result<Self, BsmcError> {
        let n = layout.n_blocks();
        let mut staged: Vec<(u32, u32, DMatrix<f64>)> = Vec::new();
        for (row, col, mut block) in blocks {
            if row >= n || col >= n {
                return Err(BsmcError::IndexOutOfRange {
                    row,
                    col,
                    n_blocks: n,
                });
            }
            let (row, col) = if row <= col {
                (row, col)
            } else {
                block = block.transpose();
                (col, row)
            };
            if block.nrows() != layout.size(row) || block.ncols() != layout.size(col) {
                return Err(BsmcError::DimensionMismatch {
                    row,
                    col,
                    got_h: block.nrows(),
                    got_w: block.ncols(),
                    want_h: layout.size(row),
                    want_w: layout.size(col),
                });
            }
            staged.push((row as u32, col as u32, block));
        }
        staged.sort_by_key(|(r, c, _)| (*r, *c));
        for pair in staged.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(BsmcError::DuplicateBlock {
                    row: pair[0].0 as usize,
                    col: pair[0].1 as usize,
                });
            }
        }

        let mut matrix = Self::assemble(layout, &staged)?;
        for (row, col, block) in &staged {
            let idx = matrix
                .find_block(*row as usize, *col as usize)
                .expect("staged block present");
            let start = matrix.blocks[idx].value_start;
            copy_row_major(block, &mut matrix.values[start..start + block.len()]);
        }
        Ok(matrix)
    }

    /// Zero matrix over the given upper-triangle occupancy. Diagonal blocks
    /// are added whether listed or not.
    pub fn zeros_with_structure(
        layout: BlockLayout,
        pairs: &[(u32, u32)],
    ) -> Result<Self, BsmcError> {
        let n = layout.n_blocks();
        for &(row, col) in pairs {
            if row as usize >= n || col as usize >= n || row > col {
                return Err(BsmcError::IndexOutOfRange {
                    row: row as usize,
                    col: col as usize,
                    n_blocks: n,
                });
            }
        }
        let mut sorted: Vec<(u32, u32, ())> = pairs.iter().map(|&(r, c)| (r, c, ())).collect();
        sorted.sort_unstable_by_key(|&(r, c, _)| (r, c));
        sorted.dedup_by_key(|&mut (r, c, _)| (r, c));
        let staged: Vec<(u32, u32, ())> = sorted;
        Self::assemble(layout, &staged)
    }

    /// Common structure builder: `staged` must be sorted, deduplicated and
    /// upper-triangle. Values are zero-initialized.
    fn assemble<T>(layout: BlockLayout, staged: &[(u32, u32, T)]) -> Result<Self, BsmcError> {
        let n = layout.n_blocks();
        // Merge staged blocks with the implied diagonal.
        let mut entries: Vec<BlockEntry> = Vec::with_capacity(staged.len() + n);
        let mut row_starts = vec![0usize; n + 1];
        let mut cursor = 0usize;
        let mut value_start = 0usize;
        for row in 0..n {
            row_starts[row] = entries.len();
            let mut have_diag = false;
            while cursor < staged.len() && staged[cursor].0 as usize == row {
                let (r, c, _) = &staged[cursor];
                if !have_diag && *c as usize > row {
                    // Insert the diagonal before any off-diagonal block.
                    value_start = push_entry(&mut entries, &layout, row, row, value_start);
                }
                have_diag = true;
                value_start =
                    push_entry(&mut entries, &layout, *r as usize, *c as usize, value_start);
                cursor += 1;
            }
            if entries.len() == row_starts[row] {
                value_start = push_entry(&mut entries, &layout, row, row, value_start);
            }
        }
        row_starts[n] = entries.len();
        if entries.len() > MAX_INDEX {
            return Err(BsmcError::IndexOverflow { what: "blocks" });
        }
        Ok(BsmcMatrix {
            layout,
            values: vec![0.0; value_start],
            blocks: entries,
            row_starts,
        })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_stored_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of stored blocks in a block row.
    pub fn row_block_count(&self, row: usize) -> usize {
        self.row_starts[row + 1] - self.row_starts[row]
    }

    pub fn values_len(&self) -> usize {
        self.values.len()
    }

    /// Stored blocks in canonical order as (row, col, height, width, row-major data).
    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, usize, usize, &[f64])> {
        self.blocks.iter().map(|e| {
            (
                e.row_id as usize,
                e.col_id as usize,
                e.height as usize,
                e.width as usize,
                &self.values[e.value_start..e.value_start + e.area()],
            )
        })
    }

    /// Upper-triangle occupancy as (row, col) pairs in canonical order.
    pub fn structure(&self) -> Vec<(u32, u32)> {
        self.blocks.iter().map(|e| (e.row_id, e.col_id)).collect()
    }

    /// Binary search for `col` among the stored blocks of `row`, counting id
    /// comparisons. The count stays within ceil(log2(s)) + 1 for a row with s
    /// stored blocks.
    fn search_row(&self, row: usize, col: u32) -> (Option<usize>, u32) {
        let mut lo = self.row_starts[row];
        let mut hi = self.row_starts[row + 1];
        if lo == hi {
            return (None, 0);
        }
        let mut comparisons = 0u32;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            comparisons += 1;
            if self.blocks[mid].col_id <= col {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        comparisons += 1;
        if self.blocks[lo].col_id == col {
            (Some(lo), comparisons)
        } else {
            (None, comparisons)
        }
    }

    fn find_block(&self, row: usize, col: usize) -> Option<usize> {
        self.search_row(row, col as u32).0
    }

    /// Look up a block by its position in the full matrix. Lower-triangle
    /// queries return a transposed view of the mirrored stored block.
    pub fn get_block(&self, row: usize, col: usize) -> Result<Option<BlockRef<'_>>, BsmcError> {
        Ok(self.get_block_instrumented(row, col)?.0)
    }

    /// `get_block` with the number of id comparisons performed.
    pub fn get_block_instrumented(
        &self,
        row: usize,
        col: usize,
    ) -> Result<(Option<BlockRef<'_>>, u32), BsmcError> {
        let n = self.layout.n_blocks();
        if row >= n || col >= n {
            return Err(BsmcError::IndexOutOfRange {
                row,
                col,
                n_blocks: n,
            });
        }
        let mirrored = row > col;
        let (srow, scol) = if mirrored { (col, row) } else { (row, col) };
        let (found, comparisons) = self.search_row(srow, scol as u32);
        let block = found.map(|idx| {
            let e = &self.blocks[idx];
            BlockRef {
                data: &self.values[e.value_start..e.value_start + e.area()],
                rows: e.height as usize,
                cols: e.width as usize,
                mirrored,
            }
        });
        Ok((block, comparisons))
    }

    /// Diagonal block view; diagonal blocks are always stored.
    pub fn diagonal_block(&self, block: usize) -> BlockRef<'_> {
        self.get_block(block, block)
            .expect("diagonal id in range")
            .expect("diagonal block stored")
    }

    /// Add a dense contribution into an existing block. Mirrored positions are
    /// transposed into the stored upper-triangle block.
    pub fn add_to_block(
        &mut self,
        row: usize,
        col: usize,
        contribution: &DMatrix<f64>,
    ) -> Result<(), BsmcError> {
        let n = self.layout.n_blocks();
        if row >= n || col >= n {
            return Err(BsmcError::IndexOutOfRange {
                row,
                col,
                n_blocks: n,
            });
        }
        let mirrored = row > col;
        let (srow, scol) = if mirrored { (col, row) } else { (row, col) };
        let idx = self
            .find_block(srow, scol)
            .ok_or(BsmcError::MissingBlock { row, col })?;
        let e = self.blocks[idx];
        let (want_h, want_w) = if mirrored {
            (e.width as usize, e.height as usize)
        } else {
            (e.height as usize, e.width as usize)
        };
        if contribution.nrows() != want_h || contribution.ncols() != want_w {
            return Err(BsmcError::DimensionMismatch {
                row,
                col,
                got_h: contribution.nrows(),
                got_w: contribution.ncols(),
                want_h,
                want_w,
            });
        }
        let data = &mut self.values[e.value_start..e.value_start + e.area()];
        let w = e.width as usize;
        if mirrored {
            for r in 0..want_h {
                for c in 0..want_w {
                    data[c * w + r] += contribution[(r, c)];
                }
            }
        } else {
            for r in 0..want_h {
                for c in 0..want_w {
                    data[r * w + c] += contribution[(r, c)];
                }
            }
        }
        Ok(())
    }

    /// Full symmetric matrix-vector product.
    pub fn mat_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>, BsmcError> {
        if x.len() != self.dim() {
            return Err(BsmcError::VectorDimensionMismatch {
                got: x.len(),
                want: self.dim(),
            });
        }
        let mut y = DVector::zeros(self.dim());
        self.mat_vec_range(0, self.blocks.len(), x.as_slice(), y.as_mut_slice());
        Ok(y)
    }

    /// Expand blocks `lo..hi` into `y`; off-diagonal blocks contribute both
    /// the block and its transpose.
    fn mat_vec_range(&self, lo: usize, hi: usize, x: &[f64], y: &mut [f64]) {
        for e in &self.blocks[lo..hi] {
            let row_off = self.layout.offset(e.row_id as usize);
            let col_off = self.layout.offset(e.col_id as usize);
            let h = e.height as usize;
            let w = e.width as usize;
            let data = &self.values[e.value_start..e.value_start + e.area()];
            for r in 0..h {
                let mut acc = 0.0;
                let row_data = &data[r * w..(r + 1) * w];
                for c in 0..w {
                    acc += row_data[c] * x[col_off + c];
                }
                y[row_off + r] += acc;
            }
            if e.row_id != e.col_id {
                for r in 0..h {
                    let xr = x[row_off + r];
                    let row_data = &data[r * w..(r + 1) * w];
                    for c in 0..w {
                        y[col_off + c] += row_data[c] * xr;
                    }
                }
            }
        }
    }

    /// Parallel mat-vec: blocks are divided into `n_groups` contiguous groups,
    /// each accumulating into a private output vector; the group outputs are
    /// then summed in ascending group order, so the result is reproducible for
    /// a fixed group count.
    pub fn mat_vec_parallel(
        &self,
        x: &DVector<f64>,
        n_groups: usize,
    ) -> Result<DVector<f64>, BsmcError> {
        if n_groups <= 1 {
            return self.mat_vec(x);
        }
        if x.len() != self.dim() {
            return Err(BsmcError::VectorDimensionMismatch {
                got: x.len(),
                want: self.dim(),
            });
        }
        let n_groups = n_groups.min(self.blocks.len().max(1));
        let per = self.blocks.len().div_ceil(n_groups);
        let ranges: Vec<(usize, usize)> = (0..n_groups)
            .map(|g| {
                let lo = (g * per).min(self.blocks.len());
                let hi = ((g + 1) * per).min(self.blocks.len());
                (lo, hi)
            })
            .collect();
        use rayon::prelude::*;
        let partials: Vec<Vec<f64>> = ranges
            .par_iter()
            .map(|&(lo, hi)| {
                let mut y = vec![0.0; self.dim()];
                self.mat_vec_range(lo, hi, x.as_slice(), &mut y);
                y
            })
            .collect();
        let mut y = DVector::zeros(self.dim());
        for partial in partials {
            for (yi, pi) in y.iter_mut().zip(partial) {
                *yi += pi;
            }
        }
        Ok(y)
    }

    /// Add another matrix into this one. With an annotation the contribution's
    /// local block ids are remapped to global ids first. Blocks missing from
    /// the target structure are created (structure union).
    pub fn merge_add(
        &mut self,
        contribution: &BsmcMatrix,
        id_map: Option<&GlobalIdAnnotation>,
    ) -> Result<(), BsmcError> {
        let n = self.layout.n_blocks();
        if let Some(map) = id_map {
            if map.pairs.len() != contribution.blocks.len() {
                return Err(BsmcError::AnnotationLengthMismatch {
                    got: map.pairs.len(),
                    want: contribution.blocks.len(),
                });
            }
        }
        // Resolve target positions and validate shapes up front.
        let mut targets = Vec::with_capacity(contribution.blocks.len());
        for (i, e) in contribution.blocks.iter().enumerate() {
            let (gcol, grow) = match id_map {
                Some(map) => {
                    let (c, r) = map.pairs[i];
                    if c as usize >= n || r as usize >= n {
                        return Err(BsmcError::UnknownGlobalId {
                            index: i,
                            row: r as usize,
                            col: c as usize,
                        });
                    }
                    (c as usize, r as usize)
                }
                None => (e.col_id as usize, e.row_id as usize),
            };
            let mirrored = grow > gcol;
            let (srow, scol) = if mirrored { (gcol, grow) } else { (grow, gcol) };
            let (want_h, want_w) = if mirrored {
                (self.layout.size(scol), self.layout.size(srow))
            } else {
                (self.layout.size(srow), self.layout.size(scol))
            };
            if e.height as usize != want_h || e.width as usize != want_w {
                return Err(BsmcError::DimensionMismatch {
                    row: grow,
                    col: gcol,
                    got_h: e.height as usize,
                    got_w: e.width as usize,
                    want_h,
                    want_w,
                });
            }
            targets.push((srow as u32, scol as u32, mirrored));
        }

        let missing: Vec<(u32, u32)> = targets
            .iter()
            .filter(|&&(r, c, _)| self.find_block(r as usize, c as usize).is_none())
            .map(|&(r, c, _)| (r, c))
            .collect();
        if !missing.is_empty() {
            self.grow_structure(&missing)?;
        }

        for (e, &(srow, scol, mirrored)) in contribution.blocks.iter().zip(&targets) {
            let idx = self
                .find_block(srow as usize, scol as usize)
                .expect("union formed");
            let t = self.blocks[idx];
            let src = &contribution.values[e.value_start..e.value_start + e.area()];
            let dst = &mut self.values[t.value_start..t.value_start + t.area()];
            let (h, w) = (e.height as usize, e.width as usize);
            if mirrored {
                for r in 0..h {
                    for c in 0..w {
                        dst[c * h + r] += src[r * w + c];
                    }
                }
            } else {
                for v in dst.iter_mut().zip(src) {
                    *v.0 += v.1;
                }
            }
        }
        Ok(())
    }

    /// Extend the structure with new upper-triangle blocks, preserving values.
    fn grow_structure(&mut self, extra: &[(u32, u32)]) -> Result<(), BsmcError> {
        let mut pairs = self.structure();
        pairs.extend_from_slice(extra);
        let grown = BsmcMatrix::zeros_with_structure(self.layout.clone(), &pairs)?;
        let mut grown = grown;
        for e in &self.blocks {
            let idx = grown
                .find_block(e.row_id as usize, e.col_id as usize)
                .expect("old block kept");
            let t = grown.blocks[idx];
            grown.values[t.value_start..t.value_start + t.area()]
                .copy_from_slice(&self.values[e.value_start..e.value_start + e.area()]);
        }
        *self = grown;
        Ok(())
    }

    /// Apply `f` to every stored block's row-major values.
    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(usize, usize, usize, usize, &mut [f64])) {
        for e in &self.blocks {
            f(
                e.row_id as usize,
                e.col_id as usize,
                e.height as usize,
                e.width as usize,
                &mut self.values[e.value_start..e.value_start + e.area()],
            );
        }
    }

    /// Expand to a dense symmetric matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (row, col, h, w, data) in self.iter_blocks() {
            let ro = self.layout.offset(row);
            let co = self.layout.offset(col);
            for r in 0..h {
                for c in 0..w {
                    m[(ro + r, co + c)] = data[r * w + c];
                    if row != col {
                        m[(co + c, ro + r)] = data[r * w + c];
                    }
                }
            }
        }
        m
    }

    /// Byte count of the stored arrays: values as 8-byte floats, per-block
    /// metadata as 4 four-byte ids, per-row starts (n+1 entries) as 4-byte
    /// integers. Derived caches are not counted.
    pub fn audited_bytes(&self) -> u64 {
        8 * self.values.len() as u64
            + 16 * self.blocks.len() as u64
            + 4 * (self.row_starts.len() as u64)
    }

    /// Byte count in the three-array accounting: values, 3 ids per block
    /// (column id, width, height) and one start index per block row. Row ids
    /// are implied by row counting in that packing.
    pub fn audited_bytes_compat(&self) -> u64 {
        8 * self.values.len() as u64
            + 12 * self.blocks.len() as u64
            + 4 * self.layout.n_blocks() as u64
    }
}

fn push_entry(
    entries: &mut Vec<BlockEntry>,
    layout: &BlockLayout,
    row: usize,
    col: usize,
    value_start: usize,
) -> usize {
    let e = BlockEntry {
        col_id: col as u32,
        row_id: row as u32,
        width: layout.sizes[col],
        height: layout.sizes[row],
        value_start,
    };
    entries.push(e);
    value_start + e.area()
}

fn copy_row_major(m: &DMatrix<f64>, out: &mut [f64]) {
    let w = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..w {
            out[r * w + c] = m[(r, c)];
        }
    }
}
