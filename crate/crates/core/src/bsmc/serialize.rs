//! Binary encoding of a block matrix, little-endian throughout:
//!
//! ```text
//! magic "BSMC" | version u32 | n_blocks u32 | n_block_rows u32 | total_dim u32
//! | flags u32 (bit 0: global-id annotation present)
//! | layout block sizes (n_block_rows x u32)
//! | row_starts ((n_block_rows + 1) x u32)
//! | block meta (n_blocks x 4 x u32: col_id, row_id, width, height)
//! | values (sum of block areas x f64)
//! | annotation (n_blocks x 2 x u32: col_id, row_id), if flagged
//! | crc32 of all preceding bytes
//! ```

use super::{BlockLayout, BsmcError, BsmcMatrix, GlobalIdAnnotation};

pub const MAGIC: [u8; 4] = *b"BSMC";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_ANNOTATION: u32 = 1;

impl BsmcMatrix {
    pub fn serialize(&self, annotation: Option<&GlobalIdAnnotation>) -> Vec<u8> {
        if let Some(a) = annotation {
            assert_eq!(
                a.pairs.len(),
                self.blocks.len(),
                "annotation must cover every block"
            );
        }
        let n_rows = self.layout.n_blocks();
        let mut out = Vec::with_capacity(
            28 + 4 * (2 * n_rows + 1) + 16 * self.blocks.len() + 8 * self.values.len() + 4,
        );
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.blocks.len() as u32);
        put_u32(&mut out, n_rows as u32);
        put_u32(&mut out, self.dim() as u32);
        put_u32(&mut out, if annotation.is_some() { FLAG_ANNOTATION } else { 0 });
        for &s in self.layout.sizes() {
            put_u32(&mut out, s);
        }
        for &s in &self.row_starts {
            put_u32(&mut out, s as u32);
        }
        for e in &self.blocks {
            put_u32(&mut out, e.col_id);
            put_u32(&mut out, e.row_id);
            put_u32(&mut out, e.width);
            put_u32(&mut out, e.height);
        }
        for &v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(a) = annotation {
            for &(col, row) in &a.pairs {
                put_u32(&mut out, col);
                put_u32(&mut out, row);
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn deserialize(
        bytes: &[u8],
    ) -> Result<(BsmcMatrix, Option<GlobalIdAnnotation>), BsmcError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(4, format!("unsupported version {version}")));
        }
        let n_blocks = r.u32()? as usize;
        let n_rows = r.u32()? as usize;
        let total_dim = r.u32()? as usize;
        let flags = r.u32()?;
        if flags & !FLAG_ANNOTATION != 0 {
            return Err(corrupt(20, format!("unknown flags {flags:#x}")));
        }
        if n_rows == 0 {
            return Err(corrupt(12, "zero block rows"));
        }

        let mut sizes = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            sizes.push(r.u32()?);
        }
        let layout = BlockLayout::new(sizes)
            .map_err(|e| corrupt(24, format!("bad layout: {e}")))?;
        if layout.dim() != total_dim {
            return Err(corrupt(
                16,
                format!("dimension {total_dim} does not match layout {}", layout.dim()),
            ));
        }

        let mut row_starts = Vec::with_capacity(n_rows + 1);
        for _ in 0..=n_rows {
            row_starts.push(r.u32()? as usize);
        }
        if row_starts[0] != 0 || *row_starts.last().unwrap() != n_blocks {
            return Err(corrupt(r.pos, "row starts do not cover the blocks"));
        }

        let meta_pos = r.pos;
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut value_start = 0usize;
        for i in 0..n_blocks {
            let col_id = r.u32()?;
            let row_id = r.u32()?;
            let width = r.u32()?;
            let height = r.u32()?;
            if row_id as usize >= n_rows || col_id as usize >= n_rows || row_id > col_id {
                return Err(corrupt(meta_pos + 16 * i, "block ids out of range"));
            }
            if width as usize != layout.size(col_id as usize)
                || height as usize != layout.size(row_id as usize)
            {
                return Err(corrupt(meta_pos + 16 * i, "block shape disagrees with layout"));
            }
            blocks.push(super::BlockEntry {
                col_id,
                row_id,
                width,
                height,
                value_start,
            });
            value_start += (width as usize) * (height as usize);
        }
        // Canonical order, diagonal presence and row_starts consistency.
        for row in 0..n_rows {
            let (lo, hi) = (row_starts[row], row_starts[row + 1]);
            if lo > hi || hi > n_blocks {
                return Err(corrupt(r.pos, "row starts not monotone"));
            }
            if lo == hi || blocks[lo].row_id as usize != row || blocks[lo].col_id as usize != row {
                return Err(corrupt(meta_pos, format!("diagonal block {row} missing")));
            }
            for i in lo..hi {
                if blocks[i].row_id as usize != row {
                    return Err(corrupt(meta_pos + 16 * i, "block in wrong row segment"));
                }
                if i > lo && blocks[i].col_id <= blocks[i - 1].col_id {
                    return Err(corrupt(meta_pos + 16 * i, "column ids not increasing"));
                }
            }
        }

        let mut values = Vec::with_capacity(value_start);
        for _ in 0..value_start {
            values.push(r.f64()?);
        }

        let annotation = if flags & FLAG_ANNOTATION != 0 {
            let mut pairs = Vec::with_capacity(n_blocks);
            for _ in 0..n_blocks {
                let col = r.u32()?;
                let row = r.u32()?;
                pairs.push((col, row));
            }
            Some(GlobalIdAnnotation { pairs })
        } else {
            None
        };

        let crc_pos = r.pos;
        let stored_crc = r.u32()?;
        let computed = crc32fast::hash(&bytes[..crc_pos]);
        if stored_crc != computed {
            return Err(corrupt(crc_pos, "crc mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(corrupt(r.pos, "trailing bytes"));
        }

        Ok((
            BsmcMatrix {
                layout,
                values,
                blocks,
                row_starts,
            },
            annotation,
        ))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn corrupt(offset: usize, detail: impl Into<String>) -> BsmcError {
    BsmcError::CorruptStream {
        offset,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BsmcError> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(self.bytes.len(), "unexpected end of stream"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BsmcError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, BsmcError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
