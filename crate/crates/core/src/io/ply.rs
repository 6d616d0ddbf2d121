//! Point cloud export as PLY 1.0 with a height colormap.

use super::IoError;
use crate::problem::BaProblem;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Write the 3D points colored blue (low) to red (high) over the 1st to 99th
/// height percentile. Returns the vertex count.
pub fn export_ply(
    problem: &BaProblem,
    path: impl AsRef<Path>,
    format: PlyFormat,
) -> Result<usize, IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = problem.n_points();
    writeln!(w, "ply")?;
    match format {
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    writeln!(w, "element vertex {n}")?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    for c in ["red", "green", "blue"] {
        writeln!(w, "property uchar {c}")?;
    }
    writeln!(w, "end_header")?;

    let mut heights: Vec<f64> = problem.points.iter().map(|p| p.z).collect();
    heights.sort_unstable_by(f64::total_cmp);
    let percentile = |q: f64| -> f64 {
        if heights.is_empty() {
            return 0.0;
        }
        let idx = ((heights.len() - 1) as f64 * q).round() as usize;
        heights[idx]
    };
    let lo = percentile(0.01);
    let hi = percentile(0.99);
    let span = (hi - lo).max(f64::MIN_POSITIVE);

    for p in &problem.points {
        let t = ((p.z - lo) / span).clamp(0.0, 1.0);
        let red = (t * 255.0).round() as u8;
        let blue = 255 - red;
        match format {
            PlyFormat::Ascii => {
                writeln!(
                    w,
                    "{} {} {} {red} 0 {blue}",
                    p.x as f32, p.y as f32, p.z as f32
                )?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x as f32, p.y as f32, p.z as f32] {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&[red, 0, blue])?;
            }
        }
    }
    w.flush()?;
    Ok(n)
}
