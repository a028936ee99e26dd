//! Grayscale PGM images and CSV cross-sections.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pat_core::wave::SimGrid;
use pat_core::Tensor;

/// Encodes a 2-D field as binary 8-bit PGM, mapping `[lo, hi]` to `[0, 255]`
/// and clamping values outside. Row 0 of the image is the largest `y`.
pub fn encode_pgm(field: &Tensor, (lo, hi): (f64, f64)) -> Result<Vec<u8>> {
    let shape = field.shape();
    if shape.len() != 2 {
        bail!("PGM needs a 2-D field, got shape {shape:?}");
    }
    if !(hi > lo) {
        bail!("empty gray range [{lo}, {hi}]");
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        for c in 0..cols {
            let v = ((field.at2(r, c) - lo) / (hi - lo)).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, field: &Tensor, range: (f64, f64)) -> Result<()> {
    fs::write(path, encode_pgm(field, range)?).with_context(|| format!("writing {}", path.display()))
}

/// Grid row closest to the horizontal line at height `y`; a line halfway
/// between two rows takes the lower one.
pub fn row_for_line(grid: &SimGrid, y: f64) -> Result<usize> {
    let t = (y + grid.half_width()) / grid.dx();
    let i = (t - 0.5 - 1e-9).ceil();
    if !(i >= 0.0 && i < grid.n() as f64) {
        bail!("line y = {y} lies outside the grid [-{0}, {0})", grid.half_width());
    }
    Ok(i as usize)
}

/// `x,c_true,c_est` rows along grid row `row`, one per column.
pub fn cross_section_csv(grid: &SimGrid, truth: &Tensor, estimate: &Tensor, row: usize) -> String {
    let mut s = String::from("x,c_true,c_est\n");
    for col in 0..grid.n() {
        let _ = writeln!(s, "{},{},{}", grid.coord(col), truth.at2(row, col), estimate.at2(row, col));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.25]).unwrap();
        let bytes = encode_pgm(&t, (0.0, 1.0)).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // top image row is the last tensor row
        assert_eq!(&bytes[header.len()..], &[0, 255, 64, 0, 128, 255]);
        assert!(encode_pgm(&t, (1.0, 1.0)).is_err());
    }

    #[test]
    fn line_rows() {
        let grid = SimGrid::new(64, 1.28).unwrap();
        assert_eq!(row_for_line(&grid, 0.0).unwrap(), 32);
        assert_eq!(row_for_line(&grid, -0.5).unwrap(), 19);
        assert_eq!(row_for_line(&grid, 0.5).unwrap(), 44);
        assert_eq!(row_for_line(&grid, 0.51).unwrap(), 45);
        assert_eq!(row_for_line(&grid, -1.28).unwrap(), 0);
        assert!(row_for_line(&grid, 1.5).is_err());
    }
}
