//! Raw little-endian `f32` matrices, row-major, no header.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn write_f32_grid(path: impl AsRef<Path>, values: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_f64_grid_as_f32(path: impl AsRef<Path>, values: &Array2<f64>) -> Result<()> {
    write_f32_grid(path, &values.mapv(|v| v as f32))
}

pub fn read_f32_grid(path: impl AsRef<Path>, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::shape(
            format!("{} bytes for a {rows}x{cols} f32 grid", rows * cols * 4),
            format!("{} bytes in {}", bytes.len(), path.display()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked above"))
}
