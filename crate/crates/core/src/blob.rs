//! Flat little-endian `f64` blobs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Mat;

pub fn write_mat(path: &Path, m: &Mat) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_mat(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    let bytes = fs::read(path)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Parse(format!(
            "{}: expected {} bytes for {rows}x{cols}, found {}",
            path.display(),
            rows * cols * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Turns a dotted layer path plus suffix into a flat file name.
pub fn file_name(path: &str, suffix: &str) -> String {
    let clean: String = path
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}{suffix}")
}
