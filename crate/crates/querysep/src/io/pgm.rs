//! Binary PGM (P5) image export for mask visualizations.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_replacing;

/// Quantization shared by the PGM and CSV mask exports.
pub fn mask_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes values in [0,1] as an 8-bit grayscale image, v -> round(v*255).
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| mask_byte(v as f64)).collect();
    write_pgm_bytes(path, width, height, &bytes)
}

/// Writes already-quantized pixels.
pub fn write_pgm_bytes(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    write_replacing(path, &buf)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_err = || Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "malformed PGM header".into(),
    };

    // Header: three whitespace-separated tokens after the magic, then a
    // single whitespace byte, then raw data.
    if !bytes.starts_with(b"P5") {
        return Err(header_err());
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?;
        fields.push(token.parse::<usize>().map_err(|_| header_err())?);
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 || bytes.len() < pos + width * height {
        return Err(header_err());
    }
    Ok((width, height, bytes[pos..pos + width * height].to_vec()))
}
