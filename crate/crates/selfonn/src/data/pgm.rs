//! Binary PGM (P5) image I/O, 8-bit, with values normalized to [0, 1].

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Write a grayscale image (row-major, values in [0, 1]) as binary PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), height * width);
    let mut out = Vec::with_capacity(data.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(
        data.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out)?;
    Ok(())
}

/// Read a binary PGM into (height, width, values in [0, 1]).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let err = |msg: &str| Error::Manifest {
        path: path.display().to_string(),
        line: 0,
        msg: msg.to_string(),
    };
    let mut pos = 0usize;

    // header tokens separated by whitespace, '#' comments run to end of line
    let mut token = |bytes: &[u8]| -> Option<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes).as_deref() != Some("P5") {
        return Err(err("not a binary PGM (expected P5)"));
    }
    let width: usize = token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad width"))?;
    let height: usize = token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad height"))?;
    let maxval: usize = token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(err("maxval must be in 1..=255"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(err("truncated pixel data"));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok((height, width, data))
}

/// Bilinear resize to a new height, preserving aspect ratio:
/// `new_width = round(width * new_height / height)`.
pub fn resize_to_height(
    data: &[f64],
    height: usize,
    width: usize,
    new_height: usize,
) -> (usize, Vec<f64>) {
    assert_eq!(data.len(), height * width);
    if height == new_height {
        return (width, data.to_vec());
    }
    let new_width = ((width * new_height) as f64 / height as f64).round().max(1.0) as usize;
    let sy = height as f64 / new_height as f64;
    let sx = width as f64 / new_width as f64;
    let mut out = vec![0.0; new_height * new_width];
    for oy in 0..new_height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, height as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..new_width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, width as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let wx = fx - x0 as f64;
            out[oy * new_width + ox] = (1.0 - wy) * (1.0 - wx) * data[y0 * width + x0]
                + (1.0 - wy) * wx * data[y0 * width + x1]
                + wy * (1.0 - wx) * data[y1 * width + x0]
                + wy * wx * data[y1 * width + x1];
        }
    }
    (new_width, out)
}
