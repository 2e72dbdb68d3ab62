//! Minimal PGM (portable graymap) reader/writer. Images are exchanged with
//! the rest of the crate as f64 pixels in [0,1].

use std::fs;
use std::path::Path;

use crate::error::{CpError, Result};

/// Writes a binary (P5) PGM with maxval 255. Values are clamped to [0,1]
/// and rounded to the nearest byte.
pub fn write_pgm(path: &Path, h: usize, w: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != h * w {
        return Err(CpError::Dim(format!(
            "pgm write: {} pixels for a {h}x{w} image",
            pixels.len()
        )));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| CpError::io(path, e))
}

fn data_err(path: &Path, offset: usize, msg: &str) -> CpError {
    CpError::Data(format!("{}: byte {offset}: {msg}", path.display()))
}

/// Pulls the next whitespace-delimited ASCII token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

fn parse_usize(path: &Path, bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let at = *pos;
    let tok = next_token(bytes, pos).ok_or_else(|| data_err(path, at, "unexpected end of file"))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| data_err(path, at, &format!("invalid {what}")))
}

/// Reads a P2 (ASCII) or P5 (binary) PGM, returning (h, w, pixels in [0,1]).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| CpError::io(path, e))?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| data_err(path, 0, "empty file"))?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(data_err(path, 0, "not a P2/P5 PGM")),
    };
    let w = parse_usize(path, &bytes, &mut pos, "width")?;
    let h = parse_usize(path, &bytes, &mut pos, "height")?;
    let maxval = parse_usize(path, &bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(data_err(path, pos, "maxval must be in 1..=255"));
    }
    if w == 0 || h == 0 {
        return Err(data_err(path, pos, "zero image dimension"));
    }

    let n = h * w;
    let mut pixels = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from raster data
        if pos >= bytes.len() {
            return Err(data_err(path, pos, "missing raster data"));
        }
        pos += 1;
        if bytes.len() < pos + n {
            return Err(data_err(path, bytes.len(), "truncated raster data"));
        }
        pixels.extend(bytes[pos..pos + n].iter().map(|&b| b as f64 / maxval as f64));
    } else {
        for _ in 0..n {
            let v = parse_usize(path, &bytes, &mut pos, "pixel")?;
            if v > maxval {
                return Err(data_err(path, pos, "pixel exceeds maxval"));
            }
            pixels.push(v as f64 / maxval as f64);
        }
    }
    Ok((h, w, pixels))
}
