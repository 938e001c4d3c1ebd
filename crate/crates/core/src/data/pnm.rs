//! Binary portable graymap (P5) and pixmap (P6) files with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub data: Vec<u8>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> Option<String> {
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
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<PnmImage> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos).as_deref() {
        Some("P5") => 1,
        Some("P6") => 3,
        Some(m) => return Err(bad(path, format!("unsupported PNM magic {m:?} (expected P5 or P6)"))),
        None => return Err(bad(path, "empty file")),
    };
    let mut next = |what: &str| -> Result<usize> {
        token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(path, format!("missing or invalid {what}")))
    };
    let width = next("width")?;
    let height = next("height")?;
    let maxval = next("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(path, format!("maxval {maxval} unsupported (only 8-bit samples)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let len = width * height * channels;
    let raster = bytes
        .get(pos..pos + len)
        .ok_or_else(|| bad(path, format!("raster truncated: need {len} bytes")))?;
    Ok(PnmImage {
        width,
        height,
        channels,
        data: raster.to_vec(),
    })
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes, path)
}

fn write(path: &Path, magic: &str, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::ShapeMismatch {
            op: "write_pnm",
            dim: "samples",
            expected: width * height * channels,
            actual: data.len(),
        });
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write(path, "P5", width, height, 1, data)
}

/// `data` is interleaved RGB.
pub fn write_ppm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write(path, "P6", width, height, 3, data)
}
