//! Binary Netpbm codec: 8-bit P5 grayscale, plus P6 color collapsed to luma.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded 8-bit raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<u8>,
}

pub fn encode_pgm(raster: &Raster) -> Vec<u8> {
    assert_eq!(raster.levels.len(), raster.height * raster.width);
    let mut out = format!("P5\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.levels);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed PNM header: bad {what}")))
    }
}

/// Decode a P5 (or P6, collapsed to luma) image with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PGM/PPM (expected P5 or P6 magic)".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}; only 8-bit (255) images are accepted")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("image has a zero dimension".into()));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed PNM header: missing separator".into()));
    }
    let payload = &bytes[h.pos + 1..];
    let need = width * height * channels;
    if payload.len() < need {
        return Err(Error::Format(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    let levels = if channels == 1 {
        payload[..need].to_vec()
    } else {
        payload[..need]
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8)
            .collect()
    };
    Ok(Raster { height, width, levels })
}

pub fn read_pnm(path: &Path) -> Result<Raster> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pgm(path: &Path, raster: &Raster) -> Result<()> {
    fs::write(path, encode_pgm(raster)).map_err(|e| Error::io(path, e))
}
