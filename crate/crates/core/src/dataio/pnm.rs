//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

impl PnmKind {
    fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }

    fn magic(self) -> &'static [u8; 2] {
        match self {
            PnmKind::Gray => b"P5",
            PnmKind::Rgb => b"P6",
        }
    }
}

/// Raw decoded raster: interleaved 8-bit samples, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
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

    fn number(&mut self, what: &str) -> std::result::Result<u32, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("{what} out of range"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let header_err = |reason: String| Error::PnmHeader {
        path: path.to_path_buf(),
        reason,
    };
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err(header_err("missing P5/P6 magic".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width").map_err(header_err)?;
    let height = h.number("height").map_err(header_err)?;
    let maxval = h.number("maxval").map_err(header_err)?;
    if width == 0 || height == 0 {
        return Err(header_err(format!("empty raster {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::PnmMaxval {
            path: path.to_path_buf(),
            maxval,
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(header_err("no whitespace after maxval".into()));
    }
    let payload = &bytes[h.pos + 1..];
    let (width, height) = (width as usize, height as usize);
    let expected = width * height * kind.channels();
    if payload.len() < expected {
        return Err(Error::PnmTruncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    Ok(Pnm {
        kind,
        width,
        height,
        pixels: payload[..expected].to_vec(),
    })
}

pub fn encode(p: &Pnm) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.pixels.len() + 20);
    out.extend_from_slice(p.kind.magic());
    out.extend_from_slice(format!("\n{} {}\n255\n", p.width, p.height).as_bytes());
    out.extend_from_slice(&p.pixels);
    out
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, path)
}

pub fn write(p: &Pnm, path: &Path) -> Result<()> {
    fs::write(path, encode(p)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Quantizes a value in [0,1] to a byte: round(v·255).
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
