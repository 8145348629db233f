//! PGM (P2 ASCII / P5 binary) reader and writer.
//!
//! Mini-MIAS ships its mammograms as 8-bit P5 files. 16-bit P5 samples are
//! big-endian per the netpbm format.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::image::{GrayImage, ImageError};

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("not a PGM file: magic {0:?} (expected P2 or P5)")]
    BadMagic(String),
    #[error("malformed PGM header: {0}")]
    BadHeader(String),
    #[error("max_val {0} out of range [1, 65535]")]
    MaxValOutOfRange(u64),
    #[error("truncated pixel data: expected {expected} samples, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid ASCII sample {token:?} at index {index}")]
    BadSample { index: usize, token: String },
    #[error("sample {index} has value {value} above max_val {max_val}")]
    SampleAboveMax { index: usize, value: u32, max_val: u16 },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmFormat {
    Ascii,
    Binary,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.data.len() {
            let c = self.data[self.pos];
            if c == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' && self.data[self.pos] != b'\r' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() && self.data[self.pos] != b'#' {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.data[start..self.pos])
    }

    fn header_number(&mut self, what: &str) -> Result<u64, PgmError> {
        let tok = self
            .token()
            .ok_or_else(|| PgmError::BadHeader(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| PgmError::BadHeader(format!("{what} is not a number: {:?}", String::from_utf8_lossy(tok))))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 {
        return Err(PgmError::BadMagic(String::from_utf8_lossy(bytes).into_owned()));
    }
    let format = match &bytes[..2] {
        b"P2" => PgmFormat::Ascii,
        b"P5" => PgmFormat::Binary,
        other => return Err(PgmError::BadMagic(String::from_utf8_lossy(other).into_owned())),
    };
    let mut cur = Cursor { data: bytes, pos: 2 };
    if cur.pos < bytes.len() && !bytes[cur.pos].is_ascii_whitespace() && bytes[cur.pos] != b'#' {
        return Err(PgmError::BadMagic(String::from_utf8_lossy(&bytes[..3]).into_owned()));
    }
    let width = cur.header_number("width")? as usize;
    let height = cur.header_number("height")? as usize;
    let max_val = cur.header_number("max_val")?;
    if !(1..=65535).contains(&max_val) {
        return Err(PgmError::MaxValOutOfRange(max_val));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::ZeroDimension { width, height }.into());
    }
    let max_val = max_val as u16;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| PgmError::BadHeader("dimensions overflow".into()))?;

    let pixels = match format {
        PgmFormat::Binary => {
            // exactly one whitespace byte separates the header from the raster
            if cur.pos >= bytes.len() {
                return Err(PgmError::Truncated { expected: n, found: 0 });
            }
            let raster = &bytes[cur.pos + 1..];
            let wide = max_val > 255;
            let bps = if wide { 2 } else { 1 };
            if raster.len() < n * bps {
                return Err(PgmError::Truncated { expected: n, found: raster.len() / bps });
            }
            let mut px = Vec::with_capacity(n);
            for i in 0..n {
                let v = if wide {
                    u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]])
                } else {
                    raster[i] as u16
                };
                if v > max_val {
                    return Err(PgmError::SampleAboveMax { index: i, value: v as u32, max_val });
                }
                px.push(v);
            }
            px
        }
        PgmFormat::Ascii => {
            let mut px = Vec::with_capacity(n);
            for i in 0..n {
                let tok = cur.token().ok_or(PgmError::Truncated { expected: n, found: i })?;
                let v: u32 = std::str::from_utf8(tok)
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| PgmError::BadSample { index: i, token: String::from_utf8_lossy(tok).into_owned() })?;
                if v > max_val as u32 {
                    return Err(PgmError::SampleAboveMax { index: i, value: v, max_val });
                }
                px.push(v as u16);
            }
            px
        }
    };
    Ok(GrayImage::new(width, height, max_val, pixels)?)
}

pub fn encode_pgm(img: &GrayImage, format: PgmFormat) -> Vec<u8> {
    let (w, h) = img.dims();
    match format {
        PgmFormat::Binary => {
            let mut out = format!("P5\n{} {}\n{}\n", w, h, img.max_val()).into_bytes();
            if img.max_val() > 255 {
                for &p in img.pixels() {
                    out.extend_from_slice(&p.to_be_bytes());
                }
            } else {
                out.extend(img.pixels().iter().map(|&p| p as u8));
            }
            out
        }
        PgmFormat::Ascii => {
            let mut out = format!("P2\n{} {}\n{}\n", w, h, img.max_val());
            for row in img.pixels().chunks(w) {
                let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
    }
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, PgmError> {
    let bytes = fs::read(path).map_err(|source| PgmError::Io { path: path.display().to_string(), source })?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), PgmError> {
    fs::write(path, encode_pgm(img, PgmFormat::Binary))
        .map_err(|source| PgmError::Io { path: path.display().to_string(), source })
}
