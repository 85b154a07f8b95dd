//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use super::{Image, SoftMask};
use crate::error::{Error, Result};

fn decode_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Decode {
        offset,
        message: message.into(),
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | b'\x0b' | b'\x0c' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(decode_error(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| decode_error(start, format!("{what} out of range")))
    }
}

/// Decodes a binary P5/P6 file with maxval 255.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(decode_error(0, "missing magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(decode_error(
                0,
                format!(
                    "unsupported magic {:?}, expected P5 or P6",
                    String::from_utf8_lossy(other)
                ),
            ))
        }
    };
    let mut header = HeaderReader { bytes, pos: 2 };
    let width = header.read_uint("width")?;
    let height = header.read_uint("height")?;
    header.skip_whitespace_and_comments();
    let maxval_offset = header.pos;
    let maxval = header.read_uint("maxval")?;
    if maxval != 255 {
        return Err(decode_error(
            maxval_offset,
            format!("maxval {maxval} unsupported, only 255 is accepted"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(decode_error(2, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(header.pos) {
        Some(b) if b.is_ascii_whitespace() => header.pos += 1,
        _ => return Err(decode_error(header.pos, "expected whitespace after maxval")),
    }
    let start = header.pos;
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| decode_error(2, "image dimensions overflow"))?;
    if bytes.len() < start + len {
        return Err(decode_error(
            bytes.len(),
            format!(
                "truncated payload: expected {len} bytes, found {}",
                bytes.len() - start
            ),
        ));
    }
    Image::new(width, height, channels, bytes[start..start + len].to_vec())
}

/// Encodes with the canonical header `P5\n<w> <h>\n255\n`.
pub fn encode_netpbm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let header = format!("{magic}\n{} {}\n255\n", image.width(), image.height());
    let mut out = Vec::with_capacity(header.len() + image.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(image.data());
    out
}

pub fn write_netpbm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_netpbm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SoftMask> {
    SoftMask::try_from(read_image(path)?)
}
