use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::GlyphImage;

pub fn encode_pgm(img: &GlyphImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), offset, msg: msg.into() }
    }

    fn skip_space(&mut self) {
        while let Some(&c) = self.buf.get(self.pos) {
            if c == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.fail(start, format!("{what} does not fit in an integer")))
    }
}

/// Parses a binary PGM. `path` is only used in error messages.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GlyphImage> {
    let mut h = Header { buf: bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(h.fail(0, "wrong magic, expected P5"));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.fail(maxval_at, format!("degenerate size {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(h.fail(maxval_at, format!("maxval {maxval} unsupported, need 1..=255")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.fail(h.pos, "missing whitespace after maxval"));
    }
    let body = h.pos + 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| h.fail(maxval_at, "image size overflows"))?;
    if bytes.len() - body < need {
        return Err(h.fail(bytes.len(), format!("truncated pixel data: {} of {need} bytes", bytes.len() - body)));
    }
    let scale = maxval as f32;
    let pixels = bytes[body..body + need].iter().map(|&b| (b as f32 / scale).min(1.0)).collect();
    Ok(GlyphImage { width, height, pixels })
}

pub fn save_image(img: &GlyphImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GlyphImage> {
    let path: PathBuf = path.as_ref().into();
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_pgm(&bytes, &path)
}
