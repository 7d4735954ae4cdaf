//! Binary Netpbm: PPM (P6) for RGB images, PGM (P5) for masks and heatmaps.

use std::path::Path;

use super::image::{GrayImage, Image};
use crate::error::{Error, Result};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, body) = parse(bytes, b"P6", 3)?;
    Image::new(w, h, body.to_vec())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (w, h, body) = parse(bytes, b"P5", 1)?;
    GrayImage::new(w, h, body.to_vec())
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

fn parse<'a>(bytes: &'a [u8], magic: &[u8], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(cur.err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image extent"));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace after maxval")),
    }
    let need = width * height * channels;
    let body = &bytes[cur.pos..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("raster truncated: need {need} bytes, found {}", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::Parse {
            offset: cur.pos + need,
            msg: "trailing bytes after raster".into(),
        });
    }
    Ok((width, height, body))
}
