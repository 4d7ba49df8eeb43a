//! Binary PGM (P5) images with maxval 255.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a P5 file. Header fields are separated by whitespace and may
    /// be interleaved with `#` comments; maxval must be at most 255.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Decode {
            what: "PGM",
            reason: reason.into(),
        };
        if !bytes.starts_with(b"P5") {
            return Err(bad("missing P5 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in fields.iter_mut() {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos || pos - start > 9 {
                return Err(bad("expected a header number"));
            }
            *f = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().unwrap();
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("header must end with one whitespace byte"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(bad("maxval must be in 1..=255"));
        }
        let n = width.checked_mul(height).ok_or_else(|| bad("image too large"))?;
        let pixels = &bytes[pos..];
        if pixels.len() != n {
            return Err(bad(&format!("expected {n} pixel bytes, found {}", pixels.len())));
        }
        if pixels.iter().any(|&p| p as usize > maxval) {
            return Err(bad("pixel above maxval"));
        }
        Ok(Pgm {
            width,
            height,
            pixels: pixels.to_vec(),
        })
    }
}
