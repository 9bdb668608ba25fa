//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use super::{Image, CHANNELS};
use crate::error::{Error, Result};

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Ppm {
        offset,
        msg: msg.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} does not fit")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(parse_err(0, "file too short for magic"));
    }
    if &bytes[..2] != b"P6" {
        return Err(parse_err(
            0,
            format!("unsupported magic {:?}", String::from_utf8_lossy(&bytes[..2])),
        ));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(maxval_at, "zero image dimension"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(parse_err(h.pos, "expected single whitespace before payload")),
    }
    let need = width * height * CHANNELS;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        ));
    }
    let pixels = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, pixels)
}

/// Quantizes with round-half-up.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.pixels()
            .iter()
            .map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingImage {
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    decode_ppm(&bytes)
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn white_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img.pixels(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn comments_in_header() {
        let img = decode_ppm(b"P6 # made by hand\n2 1\n# max\n255\n\x00\x00\x00\xff\x80\x00").unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.pixel(0, 1), [1.0, 128.0 / 255.0, 0.0]);
    }

    #[test]
    fn round_trip_within_quantization_bound() {
        let mut rng = Rng::new(11);
        let img = Image::from_fn(7, 5, |_, _| [rng.uniform(), rng.uniform(), rng.uniform()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn rejects_ascii_and_bad_headers() {
        let err = decode_ppm(b"P3\n1 1\n255\n255 255 255\n").unwrap_err();
        assert!(matches!(err, Error::Ppm { offset: 0, .. }));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n"), Err(Error::Ppm { .. })));
        assert!(matches!(decode_ppm(b"P6\nx 1\n255\n"), Err(Error::Ppm { offset: 3, .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let err = decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").unwrap_err();
        match err {
            Error::Ppm { offset, msg } => {
                assert_eq!(offset, 14);
                assert!(msg.contains("expected 12"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_ppm("/nonexistent/img.ppm").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/img.ppm"));
    }
}
