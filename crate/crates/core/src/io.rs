//! Binary PPM (P6) and PGM (P5) images.
//!
//! Samples map to `[0, 1]` as `v / maxval`. Both 8-bit and 16-bit
//! (`maxval > 255`, big-endian) files are read; writers emit 8-bit by default
//! and 16-bit through [`write_image16`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return format_err("not a binary PGM/PPM file (expected P5 or P6)"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comment lines.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return format_err("truncated header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return format_err("malformed header field");
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header field out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return format_err("missing whitespace after maxval");
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return format_err(format!("invalid header values {width}x{height} maxval {maxval}"));
    }
    Ok(Header { channels, width, height, maxval, data_start: pos + 1 })
}

/// Decodes a PGM/PPM byte buffer into a `1×C×H×W` tensor.
pub fn decode_image<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_header(bytes)?;
    let bps = if h.maxval > 255 { 2 } else { 1 };
    let count = h.channels * h.width * h.height;
    let body = &bytes[h.data_start..];
    if body.len() < count * bps {
        return format_err(format!("pixel data truncated: need {} bytes, got {}", count * bps, body.len()));
    }
    let scale = 1.0 / h.maxval as f64;
    let plane = h.width * h.height;
    let mut data = vec![T::zero(); count];
    for i in 0..count {
        let raw = if bps == 2 {
            u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
        } else {
            body[i] as f64
        };
        // Interleaved samples to planar.
        let (p, c) = (i / h.channels, i % h.channels);
        data[c * plane + p] = T::c(raw * scale);
    }
    Tensor::new(&[1, h.channels, h.height, h.width], data)
}

/// Reads a PGM/PPM file into a `1×C×H×W` tensor (C = 1 or 3).
pub fn read_image<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_image(&fs::read(path)?)
}

fn encode(img: &Tensor<impl Real>, maxval: u16) -> Result<Vec<u8>> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::Shape(format!("image writer needs 1×1×H×W or 1×3×H×W, got {:?}", img.shape())));
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    let plane = h * w;
    let m = maxval as f64;
    for p in 0..plane {
        for ch in 0..c {
            let v = img.data()[ch * plane + p].as_f64();
            let q = if v.is_finite() { (v.clamp(0.0, 1.0) * m).round() } else { 0.0 };
            if maxval > 255 {
                out.extend_from_slice(&(q as u16).to_be_bytes());
            } else {
                out.push(q as u8);
            }
        }
    }
    Ok(out)
}

/// Encodes a `1×C×H×W` tensor as 8-bit PGM (C = 1) or PPM (C = 3). Values
/// are clamped to `[0, 1]`; non-finite values become 0.
pub fn encode_image(img: &Tensor<impl Real>) -> Result<Vec<u8>> {
    encode(img, 255)
}

pub fn write_image(path: impl AsRef<Path>, img: &Tensor<impl Real>) -> Result<()> {
    fs::write(path, encode(img, 255)?)?;
    Ok(())
}

/// 16-bit variant of [`write_image`], used for depth maps scaled into `[0, 1]`.
pub fn write_image16(path: impl AsRef<Path>, img: &Tensor<impl Real>) -> Result<()> {
    fs::write(path, encode(img, 65535)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_at_8_bits() {
        let img = Tensor::<f64>::from_fn(&[1, 3, 4, 5], |i| ((i[1] * 20 + i[2] * 5 + i[3]) as f64) / 255.0);
        let back: Tensor<f64> = decode_image(&encode_image(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn pgm16_keeps_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        let img = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| (i[2] * 3 + i[3]) as f64 * 0.1 + 0.012345);
        write_image16(&path, &img).unwrap();
        let back: Tensor<f64> = read_image(&path).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 65535.0 + 1e-12);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img: Tensor<f32> = decode_image(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(decode_image::<f32>(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format(_))));
        assert!(matches!(decode_image::<f32>(b"P5\n4 4\n255\n\x00"), Err(Error::Format(_))));
        let t = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(matches!(encode_image(&t), Err(Error::Shape(_))));
    }
}
