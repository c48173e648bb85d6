//! Binary greymap (P5) reading and writing, and attention-row export.

use std::path::Path;

use super::fsutil::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Min-max scales `values` to 0–255; a constant input maps to mid grey.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

pub fn encode_pgm(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            len: values.len(),
        });
    }
    write_atomic(path, &encode_pgm(h, w, &to_gray(values)))
}

/// Parses a P5 file into `(h, w, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Usage(format!("invalid PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected magic P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit greymaps are supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok((h, w, data.to_vec()))
}

/// Rows of `a` for the requested query positions, each reshaped to `h × w`.
pub fn attention_rows(a: &DenseArray, positions: &[usize], h: usize, w: usize) -> Result<Vec<DenseArray>> {
    let n = a.rows();
    if n != h * w {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            len: n,
        });
    }
    positions
        .iter()
        .map(|&p| {
            if p >= n {
                return Err(Error::Usage(format!(
                    "position {p} out of range (valid positions are 0..={})",
                    n - 1
                )));
            }
            DenseArray::matrix(h, w, a.row(p).to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_scaling() {
        assert_eq!(to_gray(&[0.25; 4]), vec![128; 4]);
        assert_eq!(to_gray(&[0.0, 1.0, 0.0]), vec![0, 255, 0]);
        assert_eq!(to_gray(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
    }

    #[test]
    fn pgm_round_trip() {
        let px = vec![0, 10, 20, 30, 40, 255];
        let bytes = encode_pgm(2, 3, &px);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 3, px));
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn identity_attention_is_one_white_pixel() {
        let rows = attention_rows(&DenseArray::eye(6), &[4], 2, 3).unwrap();
        let g = to_gray(rows[0].data());
        assert_eq!(g, vec![0, 0, 0, 0, 255, 0]);
        let err = attention_rows(&DenseArray::eye(6), &[6], 2, 3).unwrap_err().to_string();
        assert!(err.contains("0..=5"), "{err}");
    }
}
