//! Binary PGM (P5) and PPM (P6) encoding and decoding, 8-bit only.

use crate::error::{Error, Result};
use std::path::Path;

/// Decoded 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    encode("P5", width, height, 1, data)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode("P6", width, height, 3, rgb)
}

fn encode(magic: &str, width: usize, height: usize, per_px: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height * per_px {
        return Err(Error::Argument(format!(
            "{magic}: {} bytes for a {width}x{height} image",
            data.len()
        )));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return None;
    }
    Some((tokens, i + 1))
}

/// Parses a binary 8-bit PGM.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Gray, String> {
    let (tokens, offset) = header_tokens(bytes, 4).ok_or("truncated PGM header")?;
    if tokens[0] != "P5" {
        return Err(format!("expected P5 magic, found {:?}", tokens[0]));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header field {s:?}"))
    };
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, found {maxval}"));
    }
    let raster = &bytes[offset..];
    if raster.len() != width * height {
        return Err(format!(
            "expected {} raster bytes, found {}",
            width * height,
            raster.len()
        ));
    }
    Ok(Gray {
        width,
        height,
        data: raster.to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Blue (t = 0) through green to red (t = 1).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let q = |v: f64| (v * 255.0).round() as u8;
    [q(t), q(1.0 - (2.0 * t - 1.0).abs()), q(1.0 - t)]
}

/// Maps `v` in `[lo, hi]` to `0..=255`, clamping outside values.
pub fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    if !(hi > lo) || v.is_nan() {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_header() {
        let data: Vec<u8> = (0..12).collect();
        let bytes = encode_pgm(4, 3, &data).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let g = decode_pgm(&bytes).unwrap();
        assert_eq!((g.width, g.height), (4, 3));
        assert_eq!(g.data, data);
    }

    #[test]
    fn ppm_header_is_exact() {
        let bytes = encode_ppm(2, 1, &[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(bytes.len(), 17);
        assert!(encode_ppm(2, 2, &[0; 6]).is_err());
    }

    #[test]
    fn decode_accepts_comments_and_rejects_garbage() {
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend([9, 8, 7, 6]);
        assert_eq!(decode_pgm(&bytes).unwrap().data, vec![9, 8, 7, 6]);
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n65535\n\x00\x00\x00\x00").is_err());
        assert!(decode_pgm(b"").is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(0.5), [128, 255, 128]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        assert_eq!(colormap(f64::NAN), [0, 0, 255]);
        assert_eq!(quantize(0.5, 0.0, 1.0), 128);
        assert_eq!(quantize(3.0, 0.0, 1.0), 255);
        assert_eq!(quantize(1.0, 1.0, 1.0), 0);
    }
}
