//! Minimal Netpbm codecs: grayscale PGM (P2/P5), bitmap PBM (P1) and color
//! PPM (P6), plus an atomic file writer used by every exporter.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded grayscale raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    /// Row-major samples, top row first.
    pub pixels: Vec<u32>,
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a str> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            None
        } else {
            std::str::from_utf8(&self.bytes[start..self.pos]).ok()
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        match self.token().and_then(|t| t.parse::<u32>().ok()) {
            Some(v) => Ok(v),
            None => fmt_err(format!("missing or malformed {what}")),
        }
    }
}

/// Decodes an ASCII (P2) or binary (P5) PGM.
pub fn decode_pgm(bytes: &[u8]) -> Result<Graymap> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token();
    let binary = match magic {
        Some("P2") => false,
        Some("P5") => true,
        other => return fmt_err(format!("not a PGM file (magic {other:?})")),
    };
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return fmt_err("PGM has zero size");
    }
    if maxval == 0 || maxval > 65535 {
        return fmt_err(format!("PGM maxval must be in 1..=65535, got {maxval}"));
    }
    let n = width * height;
    let mut pixels = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        if bytes.len() < start + need {
            return fmt_err("PGM raster truncated");
        }
        let data = &bytes[start..start + need];
        if wide {
            pixels.extend(
                data.chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32),
            );
        } else {
            pixels.extend(data.iter().map(|&b| b as u32));
        }
    } else {
        for _ in 0..n {
            pixels.push(h.number("pixel")?);
        }
    }
    if pixels.iter().any(|&p| p > maxval) {
        return fmt_err("PGM pixel exceeds maxval");
    }
    Ok(Graymap {
        width,
        height,
        maxval,
        pixels,
    })
}

/// Encodes an ASCII (P2) PGM, one raster row per line.
pub fn encode_pgm_ascii(map: &Graymap) -> Vec<u8> {
    let mut out = format!("P2\n{} {}\n{}\n", map.width, map.height, map.maxval);
    for row in map.pixels.chunks(map.width) {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

/// Encodes a binary (P5) PGM.
pub fn encode_pgm_binary(map: &Graymap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, map.maxval).into_bytes();
    for &p in &map.pixels {
        if map.maxval > 255 {
            out.extend_from_slice(&(p as u16).to_be_bytes());
        } else {
            out.push(p as u8);
        }
    }
    out
}

/// Encodes an ASCII (P1) bitmap; `true` is written as `1`.
pub fn encode_pbm(width: usize, height: usize, bits: &[bool]) -> Vec<u8> {
    let mut out = format!("P1\n{width} {height}\n");
    for row in bits.chunks(width.max(1)) {
        let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

/// Decodes an ASCII (P1) bitmap into `(width, height, bits)`.
pub fn decode_pbm(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let mut h = Header { bytes, pos: 0 };
    if h.token() != Some("P1") {
        return fmt_err("not an ASCII PBM file");
    }
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let mut bits = Vec::with_capacity(width * height);
    while bits.len() < width * height {
        h.skip_ws_and_comments();
        match bytes.get(h.pos) {
            Some(b'0') => bits.push(false),
            Some(b'1') => bits.push(true),
            _ => return fmt_err("PBM raster truncated or malformed"),
        }
        h.pos += 1;
    }
    Ok((width, height, bits))
}

/// Encodes an RGB image with components in `[0, 1]` as 8-bit binary PPM.
pub fn encode_ppm(width: usize, height: usize, rgb: &[f64]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(
        rgb.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Decodes a binary PPM into `(width, height, rgb in [0, 1])`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut h = Header { bytes, pos: 0 };
    if h.token() != Some("P6") {
        return fmt_err("not a binary PPM file");
    }
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return fmt_err(format!("unsupported PPM maxval {maxval}"));
    }
    let start = h.pos + 1;
    let n = width * height * 3;
    if bytes.len() < start + n {
        return fmt_err("PPM raster truncated");
    }
    let rgb = bytes[start..start + n]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok((width, height, rgb))
}

/// Writes `bytes` to `path` through a sibling temp file and a rename, so a
/// failed write never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_ascii_and_binary_decode_alike() {
        let map = Graymap {
            width: 3,
            height: 2,
            maxval: 1000,
            pixels: vec![0, 1, 2, 300, 999, 1000],
        };
        assert_eq!(decode_pgm(&encode_pgm_ascii(&map)).unwrap(), map);
        assert_eq!(decode_pgm(&encode_pgm_binary(&map)).unwrap(), map);
        let small = Graymap {
            width: 2,
            height: 1,
            maxval: 255,
            pixels: vec![7, 255],
        };
        assert_eq!(decode_pgm(&encode_pgm_binary(&small)).unwrap(), small);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let text = b"P2\n# a comment\n2 1\n# another\n10\n3 4\n";
        let map = decode_pgm(text).unwrap();
        assert_eq!(map.pixels, vec![3, 4]);
    }

    #[test]
    fn pgm_rejects_zero_maxval_and_garbage() {
        assert!(matches!(
            decode_pgm(b"P2\n2 2\n0\n0 0 0 0\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_pgm(b"P3\n1 1\n255\n0 0 0\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_pgm(b"P2\n2 2\n255\n1 2 3\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n5\n9\n"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn pbm_round_trip() {
        let bits = vec![true, false, false, true, true, true];
        let (w, h, back) = decode_pbm(&encode_pbm(3, 2, &bits)).unwrap();
        assert_eq!((w, h, back), (3, 2, bits));
    }

    #[test]
    fn ppm_round_trip_is_8bit() {
        let rgb = vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6];
        let (w, h, back) = decode_ppm(&encode_ppm(2, 1, &rgb)).unwrap();
        assert_eq!((w, h), (2, 1));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/file.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
