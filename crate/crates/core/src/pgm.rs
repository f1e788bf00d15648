//! Binary PGM (P5, grayscale) and PPM (P6, RGB) image files.
//!
//! Pixels are stored as 8-bit values; in memory the crate works in
//! `f64 ∈ [0,1]`, quantized with rounding on write and divided by 255 on
//! read, so a write/read round trip is exact at the byte level.

use crate::error::Error;
use crate::Result;
use std::io::Read;
use std::path::Path;

/// Quantize a unit-interval value to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// In-memory encode as P5 (c == 1) or P6 (c == 3); pixels are row-major,
/// channel-last, values in [0,1].
pub fn encode(pixels: &[f64], h: usize, w: usize, c: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), h * w * c, "pixel buffer does not match {h}x{w}x{c}");
    assert!(c == 1 || c == 3, "image files support 1 or 3 channels, got {c}");
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut bytes = Vec::with_capacity(32 + pixels.len());
    bytes.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    bytes.extend(pixels.iter().map(|&v| to_byte(v)));
    bytes
}

pub fn write(path: &Path, pixels: &[f64], h: usize, w: usize, c: usize) -> Result<()> {
    std::fs::write(path, encode(pixels, h, w, c)).map_err(|e| Error::io(path, e))
}

/// Read a P5/P6 file back into unit-interval pixels. Returns (pixels, h, w, c).
pub fn read(path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    parse(&raw).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

fn parse(raw: &[u8]) -> std::result::Result<(Vec<f64>, usize, usize, usize), String> {
    let c = match raw.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a P5/P6 file".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and '#' comment lines
        loop {
            match raw.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while raw.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while raw.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "header field out of range".to_string())?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format!("only maxval 255 supported, got {maxval}"));
    }
    pos += 1; // single whitespace byte after maxval
    let n = h * w * c;
    let data = raw
        .get(pos..pos + n)
        .ok_or_else(|| format!("expected {n} pixel bytes, file has {}", raw.len().saturating_sub(pos)))?;
    Ok((data.iter().map(|&b| b as f64 / 255.0).collect(), h, w, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let pixels: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        write(&path, &pixels, 2, 3, 1).unwrap();
        let (back, h, w, c) = read(&path).unwrap();
        assert_eq!((h, w, c), (2, 3, 1));
        // Quantized values survive a second write unchanged.
        let first = std::fs::read(&path).unwrap();
        write(&path, &back, 2, 3, 1).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn ppm_carries_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let pixels: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write(&path, &pixels, 2, 2, 3).unwrap();
        let (_, h, w, c) = read(&path).unwrap();
        assert_eq!((h, w, c), (2, 2, 3));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"JUNK").unwrap();
        assert!(read(&path).is_err());
    }
}
