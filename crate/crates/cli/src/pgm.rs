//! Binary portable graymap (P5) output.

use std::io::Write;
use std::path::Path;

/// Maps `[lo, hi]` linearly onto 0..=255, clamping outside values.
pub fn encode(pixels: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| {
        let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        (u * 255.0).round() as u8
    }));
    out
}

pub fn write(path: &Path, pixels: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> std::io::Result<()> {
    std::fs::File::create(path)?.write_all(&encode(pixels, width, height, lo, hi))
}
