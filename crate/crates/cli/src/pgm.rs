//! Binary greyscale PGM (P5) montages.

use std::fs;
use std::path::Path;

use rvae_core::data::to_byte;
use rvae_core::tensor::Tensor;

use crate::error::{io, CliError, Result};

/// Encodes `[C, H, W]` images as a `cols`-wide grid in one P5 image.
/// Multi-channel images are averaged to grey; empty cells are black.
pub fn encode_grid(images: &[Tensor], cols: usize) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| CliError::Usage("no images to write".into()))?;
    let [c, h, w] = first.dims()[..] else {
        return Err(CliError::Usage(format!("expected [C, H, W] images, got {:?}", first.dims())));
    };
    if images.iter().any(|t| t.dims() != first.dims()) {
        return Err(CliError::Usage("grid images differ in shape".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + width * height, 0);
    for (n, img) in images.iter().enumerate() {
        let (gy, gx) = (n / cols * h, n % cols * w);
        for y in 0..h {
            for x in 0..w {
                let grey = (0..c).map(|ch| img.data()[(ch * h + y) * w + x]).sum::<f64>() / c as f64;
                out[header + (gy + y) * width + gx + x] = to_byte(grey);
            }
        }
    }
    Ok(out)
}

pub fn write_grid(path: &Path, images: &[Tensor], cols: usize) -> Result<()> {
    let bytes = encode_grid(images, cols)?;
    fs::write(path, bytes).map_err(|e| io(path, e))
}
