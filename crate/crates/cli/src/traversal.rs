use std::path::Path;

use image::{Rgb, RgbImage};
use vaebench_core::nets::Vae;
use vaebench_core::Tensor;

use crate::error::{file_err, HarnessError, Result};

/// White border between and around cells, in pixels.
pub const GUTTER: u32 = 2;

/// `steps` equispaced values from `-range` to `range` inclusive.
pub fn sweep_values(steps: usize, range: f64) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps).map(|i| -range + 2.0 * range * i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Decoded images for latent sweeps. Row `r` varies latent `dims[r]` over
/// `values`; cells hold CHW pixel probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TraversalGrid {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    cells: Vec<Vec<f64>>,
}

impl TraversalGrid {
    pub fn rows(&self) -> usize {
        self.dims.len()
    }

    pub fn cols(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        &self.cells[row * self.cols() + col]
    }

    /// Row-major grid image with white gutters, or `None` for an empty grid.
    pub fn to_image(&self) -> Option<RgbImage> {
        if self.is_empty() || self.cols() == 0 {
            return None;
        }
        let (h, w) = (self.height as u32, self.width as u32);
        let width = self.cols() as u32 * (w + GUTTER) + GUTTER;
        let height = self.rows() as u32 * (h + GUTTER) + GUTTER;
        let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let plane = self.height * self.width;
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                let cell = self.cell(r, c);
                let (x0, y0) = (GUTTER + c as u32 * (w + GUTTER), GUTTER + r as u32 * (h + GUTTER));
                for y in 0..self.height {
                    for x in 0..self.width {
                        let at = |ch: usize| {
                            let ch = ch.min(self.channels - 1);
                            to_byte(cell[ch * plane + y * self.width + x])
                        };
                        img.put_pixel(x0 + x as u32, y0 + y as u32, Rgb([at(0), at(1), at(2)]));
                    }
                }
            }
        }
        Some(img)
    }

    /// Writes the grid as PNG. Returns `false`, writing nothing, when the grid is empty.
    pub fn write_png(&self, path: &Path) -> Result<bool> {
        let Some(img) = self.to_image() else { return Ok(false) };
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| HarnessError::Image(e.to_string()))?;
        std::fs::write(path, buf.into_inner()).map_err(file_err(path))?;
        Ok(true)
    }
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sweeps each latent of `dims` over `values` around the code `base`,
/// holding the others fixed, and decodes every cell.
pub fn traverse(vae: &Vae, base: &[f64], dims: &[usize], values: &[f64]) -> Result<TraversalGrid> {
    let d = vae.latent_size();
    if base.len() != d {
        return Err(HarnessError::Config(format!("base code has {} entries, latent size is {d}", base.len())));
    }
    if let Some(&j) = dims.iter().find(|&&j| j >= d) {
        return Err(HarnessError::Config(format!("latent {j} out of range for latent size {d}")));
    }
    let cfg = vae.decoder.config();
    let (channels, height, width) = (cfg.channels, cfg.image_size, cfg.image_size);
    let mut cells = Vec::with_capacity(dims.len() * values.len());
    for &j in dims {
        if values.is_empty() {
            break;
        }
        let mut z = Vec::with_capacity(values.len() * d);
        for &v in values {
            let start = z.len();
            z.extend_from_slice(base);
            z[start + j] = v;
        }
        let logits = vae.decode_batch(&Tensor::new(vec![values.len(), d], z)?)?;
        cells.extend(logits.data().chunks(channels * height * width).map(|c| c.iter().map(|&l| sigmoid(l)).collect()));
    }
    Ok(TraversalGrid { dims: dims.to_vec(), values: values.to_vec(), channels, height, width, cells })
}

/// Plain reconstruction probabilities of a code.
pub fn reconstruct(vae: &Vae, code: &[f64]) -> Result<Vec<f64>> {
    let logits = vae.decode_batch(&Tensor::new(vec![1, code.len()], code.to_vec())?)?;
    Ok(logits.data().iter().map(|&l| sigmoid(l)).collect())
}
