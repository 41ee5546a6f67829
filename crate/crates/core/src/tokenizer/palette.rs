use super::{check_divisible, ImageTokenizer};
use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Exact tokenizer for images made of constant-colour patches: the code is
/// the index of the palette entry nearest to the patch's mean colour.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteOracle {
    palette: Vec<[f64; 3]>,
    patch_size: usize,
    bits: u32,
}

impl PaletteOracle {
    pub fn new(palette: Vec<[f64; 3]>, patch_size: usize, bits: u32) -> Result<Self> {
        if palette.is_empty() || palette.len() > 1usize << bits {
            return Err(Error::Config(format!(
                "palette of {} colours does not fit {bits} bits",
                palette.len()
            )));
        }
        for i in 0..palette.len() {
            for j in i + 1..palette.len() {
                if palette[i] == palette[j] {
                    return Err(Error::Config(format!("palette entries {i} and {j} coincide")));
                }
            }
        }
        if patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        Ok(PaletteOracle {
            palette,
            patch_size,
            bits,
        })
    }

    pub fn palette(&self) -> &[[f64; 3]] {
        &self.palette
    }

    fn nearest(&self, rgb: [f64; 3]) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for (i, c) in self.palette.iter().enumerate() {
            let d: f64 = (0..3).map(|k| (c[k] - rgb[k]).powi(2)).sum();
            if d < best.0 {
                best = (d, i as u32);
            }
        }
        best.1
    }
}

impl ImageTokenizer for PaletteOracle {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn bits(&self) -> u32 {
        self.bits
    }

    fn encode(&self, image: &ImageGrid) -> Result<Vec<u32>> {
        if image.channels() != 3 {
            return Err(Error::Shape("palette oracle works on RGB images".into()));
        }
        check_divisible(image.height(), image.width(), self.patch_size)?;
        let p = self.patch_size;
        let (gh, gw) = (image.height() / p, image.width() / p);
        let mut codes = Vec::with_capacity(gh * gw);
        for pr in 0..gh {
            for pc in 0..gw {
                let mut mean = [0.0; 3];
                for r in 0..p {
                    for c in 0..p {
                        let px = image.pixel(pr * p + r, pc * p + c);
                        for k in 0..3 {
                            mean[k] += px[k];
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= (p * p) as f64);
                codes.push(self.nearest(mean));
            }
        }
        Ok(codes)
    }

    fn decode(&self, codes: &[u32], height: usize, width: usize) -> Result<ImageGrid> {
        check_divisible(height, width, self.patch_size)?;
        let expected = self.tokens_per_image(height, width);
        if codes.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {expected} tokens, got {}",
                codes.len()
            )));
        }
        let p = self.patch_size;
        let gw = width / p;
        let mut img = ImageGrid::filled(height, width, [0.0; 3]);
        for (idx, &code) in codes.iter().enumerate() {
            // Codes beyond the palette decode to the last entry so decoding stays total.
            let color = self.palette[(code as usize).min(self.palette.len() - 1)];
            let (pr, pc) = (idx / gw, idx % gw);
            for r in 0..p {
                for c in 0..p {
                    img.set_pixel(pr * p + r, pc * p + c, &color);
                }
            }
        }
        Ok(img)
    }
}
