//! Image <-> visual token grid conversion.
//!
//! Two implementations share the [`ImageTokenizer`] trait: the trainable
//! lookup-free quantizing autoencoder ([`LfqTokenizer`]) and an exact
//! [`PaletteOracle`] used to test downstream code independently of how well
//! the learned tokenizer reconstructs.

mod lfq;
mod palette;

pub use lfq::{
    dequantize, lfq_quantize, train_tokenizer, train_tokenizer_with, LfqTokenizer, QuantizerMode, TokenizerConfig,
    TokenizerGrads, TokenizerTrainConfig, TrainedTokenizer,
};
pub use palette::PaletteOracle;

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub trait ImageTokenizer: Sync {
    fn patch_size(&self) -> usize;

    fn bits(&self) -> u32;

    /// One code per patch, row-major.
    fn encode(&self, image: &ImageGrid) -> Result<Vec<u32>>;

    fn decode(&self, codes: &[u32], height: usize, width: usize) -> Result<ImageGrid>;

    fn tokens_per_image(&self, height: usize, width: usize) -> usize {
        (height / self.patch_size()) * (width / self.patch_size())
    }

    fn reconstruct(&self, image: &ImageGrid) -> Result<ImageGrid> {
        let codes = self.encode(image)?;
        self.decode(&codes, image.height(), image.width())
    }
}

pub(crate) fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || height == 0 || width == 0 {
        return Err(Error::Shape(format!(
            "{height}x{width} image is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

/// Flattens each patch (row-major pixels, interleaved channels), patches row-major.
pub fn extract_patches(image: &ImageGrid, patch: usize) -> Result<Vec<f64>> {
    check_divisible(image.height(), image.width(), patch)?;
    let c = image.channels();
    let (gh, gw) = (image.height() / patch, image.width() / patch);
    let mut out = Vec::with_capacity(image.data().len());
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let row = pr * patch + r;
                let start = (row * image.width() + pc * patch) * c;
                out.extend_from_slice(&image.data()[start..start + patch * c]);
            }
        }
    }
    Ok(out)
}

pub fn assemble_patches(
    patches: &[f64],
    height: usize,
    width: usize,
    patch: usize,
    channels: usize,
) -> Result<ImageGrid> {
    check_divisible(height, width, patch)?;
    if patches.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "patch buffer has {} values, image needs {}",
            patches.len(),
            height * width * channels
        )));
    }
    let mut data = vec![0.0; height * width * channels];
    let gw = width / patch;
    let psz = patch * patch * channels;
    for (idx, chunk) in patches.chunks_exact(psz).enumerate() {
        let (pr, pc) = (idx / gw, idx % gw);
        for r in 0..patch {
            let row = pr * patch + r;
            let dst = (row * width + pc * patch) * channels;
            data[dst..dst + patch * channels]
                .copy_from_slice(&chunk[r * patch * channels..(r + 1) * patch * channels]);
        }
    }
    ImageGrid::new(height, width, channels, data)
}
