//! Lookup-free quantizing patch autoencoder.
//!
//! Each patch goes through `linear -> relu -> linear` to `K` latents; the sign
//! of each latent is one bit of the code. The decoder mirrors the encoder and
//! reads the bipolar (+1/-1) code. Training uses the straight-through
//! estimator across the sign and an entropy bonus on soft bit probabilities
//! that keeps the codebook in use.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{assemble_patches, check_divisible, extract_patches, ImageTokenizer};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::linalg::{gemm, MatMut, MatRef};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamLayout;

/// Slope of the soft bit probability `sigmoid(ENTROPY_SHARPNESS * z)`.
const ENTROPY_SHARPNESS: f64 = 1.0;

/// Code for a latent vector: bit `j` is set iff `latent[j] > 0`.
pub fn lfq_quantize(latent: &[f64]) -> Result<u32> {
    if latent.len() > 32 {
        return Err(Error::Shape(format!("{} latent bits exceed u32", latent.len())));
    }
    let mut code = 0u32;
    for (j, &z) in latent.iter().enumerate() {
        if !z.is_finite() {
            return Err(Error::Numeric(format!("latent[{j}] = {z} is not finite")));
        }
        if z > 0.0 {
            code |= 1 << j;
        }
    }
    Ok(code)
}

/// Bipolar latent for a code: +1 where the bit is set, -1 otherwise.
pub fn dequantize(code: u32, bits: u32) -> Vec<f64> {
    (0..bits)
        .map(|j| if code >> j & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub patch_size: usize,
    pub bits: u32,
    pub hidden: usize,
    pub channels: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            patch_size: 4,
            bits: 10,
            hidden: 256,
            channels: 3,
        }
    }
}

impl TokenizerConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn layout(&self) -> ParamLayout {
        let (d, h, k) = (self.patch_dim(), self.hidden, self.bits as usize);
        let mut l = ParamLayout::new();
        l.push("enc.fc1.w", &[d, h]);
        l.push("enc.fc1.b", &[h]);
        l.push("enc.fc2.w", &[h, k]);
        l.push("enc.fc2.b", &[k]);
        l.push("dec.fc1.w", &[k, h]);
        l.push("dec.fc1.b", &[h]);
        l.push("dec.fc2.w", &[h, d]);
        l.push("dec.fc2.b", &[d]);
        l
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.hidden == 0 || self.channels == 0 {
            return Err(Error::Config(format!("degenerate tokenizer config {self:?}")));
        }
        if !(1..=16).contains(&self.bits) {
            return Err(Error::Config(format!("tokenizer bits {} not in [1, 16]", self.bits)));
        }
        Ok(())
    }
}

/// How the latent reaches the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerMode {
    /// Sign quantization with straight-through gradients (training and inference).
    Sign,
    /// No quantization; used to check the backward pass against finite differences.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfqTokenizer {
    config: TokenizerConfig,
    layout: ParamLayout,
    weights: Vec<f64>,
}

/// Gradient buffer with the same layout as [`LfqTokenizer::weights`].
pub type TokenizerGrads = Vec<f64>;

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    d1: usize,
    c1: usize,
    d2: usize,
    c2: usize,
}

impl LfqTokenizer {
    /// He-normal weights, zero biases; deterministic per seed.
    pub fn init(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut weights = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in layout.entries() {
            if spec.shape.len() == 2 {
                let std = (2.0 / spec.shape[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                for w in &mut weights[spec.range()] {
                    *w = normal.sample(&mut rng);
                }
            }
        }
        Ok(LfqTokenizer {
            config,
            layout,
            weights,
        })
    }

    pub fn from_weights(config: TokenizerConfig, weights: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if weights.len() != layout.total() {
            return Err(Error::Shape(format!(
                "tokenizer expects {} weights, got {}",
                layout.total(),
                weights.len()
            )));
        }
        Ok(LfqTokenizer {
            config,
            layout,
            weights,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn offsets(&self) -> Offsets {
        let at = |n: &str| self.layout.get(n).expect("layout entry").offset;
        Offsets {
            w1: at("enc.fc1.w"),
            b1: at("enc.fc1.b"),
            w2: at("enc.fc2.w"),
            b2: at("enc.fc2.b"),
            d1: at("dec.fc1.w"),
            c1: at("dec.fc1.b"),
            d2: at("dec.fc2.w"),
            c2: at("dec.fc2.b"),
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (
            self.config.patch_dim(),
            self.config.hidden,
            self.config.bits as usize,
        )
    }

    fn w(&self, off: usize, len: usize) -> &[f64] {
        &self.weights[off..off + len]
    }

    /// Latents for `n` centred patches (`x - 0.5`), plus the hidden activations.
    fn encode_latents(&self, xc: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let (d, h, k) = self.dims();
        let o = self.offsets();
        let mut h1 = bias_rows(self.w(o.b1, h), n);
        gemm(
            1.0,
            MatRef::new(xc, n, d),
            MatRef::new(self.w(o.w1, d * h), d, h),
            1.0,
            MatMut::new(&mut h1, n, h),
        );
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut z = bias_rows(self.w(o.b2, k), n);
        gemm(
            1.0,
            MatRef::new(&h1, n, h),
            MatRef::new(self.w(o.w2, h * k), h, k),
            1.0,
            MatMut::new(&mut z, n, k),
        );
        (z, h1)
    }

    /// Decoder output in centred pixel space, plus hidden activations.
    fn decode_latents(&self, q: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let (d, h, k) = self.dims();
        let o = self.offsets();
        let mut h2 = bias_rows(self.w(o.c1, h), n);
        gemm(
            1.0,
            MatRef::new(q, n, k),
            MatRef::new(self.w(o.d1, k * h), k, h),
            1.0,
            MatMut::new(&mut h2, n, h),
        );
        h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut y = bias_rows(self.w(o.c2, d), n);
        gemm(
            1.0,
            MatRef::new(&h2, n, h),
            MatRef::new(self.w(o.d2, h * d), h, d),
            1.0,
            MatMut::new(&mut y, n, d),
        );
        (y, h2)
    }

    /// Codes for a batch of flattened patches.
    pub fn encode_patches(&self, patches: &[f64]) -> Result<Vec<u32>> {
        let (d, _, k) = self.dims();
        let n = patches.len() / d;
        let xc: Vec<f64> = patches.iter().map(|v| v - 0.5).collect();
        let (z, _) = self.encode_latents(&xc, n);
        z.chunks_exact(k).map(lfq_quantize).collect()
    }

    /// Flattened patches for a batch of codes, clamped to `[0, 1]`.
    pub fn decode_codes(&self, codes: &[u32]) -> Result<Vec<f64>> {
        let k = self.config.bits;
        if let Some(&bad) = codes.iter().find(|&&c| c >> k != 0) {
            return Err(Error::Shape(format!("code {bad} exceeds {k} bits")));
        }
        let q: Vec<f64> = codes.iter().flat_map(|&c| dequantize(c, k)).collect();
        let (y, _) = self.decode_latents(&q, codes.len());
        Ok(y.iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect())
    }

    /// Training objective on a batch of patches and its gradient.
    ///
    /// Loss = mean squared reconstruction error + `entropy_weight` * (mean per-bit
    /// entropy - entropy of the batch-mean bit probability) + `commitment_weight` *
    /// mean squared distance of the latent from its quantized value.
    pub fn loss_and_grad(
        &self,
        patches: &[f64],
        entropy_weight: f64,
        commitment_weight: f64,
        mode: QuantizerMode,
    ) -> (f64, TokenizerGrads) {
        let (d, h, k) = self.dims();
        let o = self.offsets();
        let n = patches.len() / d;
        let xc: Vec<f64> = patches.iter().map(|v| v - 0.5).collect();
        let (z, h1) = self.encode_latents(&xc, n);
        let q: Vec<f64> = match mode {
            QuantizerMode::Sign => z.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect(),
            QuantizerMode::Identity => z.clone(),
        };
        let (y, h2) = self.decode_latents(&q, n);

        let count = (n * d) as f64;
        let mut mse = 0.0;
        let mut dy = vec![0.0; n * d];
        for i in 0..n * d {
            let diff = y[i] - xc[i];
            mse += diff * diff;
            dy[i] = 2.0 * diff / count;
        }
        mse /= count;

        // Entropy bonus on p = sigmoid(a z).
        let a = ENTROPY_SHARPNESS;
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(a * v)).collect();
        let mut p_mean = vec![0.0; k];
        for row in p.chunks_exact(k) {
            for j in 0..k {
                p_mean[j] += row[j] / n as f64;
            }
        }
        let sample_entropy = p.iter().map(|&pi| binary_entropy(pi)).sum::<f64>() / (n * k) as f64;
        let batch_entropy = p_mean.iter().map(|&pm| binary_entropy(pm)).sum::<f64>() / k as f64;
        let commit = z.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (n * k) as f64;
        let loss = mse + entropy_weight * (sample_entropy - batch_entropy) + commitment_weight * commit;

        let mut grads = vec![0.0; self.layout.total()];
        // Decoder.
        let mut dh2 = vec![0.0; n * h];
        gemm(
            1.0,
            MatRef::new(&h2, n, h).t(),
            MatRef::new(&dy, n, d),
            0.0,
            MatMut::new(&mut grads[o.d2..o.d2 + h * d], h, d),
        );
        col_sums(&dy, n, d, &mut grads[o.c2..o.c2 + d]);
        gemm(
            1.0,
            MatRef::new(&dy, n, d),
            MatRef::new(self.w(o.d2, h * d), h, d).t(),
            0.0,
            MatMut::new(&mut dh2, n, h),
        );
        for (g, &act) in dh2.iter_mut().zip(&h2) {
            if act <= 0.0 {
                *g = 0.0;
            }
        }
        gemm(
            1.0,
            MatRef::new(&q, n, k).t(),
            MatRef::new(&dh2, n, h),
            0.0,
            MatMut::new(&mut grads[o.d1..o.d1 + k * h], k, h),
        );
        col_sums(&dh2, n, h, &mut grads[o.c1..o.c1 + h]);
        let mut dz = vec![0.0; n * k];
        gemm(
            1.0,
            MatRef::new(&dh2, n, h),
            MatRef::new(self.w(o.d1, k * h), k, h).t(),
            0.0,
            MatMut::new(&mut dz, n, k),
        );
        // Straight-through: the sign contributes an identity Jacobian.
        for i in 0..n * k {
            dz[i] += 2.0 * commitment_weight * (z[i] - q[i]) / (n * k) as f64;
        }
        if entropy_weight != 0.0 {
            for i in 0..n {
                for j in 0..k {
                    let pi = p[i * k + j];
                    let dp_dz = a * pi * (1.0 - pi);
                    let d_sample = binary_entropy_deriv(pi) / (n * k) as f64;
                    let d_batch = binary_entropy_deriv(p_mean[j]) / (k * n) as f64;
                    dz[i * k + j] += entropy_weight * (d_sample - d_batch) * dp_dz;
                }
            }
        }
        // Encoder.
        gemm(
            1.0,
            MatRef::new(&h1, n, h).t(),
            MatRef::new(&dz, n, k),
            0.0,
            MatMut::new(&mut grads[o.w2..o.w2 + h * k], h, k),
        );
        col_sums(&dz, n, k, &mut grads[o.b2..o.b2 + k]);
        let mut dh1 = vec![0.0; n * h];
        gemm(
            1.0,
            MatRef::new(&dz, n, k),
            MatRef::new(self.w(o.w2, h * k), h, k).t(),
            0.0,
            MatMut::new(&mut dh1, n, h),
        );
        for (g, &act) in dh1.iter_mut().zip(&h1) {
            if act <= 0.0 {
                *g = 0.0;
            }
        }
        gemm(
            1.0,
            MatRef::new(&xc, n, d).t(),
            MatRef::new(&dh1, n, h),
            0.0,
            MatMut::new(&mut grads[o.w1..o.w1 + d * h], d, h),
        );
        col_sums(&dh1, n, h, &mut grads[o.b1..o.b1 + h]);
        (loss, grads)
    }

    /// Mean squared pixel error of `decode(encode(x))` over a set of images.
    pub fn reconstruction_mse(&self, images: &[ImageGrid]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for img in images {
            let rec = self.reconstruct(img)?;
            total += img
                .data()
                .iter()
                .zip(rec.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            count += img.data().len();
        }
        Ok(total / count.max(1) as f64)
    }
}

impl ImageTokenizer for LfqTokenizer {
    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn bits(&self) -> u32 {
        self.config.bits
    }

    fn encode(&self, image: &ImageGrid) -> Result<Vec<u32>> {
        if image.channels() != self.config.channels {
            return Err(Error::Shape(format!(
                "tokenizer expects {} channels, image has {}",
                self.config.channels,
                image.channels()
            )));
        }
        let patches = extract_patches(image, self.config.patch_size)?;
        self.encode_patches(&patches)
    }

    fn decode(&self, codes: &[u32], height: usize, width: usize) -> Result<ImageGrid> {
        check_divisible(height, width, self.config.patch_size)?;
        let expected = self.tokens_per_image(height, width);
        if codes.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {expected} tokens, got {}",
                codes.len()
            )));
        }
        let patches = self.decode_codes(codes)?;
        assemble_patches(&patches, height, width, self.config.patch_size, self.config.channels)
    }
}

fn bias_rows(bias: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(bias.len() * n);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    out
}

fn col_sums(m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..rows {
        for c in 0..cols {
            out[c] += m[r * cols + c];
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

fn binary_entropy_deriv(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    ((1.0 - p) / p).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerTrainConfig {
    pub model: TokenizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub entropy_weight: f64,
    /// Pulls latents towards their signs so the straight-through gradient stays
    /// informative; without it codebook usage collapses.
    pub commitment_weight: f64,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            model: TokenizerConfig::default(),
            epochs: 600,
            batch_size: 256,
            lr: 5e-3,
            entropy_weight: 0.1,
            commitment_weight: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTokenizer {
    pub tokenizer: LfqTokenizer,
    /// Mean training objective per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains an [`LfqTokenizer`] on all patches of `images` with Adam.
pub fn train_tokenizer(images: &[ImageGrid], cfg: &TokenizerTrainConfig) -> Result<TrainedTokenizer> {
    train_tokenizer_with(images, cfg, |_, _| {})
}

/// As [`train_tokenizer`], calling `on_epoch(epoch, &tokenizer)` after every epoch.
pub fn train_tokenizer_with(
    images: &[ImageGrid],
    cfg: &TokenizerTrainConfig,
    mut on_epoch: impl FnMut(usize, &LfqTokenizer),
) -> Result<TrainedTokenizer> {
    if images.is_empty() {
        return Err(Error::Config("tokenizer training needs at least one image".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("tokenizer batch_size must be positive".into()));
    }
    let mut tok = LfqTokenizer::init(cfg.model, cfg.seed)?;
    let d = cfg.model.patch_dim();
    let mut patches = Vec::new();
    for img in images {
        if img.channels() != cfg.model.channels {
            return Err(Error::Shape("tokenizer channel mismatch".into()));
        }
        patches.extend(extract_patches(img, cfg.model.patch_size)?);
    }
    let n = patches.len() / d;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7043);
    let mut opt = AdamW::new(tok.weights.len());
    let adam = AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size * d);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // Cosine decay to a tenth of the base rate.
        let progress = epoch as f64 / cfg.epochs.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(&patches[i * d..(i + 1) * d]);
            }
            let (loss, grads) = tok.loss_and_grad(
                &batch,
                cfg.entropy_weight,
                cfg.commitment_weight,
                QuantizerMode::Sign,
            );
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "tokenizer loss became {loss} at epoch {epoch}"
                )));
            }
            opt.step(&mut tok.weights, &grads, lr, &adam, None);
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(epoch_loss / batches as f64);
        on_epoch(epoch, &tok);
    }
    Ok(TrainedTokenizer {
        tokenizer: tok,
        loss_trace: trace,
    })
}
