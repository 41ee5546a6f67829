//! Bidirectional transformer over the unified vocabulary.
//!
//! Pre-norm blocks (attention + GELU MLP), learned absolute positions, an
//! untied output head, and no attention mask: every position sees every
//! other position. Forward and reverse passes are written out explicitly in
//! [`transformer`]; parameters live in one flat buffer so the optimizer,
//! gradient checks and checkpoints can treat them uniformly.

mod transformer;

pub use transformer::{
    forward, hidden_states, logits_for_rows, loss_and_grad, masked_loss, masked_loss_and_grad, ForwardCache,
    Logits,
};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::params::ParamLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
}

impl ModelConfig {
    /// The default desk-scale configuration for a vocabulary of `vocab_size`.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            d: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 512,
            vocab_size,
            ffn_mult: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        self.offsets().1
    }

    fn offsets(&self) -> (Offsets, ParamLayout) {
        let (d, f, v, p) = (self.d, self.ffn_dim(), self.vocab_size, self.max_seq_len);
        let mut l = ParamLayout::new();
        let wte = l.push("wte", &[v, d]).start;
        let wpe = l.push("wpe", &[p, d]).start;
        let mut layers = Vec::with_capacity(self.n_layers);
        for i in 0..self.n_layers {
            let mut at = |name: &str, shape: &[usize]| l.push(format!("h{i}.{name}"), shape).start;
            layers.push(LayerOffsets {
                ln1_g: at("ln1.g", &[d]),
                ln1_b: at("ln1.b", &[d]),
                qkv_w: at("attn.qkv.w", &[d, 3 * d]),
                qkv_b: at("attn.qkv.b", &[3 * d]),
                proj_w: at("attn.proj.w", &[d, d]),
                proj_b: at("attn.proj.b", &[d]),
                ln2_g: at("ln2.g", &[d]),
                ln2_b: at("ln2.b", &[d]),
                fc_w: at("mlp.fc.w", &[d, f]),
                fc_b: at("mlp.fc.b", &[f]),
                out_w: at("mlp.proj.w", &[f, d]),
                out_b: at("mlp.proj.b", &[d]),
            });
        }
        let lnf_g = l.push("lnf.g", &[d]).start;
        let lnf_b = l.push("lnf.b", &[d]).start;
        let head = l.push("head.w", &[d, v]).start;
        (
            Offsets {
                wte,
                wpe,
                layers,
                lnf_g,
                lnf_b,
                head,
            },
            l,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Offsets {
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layout: ParamLayout,
    offsets: Offsets,
    data: Vec<T>,
}

/// How the masked cross-entropy is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossWeighting {
    /// Mean over masked positions.
    #[default]
    Mean,
    /// Sum over masked positions divided by `ratio * target_count`.
    InvRatio,
}

impl<T: Real> ModelParams<T> {
    /// Scaled-normal initialisation, deterministic per seed.
    ///
    /// Weights ~ N(0, 0.02), residual output projections additionally scaled by
    /// `1 / sqrt(2 * n_layers)`; norm gains 1, all biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (offsets, layout) = config.offsets();
        let mut data = vec![T::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let scaled =
            Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        for spec in layout.entries() {
            let name = spec.name.as_str();
            let range = spec.range();
            if name.ends_with(".g") {
                data[range].iter_mut().for_each(|v| *v = T::one());
            } else if name.ends_with("attn.proj.w") || name.ends_with("mlp.proj.w") {
                for v in &mut data[range] {
                    *v = T::lit(scaled.sample(&mut rng));
                }
            } else if spec.shape.len() == 2 {
                for v in &mut data[range] {
                    *v = T::lit(base.sample(&mut rng));
                }
            }
        }
        Ok(ModelParams {
            config,
            layout,
            offsets,
            data,
        })
    }

    pub fn from_data(config: ModelConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (offsets, layout) = config.offsets();
        if data.len() != layout.total() {
            return Err(Error::Shape(format!(
                "model expects {} parameters, got {}",
                layout.total(),
                data.len()
            )));
        }
        Ok(ModelParams {
            config,
            layout,
            offsets,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub(crate) fn offsets(&self) -> &Offsets {
        &self.offsets
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.layout.get(name).map(|s| s.range())
    }

    /// Weight decay applies to matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data.len()];
        for spec in self.layout.entries() {
            if spec.shape.len() == 2 {
                mask[spec.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            layout: self.layout.clone(),
            offsets: self.offsets.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy(1290);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let c = ModelConfig {
            d: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            vocab_size: 30,
            ffn_mult: 2,
        };
        let a = ModelParams::<f32>::init(c, 5).unwrap();
        let b = ModelParams::<f32>::init(c, 5).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), ModelParams::<f32>::init(c, 6).unwrap().data());
        assert_eq!(a.tensor("wte").unwrap().len(), 30 * 16);
        assert_eq!(a.tensor("head.w").unwrap().len(), 16 * 30);
        assert!(a.tensor("h1.ln2.g").unwrap().iter().all(|&g| g == 1.0));
        assert!(a.tensor("h0.attn.qkv.b").unwrap().iter().all(|&b| b == 0.0));
        let expected = 30 * 16 + 8 * 16 + 2 * (4 * 16 + 16 * 48 + 48 + 16 * 16 + 16 + 16 * 32 + 32 + 32 * 16 + 16) + 2 * 16 + 16 * 30;
        assert_eq!(a.len(), expected);
    }
}
