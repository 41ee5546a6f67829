//! Three-stage curriculum: text/image alignment (T2I and MMU), image to
//! multi-view, text to multi-view. One model is fine-tuned across stages; the
//! tokenizer stays frozen.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use crate::datagen::{ObjectRecord, PALETTE_NAMES};
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, LossWeighting, ModelParams};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::sequence::{
    apply_random_mask, build_i2mv, build_mmu, build_t2i, build_t2mv, MaskSpec, Task, TokenSequence,
    DEFAULT_I2MV_PROMPT, DEFAULT_MMU_PROMPT, DEFAULT_T2MV_PROMPT,
};
use crate::tokenizer::ImageTokenizer;
use crate::vocab::{TokenId, Vocab};

/// Fixed MMU answer length (tokens).
pub const MMU_ANSWER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Text/image alignment on single views.
    Align = 1,
    /// Reference image to three views.
    ImageToViews = 2,
    /// Caption to four views.
    TextToViews = 3,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::Align),
            2 => Ok(Stage::ImageToViews),
            3 => Ok(Stage::TextToViews),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        self as u32
    }

    pub fn tasks(self) -> &'static [Task] {
        match self {
            Stage::Align => &[Task::T2i, Task::Mmu],
            Stage::ImageToViews => &[Task::I2mv],
            Stage::TextToViews => &[Task::T2mv],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub adam: AdamWConfig,
    pub clip_norm: f64,
    pub loss_weighting: LossWeighting,
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        TrainConfig {
            stage,
            batch_size: 8,
            steps: 1000,
            base_lr: 3e-4,
            warmup_steps: 50,
            min_lr: 3e-5,
            adam: AdamWConfig::default(),
            clip_norm: 1.0,
            loss_weighting: LossWeighting::Mean,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.base_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::Config(format!(
                "need base_lr > min_lr >= 0, got {} and {}",
                self.base_lr, self.min_lr
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` at `steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.base_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `a {color} {shape}` for the bottom primitive; fits the MMU answer block.
pub fn mmu_answer(obj: &ObjectRecord) -> String {
    let p = &obj.spec.prims[0];
    format!("a {} {}", PALETTE_NAMES[p.color], p.shape.name())
}

fn encode_views(
    vocab: &Vocab,
    tok: &dyn ImageTokenizer,
    views: &[&crate::image::ImageGrid],
) -> Result<Vec<Vec<TokenId>>> {
    views.iter().map(|v| vocab.visual_ids(&tok.encode(v)?)).collect()
}

/// Unmasked training sequences for `stage` built from `objects`.
///
/// Stage 1 yields a T2I and an MMU sequence per rendered view, stage 2 one
/// I2MV sequence per object (its manifest reference and the three offset
/// views), stage 3 one T2MV sequence per object.
pub fn stage_examples(
    stage: Stage,
    vocab: &Vocab,
    tok: &dyn ImageTokenizer,
    objects: &[ObjectRecord],
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for obj in objects {
        let caption = vocab.encode_text(&obj.caption)?;
        match stage {
            Stage::Align => {
                let answer = vocab.encode_text(&mmu_answer(obj))?;
                let prompt = vocab.encode_text(DEFAULT_MMU_PROMPT)?;
                for view in &obj.views {
                    let ids = vocab.visual_ids(&tok.encode(view)?)?;
                    out.push(build_t2i(vocab, &caption, &ids)?);
                    out.push(build_mmu(vocab, &prompt, &ids, &answer, MMU_ANSWER_LEN)?);
                }
            }
            Stage::ImageToViews => {
                let prompt = vocab.encode_text(DEFAULT_I2MV_PROMPT)?;
                let reference = vocab.visual_ids(&tok.encode(obj.reference())?)?;
                let targets = encode_views(vocab, tok, &obj.i2mv_targets())?;
                out.push(build_i2mv(vocab, &prompt, &reference, &targets)?);
            }
            Stage::TextToViews => {
                let prompt = vocab.encode_text(DEFAULT_T2MV_PROMPT)?;
                let targets = encode_views(vocab, tok, &obj.t2mv_targets())?;
                out.push(build_t2mv(vocab, &prompt, &caption, &targets)?);
            }
        }
    }
    Ok(out)
}

/// Everything needed to continue a stage exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub optimizer: AdamW<f32>,
    /// Completed optimizer steps in this stage.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Start of a stage: fresh optimizer moments and batch RNG.
    pub fn fresh(params: ModelParams<f32>, cfg: &TrainConfig) -> Self {
        let n = params.len();
        TrainState {
            params,
            optimizer: AdamW::new(n),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    /// Continues from a checkpoint written mid-stage, or starts the stage
    /// fresh when the checkpoint came from another stage.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Self {
        match &ckpt.optimizer {
            Some(opt) if ckpt.meta.stage == cfg.stage.number() => TrainState {
                params: ckpt.model.clone(),
                optimizer: opt.clone(),
                step: ckpt.meta.step as usize,
                rng: ckpt.meta.rng.restore(),
            },
            _ => TrainState::fresh(ckpt.model.clone(), cfg),
        }
    }

    pub fn meta(&self, cfg: &TrainConfig, config_echo: &str) -> CheckpointMeta {
        CheckpointMeta {
            stage: cfg.stage.number(),
            step: self.step as u64,
            rng: RngState::capture(&self.rng),
            config_echo: config_echo.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the update.
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    /// Mean masked cross-entropy over the batch (nats/token).
    pub loss: f64,
    pub grad_norm: f64,
}

/// Runs `cfg.steps - state.step` updates, calling `on_step` after each.
///
/// Each step draws `batch_size` examples with replacement and, per example,
/// a ratio `r ~ U(0, 1]` and a mask seed. Per-example gradients are computed
/// in parallel and summed in batch order so results do not depend on the
/// thread count.
pub fn train_stage(
    examples: &[TokenSequence],
    state: &mut TrainState,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if examples.is_empty() && state.step < cfg.steps {
        return Err(Error::Config("training needs at least one example".into()));
    }
    for ex in examples {
        if !cfg.stage.tasks().contains(&ex.task) {
            return Err(Error::Config(format!(
                "stage {} cannot train on a {:?} sequence",
                cfg.stage, ex.task
            )));
        }
        if ex.len() > state.params.config().max_seq_len {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ex.len(),
                state.params.config().max_seq_len
            )));
        }
    }
    let decay = state.params.decay_mask();
    let mut records = Vec::with_capacity(cfg.steps.saturating_sub(state.step));
    while state.step < cfg.steps {
        let draws: Vec<(usize, f64, u64)> = (0..cfg.batch_size)
            .map(|_| {
                let idx = state.rng.random_range(0..examples.len());
                let ratio = 1.0 - state.rng.random::<f64>();
                (idx, ratio, state.rng.random::<u64>())
            })
            .collect();
        let params = &state.params;
        let results: Vec<Result<(f64, Vec<f32>)>> = draws
            .par_iter()
            .map(|&(idx, ratio, seed)| {
                let seq = &examples[idx];
                let masked = apply_random_mask(seq, MaskSpec::new(ratio, seed)?)?;
                let normalizer = match cfg.loss_weighting {
                    LossWeighting::Mean => masked.positions.len() as f64,
                    LossWeighting::InvRatio => ratio * seq.target_count() as f64,
                };
                loss_and_grad(params, &masked.sequence.ids, &masked.positions, &masked.originals, normalizer)
            })
            .collect();
        let mut grads = vec![0f32; params.len()];
        let mut loss = 0.0;
        for (res, &(idx, ratio, _)) in results.into_iter().zip(&draws) {
            let (l, g) = res?;
            if !l.is_finite() {
                return Err(non_finite(state, cfg, &format!("loss {l} on example {idx} (mask ratio {ratio:.4})")));
            }
            loss += l;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / cfg.batch_size as f32;
        grads.iter_mut().for_each(|g| *g *= inv);
        loss /= cfg.batch_size as f64;
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(non_finite(state, cfg, &format!("gradient norm {grad_norm}")));
        }
        let lr = lr_at(cfg, state.step + 1);
        state.optimizer.step(state.params.data_mut(), &grads, lr, &cfg.adam, Some(&decay));
        if !state.params.all_finite() {
            return Err(non_finite(state, cfg, "parameters after the update"));
        }
        state.step += 1;
        let rec = StepRecord {
            step: state.step,
            stage: cfg.stage,
            lr,
            loss,
            grad_norm,
        };
        on_step(&rec, state)?;
        records.push(rec);
    }
    Ok(records)
}

fn non_finite(state: &TrainState, cfg: &TrainConfig, what: &str) -> Error {
    let finite = state.params.data().iter().filter(|v| v.is_finite()).count();
    Error::Numeric(format!(
        "non-finite {what} at stage {} step {} (lr {:.3e}, optimizer t {}, {finite}/{} finite params)",
        cfg.stage,
        state.step + 1,
        lr_at(cfg, state.step + 1),
        state.optimizer.t,
        state.params.len()
    ))
}

pub const TRACE_HEADER: &str = "step,stage,lr,loss";

/// Appends one `step,stage,lr,loss` row, writing the header to a new file.
pub fn append_trace_row(path: &Path, rec: &StepRecord) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str(TRACE_HEADER);
        line.push('\n');
    }
    line.push_str(&format!("{},{},{:e},{:e}\n", rec.step, rec.stage, rec.lr, rec.loss));
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}
