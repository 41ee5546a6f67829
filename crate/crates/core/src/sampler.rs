//! Iterative masked decoding: start from fully masked targets, predict every
//! masked position, commit the most confident predictions, re-mask the rest
//! per the schedule, repeat for a fixed number of steps.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::model::{hidden_states, logits_for_rows, ModelParams};
use crate::sequence::{
    build_i2mv, build_inpaint, build_mmu, build_t2i, build_t2mv, Role, TokenSequence, I2MV_VIEWS,
    T2MV_VIEWS,
};
use crate::tokenizer::ImageTokenizer;
use crate::trainer::MMU_ANSWER_LEN;
use crate::vocab::{Special, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schedule {
    Cosine,
    Linear,
    Quadratic,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::Linear, Schedule::Quadratic, Schedule::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Cosine => "cosine",
            Schedule::Linear => "linear",
            Schedule::Quadratic => "quadratic",
        }
    }

    /// Fraction still masked at normalised time `u` in `[0, 1]`.
    pub fn gamma(self, u: f64) -> f64 {
        match self {
            Schedule::Cosine => (std::f64::consts::FRAC_PI_2 * u).cos().max(0.0),
            Schedule::Linear => 1.0 - u,
            Schedule::Quadratic => 1.0 - u * u,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "linear" => Ok(Schedule::Linear),
            "quadratic" => Ok(Schedule::Quadratic),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

/// `gamma(t / steps)`, exactly 1 at `t = 0` and 0 at `t = steps`.
pub fn schedule_fraction(schedule: Schedule, t: usize, steps: usize) -> Result<f64> {
    if steps == 0 || t > steps {
        return Err(Error::Contract(format!("schedule step {t} outside 0..={steps}")));
    }
    if t == 0 {
        return Ok(1.0);
    }
    if t == steps {
        return Ok(0.0);
    }
    Ok(schedule.gamma(t as f64 / steps as f64))
}

/// Positions still masked after each step `t = 0..=steps`:
/// `floor(n * gamma)`, forced strictly below the previous count while that is positive.
pub fn masked_counts(schedule: Schedule, steps: usize, n_target: usize) -> Result<Vec<usize>> {
    let mut counts = Vec::with_capacity(steps + 1);
    let mut prev = n_target;
    for t in 0..=steps {
        let raw = (n_target as f64 * schedule_fraction(schedule, t, steps)?).floor() as usize;
        let c = if t == 0 {
            raw.min(n_target)
        } else if prev > 0 {
            raw.min(prev - 1)
        } else {
            0
        };
        counts.push(c);
        prev = c;
    }
    Ok(counts)
}

/// Count still masked after step `t`; see [`masked_counts`].
pub fn masked_count(schedule: Schedule, t: usize, steps: usize, n_target: usize) -> Result<usize> {
    if t > steps {
        return Err(Error::Contract(format!("schedule step {t} outside 0..={steps}")));
    }
    Ok(masked_counts(schedule, steps, n_target)?[t])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub schedule: Schedule,
    /// Initial Gumbel noise scale on confidences, annealed linearly to 0.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 20,
            schedule: Schedule::Cosine,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        Ok(())
    }
}

/// Legal id range for a generated position of the given role.
fn legal_ids(vocab: &Vocab, role: Role) -> Vec<TokenId> {
    match role {
        Role::GenImage(_) | Role::RefImage => vocab.visual_range().collect(),
        Role::AnswerText => vocab
            .text_range()
            .chain(std::iter::once(Special::Pad.id()))
            .collect(),
        _ => vocab.text_range().collect(),
    }
}

/// A prediction for one masked position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub position: usize,
    pub id: TokenId,
    /// Log-probability of `id` within the legal range.
    pub log_prob: f64,
    /// `log_prob` plus scaled Gumbel noise; the ranking key.
    pub confidence: f64,
}

/// Samples an id for each masked position from the softmax restricted to the
/// role's legal ids, and scores it by log-probability plus `tau`-scaled Gumbel
/// noise.
pub fn predict_step(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    seq: &TokenSequence,
    masked: &[usize],
    tau: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Prediction>> {
    if masked.is_empty() {
        return Err(Error::Contract("predict_step needs masked positions".into()));
    }
    let cache = hidden_states(params, &seq.ids)?;
    let logits = logits_for_rows(params, &cache, masked);
    let mut out = Vec::with_capacity(masked.len());
    for (r, &pos) in masked.iter().enumerate() {
        let row = logits.row(r);
        let legal = legal_ids(vocab, seq.roles[pos]);
        let scores: Vec<f64> = legal.iter().map(|&id| f64::from(row[id as usize])).collect();
        out.push(sample_restricted(&legal, &scores, pos, tau, rng)?);
    }
    Ok(out)
}

/// Draws from `softmax(scores)` over `ids`; see [`predict_step`].
pub fn sample_restricted(
    ids: &[TokenId],
    scores: &[f64],
    position: usize,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<Prediction> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric(format!(
            "logits at position {position} are not finite (max {max})"
        )));
    }
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = scores.len() - 1;
    for (i, s) in scores.iter().enumerate() {
        acc += (s - lse).exp();
        if u < acc {
            pick = i;
            break;
        }
    }
    let log_prob = scores[pick] - lse;
    let noise = if tau > 0.0 {
        let g: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        -(-g.ln()).ln()
    } else {
        0.0
    };
    Ok(Prediction {
        position,
        id: ids[pick],
        log_prob,
        confidence: log_prob + tau * noise,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// 1-based step index.
    pub step: usize,
    /// Target positions still masked after this step.
    pub masked_count: usize,
    /// Per target position (in sequence order): committed after this step.
    pub committed: Vec<bool>,
    /// Mean confidence of the positions committed at this step; 0 when none.
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
}

impl SampleTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,masked_count,mean_confidence\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.step, s.masked_count, s.mean_confidence));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub sequence: TokenSequence,
    pub trace: SampleTrace,
}

/// Fills every masked target position of `template` in exactly `cfg.steps` steps.
///
/// Committed positions are frozen; ranking is global over all still-masked
/// positions, so confident regions of one view can anchor the others.
pub fn sample(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    template: &TokenSequence,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let targets = template.target_positions();
    if targets.is_empty() {
        return Err(Error::Template("template has no target positions".into()));
    }
    if let Some(&p) = targets.iter().find(|&&p| template.ids[p] != Special::Mask.id()) {
        return Err(Error::Template(format!("target position {p} is not masked")));
    }
    let counts = masked_counts(cfg.schedule, cfg.steps, targets.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq = template.clone();
    let mut masked = targets.clone();
    let mut trace = SampleTrace::default();
    for t in 1..=cfg.steps {
        let keep_masked = counts[t];
        let mut committed_conf = Vec::new();
        if !masked.is_empty() {
            let tau = cfg.temperature * (1.0 - t as f64 / cfg.steps as f64);
            let mut preds = predict_step(params, vocab, &seq, &masked, tau, &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!(
                        "sampling step {t}/{} with {} masked: {m}",
                        cfg.steps,
                        masked.len()
                    )),
                    other => other,
                })?;
            // Most confident first; ties resolved by position.
            preds.sort_by(|a, b| {
                b.confidence
                    .total_cmp(&a.confidence)
                    .then(a.position.cmp(&b.position))
            });
            let n_commit = masked.len().saturating_sub(keep_masked);
            for p in &preds[..n_commit] {
                seq.ids[p.position] = p.id;
                committed_conf.push(p.confidence);
            }
            masked = preds[n_commit..].iter().map(|p| p.position).collect();
            masked.sort_unstable();
        }
        trace.steps.push(TraceStep {
            step: t,
            masked_count: masked.len(),
            committed: targets.iter().map(|&p| seq.ids[p] != Special::Mask.id()).collect(),
            mean_confidence: if committed_conf.is_empty() {
                0.0
            } else {
                committed_conf.iter().sum::<f64>() / committed_conf.len() as f64
            },
        });
    }
    Ok(SampleOutput {
        sequence: seq,
        trace,
    })
}

/// Generated views: images, their visual ids, and the decoding trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewsOutput {
    pub images: Vec<ImageGrid>,
    pub tokens: Vec<Vec<TokenId>>,
    pub trace: SampleTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnstyleOutput {
    /// Scene with everything outside the region whited out (pass-1 reference).
    pub reference: ImageGrid,
    /// Pass-1 rotated views of the object.
    pub object_views: Vec<ImageGrid>,
    /// Pass-2 scene with the object region inpainted.
    pub background: ImageGrid,
    pub background_tokens: Vec<TokenId>,
    /// Object views composited over the inpainted background.
    pub composites: Vec<ImageGrid>,
}

/// Everything generation needs besides per-call conditioning.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub vocab: &'a Vocab,
    pub params: &'a ModelParams<f32>,
    pub tokenizer: &'a dyn ImageTokenizer,
    /// Output image height and width in pixels.
    pub image_size: (usize, usize),
}

impl<'a> Pipeline<'a> {
    fn tokens_per_image(&self) -> usize {
        self.tokenizer.tokens_per_image(self.image_size.0, self.image_size.1)
    }

    fn encode(&self, img: &ImageGrid) -> Result<Vec<TokenId>> {
        if (img.height(), img.width()) != self.image_size {
            return Err(Error::Shape(format!(
                "image is {}x{}, pipeline expects {}x{}",
                img.height(),
                img.width(),
                self.image_size.0,
                self.image_size.1
            )));
        }
        self.vocab.visual_ids(&self.tokenizer.encode(img)?)
    }

    fn decode(&self, ids: &[TokenId]) -> Result<ImageGrid> {
        let codes = ids
            .iter()
            .map(|&id| {
                self.vocab
                    .visual_code(id)
                    .ok_or_else(|| Error::Contract(format!("id {id} at an image position is not visual")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.tokenizer.decode(&codes, self.image_size.0, self.image_size.1)
    }

    fn masked_views(&self, n: usize) -> Vec<Vec<TokenId>> {
        vec![vec![Special::Mask.id(); self.tokens_per_image()]; n]
    }

    fn finish_views(&self, out: SampleOutput) -> Result<ViewsOutput> {
        let tokens: Vec<_> = (0..out.sequence.views).map(|v| out.sequence.view_ids(v)).collect();
        let images = tokens.iter().map(|t| self.decode(t)).collect::<Result<_>>()?;
        Ok(ViewsOutput {
            images,
            tokens,
            trace: out.trace,
        })
    }

    /// Three views of the object in `reference` at +90, +180 and +270 degrees.
    pub fn sample_i2mv(&self, reference: &ImageGrid, prompt: &str, cfg: &SamplerConfig) -> Result<ViewsOutput> {
        let r = self.encode(reference)?;
        let template = build_i2mv(
            self.vocab,
            &self.vocab.encode_text(prompt)?,
            &r,
            &self.masked_views(I2MV_VIEWS),
        )?;
        self.finish_views(sample(self.params, self.vocab, &template, cfg)?)
    }

    /// Four views at 0, 90, 180 and 270 degrees for a description.
    pub fn sample_t2mv(&self, prompt: &str, desc: &str, cfg: &SamplerConfig) -> Result<ViewsOutput> {
        let template = build_t2mv(
            self.vocab,
            &self.vocab.encode_text(prompt)?,
            &self.vocab.encode_text(desc)?,
            &self.masked_views(T2MV_VIEWS),
        )?;
        self.finish_views(sample(self.params, self.vocab, &template, cfg)?)
    }

    /// One image for a caption; the caption is context, not a target.
    pub fn sample_t2i(&self, caption: &str, cfg: &SamplerConfig) -> Result<ViewsOutput> {
        let mut template = build_t2i(
            self.vocab,
            &self.vocab.encode_text(caption)?,
            &self.masked_views(1)[0],
        )?;
        for (i, role) in template.roles.iter().enumerate() {
            if *role == Role::CaptionText {
                template.target[i] = false;
            }
        }
        self.finish_views(sample(self.params, self.vocab, &template, cfg)?)
    }

    /// Text answer about an image; PAD fills unused answer slots and is dropped.
    pub fn sample_mmu(&self, image: &ImageGrid, prompt: &str, cfg: &SamplerConfig) -> Result<(String, SampleTrace)> {
        let ids = self.encode(image)?;
        let template = build_mmu(
            self.vocab,
            &self.vocab.encode_text(prompt)?,
            &ids,
            &[],
            MMU_ANSWER_LEN,
        )?
        .with_targets_masked();
        let out = sample(self.params, self.vocab, &template, cfg)?;
        let answer: Vec<TokenId> = out
            .sequence
            .target_positions()
            .into_iter()
            .map(|p| out.sequence.ids[p])
            .filter(|&id| id != Special::Pad.id())
            .collect();
        Ok((self.vocab.decode_text(&answer), out.trace))
    }

    /// Two-pass rotation of an object inside a scene.
    ///
    /// Pass 1 whites out every patch outside `region` and generates three
    /// views of what remains. Pass 2 masks the region's tokens in the scene
    /// and inpaints them with `prompt` as caption. Non-white pixels of each
    /// object view are then laid over the inpainted background.
    pub fn turnstyle(
        &self,
        scene: &ImageGrid,
        region: &[bool],
        prompt: &str,
        cfg: &SamplerConfig,
    ) -> Result<TurnstyleOutput> {
        let n = self.tokens_per_image();
        if region.len() != n {
            return Err(Error::Config(format!("region has {} patches, image has {n}", region.len())));
        }
        let inside = region.iter().filter(|&&r| r).count();
        if inside == 0 || inside == n {
            return Err(Error::Config(format!(
                "object region must be a proper non-empty subset of the {n} patches, got {inside}"
            )));
        }
        let ps = self.tokenizer.patch_size();
        let cols = self.image_size.1 / ps;
        let mut reference = scene.clone();
        for (k, &keep) in region.iter().enumerate() {
            if !keep {
                let (pr, pc) = (k / cols, k % cols);
                for r in pr * ps..(pr + 1) * ps {
                    for c in pc * ps..(pc + 1) * ps {
                        reference.set_pixel(r, c, &vec![1.0; scene.channels()]);
                    }
                }
            }
        }
        let objects = self.sample_i2mv(&reference, crate::sequence::DEFAULT_I2MV_PROMPT, cfg)?;

        let scene_ids = self.encode(scene)?;
        let template = build_inpaint(self.vocab, &self.vocab.encode_text(prompt)?, &scene_ids, region)?;
        let filled = sample(self.params, self.vocab, &template, cfg)?;
        let background_tokens = filled.sequence.view_ids(0);
        let background = self.decode(&background_tokens)?;

        let composites = objects
            .images
            .iter()
            .map(|view| {
                let mut out = background.clone();
                for r in 0..view.height() {
                    for c in 0..view.width() {
                        let px = view.pixel(r, c);
                        if px.iter().any(|&v| v < FOREGROUND_LEVEL) {
                            out.set_pixel(r, c, px);
                        }
                    }
                }
                out
            })
            .collect();
        Ok(TurnstyleOutput {
            reference,
            object_views: objects.images,
            background,
            background_tokens,
            composites,
        })
    }
}

/// Pixels with any channel below this are treated as object, not backdrop.
const FOREGROUND_LEVEL: f64 = 0.95;
