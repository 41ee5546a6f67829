//! Unified multi-modal token sequences for every task template, and the
//! uniform-ratio random masking used in training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{Special, TokenId, TokenKind, Vocab};

/// Views generated by the image-to-multi-view template.
pub const I2MV_VIEWS: usize = 3;
/// Views generated by the text-to-multi-view template.
pub const T2MV_VIEWS: usize = 4;

pub const DEFAULT_I2MV_PROMPT: &str = "orbit x3";
pub const DEFAULT_T2MV_PROMPT: &str = "orbit x4";
pub const DEFAULT_MMU_PROMPT: &str = "describe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Special,
    PromptText,
    DescText,
    CaptionText,
    RefImage,
    GenImage(u8),
    AnswerText,
}

impl Role {
    pub fn is_image(self) -> bool {
        matches!(self, Role::RefImage | Role::GenImage(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    T2i,
    I2mv,
    T2mv,
    Mmu,
}

impl Task {
    pub fn special(self) -> Special {
        match self {
            Task::T2i => Special::T2i,
            Task::I2mv => Special::I2mv,
            Task::T2mv => Special::T2mv,
            Task::Mmu => Special::Mmu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub task: Task,
    pub ids: Vec<TokenId>,
    pub roles: Vec<Role>,
    /// Positions eligible for masking and loss.
    pub target: Vec<bool>,
    /// Number of generated image blocks.
    pub views: usize,
}

impl TokenSequence {
    fn new(task: Task) -> Self {
        TokenSequence {
            task,
            ids: Vec::new(),
            roles: Vec::new(),
            target: Vec::new(),
            views: 0,
        }
    }

    fn push(&mut self, id: TokenId, role: Role, target: bool) {
        self.ids.push(id);
        self.roles.push(role);
        self.target.push(target);
    }

    fn push_special(&mut self, s: Special) {
        self.push(s.id(), Role::Special, false);
    }

    fn push_block(&mut self, ids: &[TokenId], role: Role, target: bool) {
        for &id in ids {
            self.push(id, role, target);
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.target[i]).collect()
    }

    pub fn target_count(&self) -> usize {
        self.target.iter().filter(|&&t| t).count()
    }

    /// Positions of generated view `v`, in order.
    pub fn view_positions(&self, view: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.roles[i] == Role::GenImage(view as u8))
            .collect()
    }

    pub fn view_ids(&self, view: usize) -> Vec<TokenId> {
        self.view_positions(view).into_iter().map(|i| self.ids[i]).collect()
    }

    /// Copy with every target position replaced by MASK.
    pub fn with_targets_masked(&self) -> TokenSequence {
        let mut out = self.clone();
        for i in 0..out.len() {
            if out.target[i] {
                out.ids[i] = Special::Mask.id();
            }
        }
        out
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        vocab.render(&self.ids)
    }
}

fn check_text(vocab: &Vocab, ids: &[TokenId], what: &str) -> Result<()> {
    for &id in ids {
        match vocab.kind(id)? {
            TokenKind::Text(_) => {}
            TokenKind::Special(Special::Mask | Special::Pad) => {}
            other => {
                return Err(Error::Template(format!(
                    "{what} contains non-text token {id} ({other:?})"
                )))
            }
        }
    }
    Ok(())
}

fn check_image(vocab: &Vocab, ids: &[TokenId], len: usize, what: &str) -> Result<()> {
    if ids.len() != len || len == 0 {
        return Err(Error::Template(format!(
            "{what} has {} tokens, expected {len}",
            ids.len()
        )));
    }
    for &id in ids {
        match vocab.kind(id)? {
            TokenKind::Visual(_) | TokenKind::Special(Special::Mask) => {}
            other => {
                return Err(Error::Template(format!(
                    "{what} contains non-visual token {id} ({other:?})"
                )))
            }
        }
    }
    Ok(())
}

/// `[T2I][SOT] caption [EOT][SOI] image [EOI]`; caption and image are both targets.
pub fn build_t2i(vocab: &Vocab, caption: &[TokenId], image: &[TokenId]) -> Result<TokenSequence> {
    if caption.is_empty() {
        return Err(Error::Template("T2I caption is empty".into()));
    }
    check_text(vocab, caption, "caption")?;
    check_image(vocab, image, image.len(), "image")?;
    let mut s = TokenSequence::new(Task::T2i);
    s.push_special(Special::T2i);
    s.push_special(Special::Sot);
    s.push_block(caption, Role::CaptionText, true);
    s.push_special(Special::Eot);
    s.push_special(Special::Soi);
    s.push_block(image, Role::GenImage(0), true);
    s.push_special(Special::Eoi);
    s.views = 1;
    Ok(s)
}

/// `[I2MV][SOT] prompt [EOT][SOI] ref [EOI]` followed by three `[SOI] G [EOI]`
/// blocks; only the generated views are targets.
pub fn build_i2mv(
    vocab: &Vocab,
    prompt: &[TokenId],
    reference: &[TokenId],
    targets: &[Vec<TokenId>],
) -> Result<TokenSequence> {
    if targets.len() != I2MV_VIEWS {
        return Err(Error::Template(format!(
            "I2MV needs {I2MV_VIEWS} target views, got {}",
            targets.len()
        )));
    }
    check_text(vocab, prompt, "prompt")?;
    let l = reference.len();
    check_image(vocab, reference, l, "reference")?;
    for (v, t) in targets.iter().enumerate() {
        check_image(vocab, t, l, &format!("target view {v}"))?;
    }
    let mut s = TokenSequence::new(Task::I2mv);
    s.push_special(Special::I2mv);
    s.push_special(Special::Sot);
    s.push_block(prompt, Role::PromptText, false);
    s.push_special(Special::Eot);
    s.push_special(Special::Soi);
    s.push_block(reference, Role::RefImage, false);
    s.push_special(Special::Eoi);
    for (v, t) in targets.iter().enumerate() {
        s.push_special(Special::Soi);
        s.push_block(t, Role::GenImage(v as u8), true);
        s.push_special(Special::Eoi);
    }
    s.views = I2MV_VIEWS;
    Ok(s)
}

/// `[T2MV][SOT] prompt desc [EOT]` followed by four `[SOI] G [EOI]` blocks.
pub fn build_t2mv(
    vocab: &Vocab,
    prompt: &[TokenId],
    desc: &[TokenId],
    targets: &[Vec<TokenId>],
) -> Result<TokenSequence> {
    if targets.len() != T2MV_VIEWS {
        return Err(Error::Template(format!(
            "T2MV needs {T2MV_VIEWS} target views, got {}",
            targets.len()
        )));
    }
    check_text(vocab, prompt, "prompt")?;
    check_text(vocab, desc, "description")?;
    let l = targets[0].len();
    for (v, t) in targets.iter().enumerate() {
        check_image(vocab, t, l, &format!("target view {v}"))?;
    }
    let mut s = TokenSequence::new(Task::T2mv);
    s.push_special(Special::T2mv);
    s.push_special(Special::Sot);
    s.push_block(prompt, Role::PromptText, false);
    s.push_block(desc, Role::DescText, false);
    s.push_special(Special::Eot);
    for (v, t) in targets.iter().enumerate() {
        s.push_special(Special::Soi);
        s.push_block(t, Role::GenImage(v as u8), true);
        s.push_special(Special::Eoi);
    }
    s.views = T2MV_VIEWS;
    Ok(s)
}

/// `[MMU][SOT] prompt [EOT][SOI] image [EOI][SOT] answer [EOT]` with the answer
/// padded to `answer_len`; only answer positions are targets.
pub fn build_mmu(
    vocab: &Vocab,
    prompt: &[TokenId],
    image: &[TokenId],
    answer: &[TokenId],
    answer_len: usize,
) -> Result<TokenSequence> {
    if answer_len == 0 {
        return Err(Error::Template("MMU answer length must be positive".into()));
    }
    if answer.len() > answer_len {
        return Err(Error::Template(format!(
            "answer of {} tokens exceeds the fixed length {answer_len}",
            answer.len()
        )));
    }
    check_text(vocab, prompt, "prompt")?;
    check_text(vocab, answer, "answer")?;
    check_image(vocab, image, image.len(), "image")?;
    let mut s = TokenSequence::new(Task::Mmu);
    s.push_special(Special::Mmu);
    s.push_special(Special::Sot);
    s.push_block(prompt, Role::PromptText, false);
    s.push_special(Special::Eot);
    s.push_special(Special::Soi);
    s.push_block(image, Role::RefImage, false);
    s.push_special(Special::Eoi);
    s.push_special(Special::Sot);
    s.push_block(answer, Role::AnswerText, true);
    for _ in answer.len()..answer_len {
        s.push(Special::Pad.id(), Role::AnswerText, true);
    }
    s.push_special(Special::Eot);
    Ok(s)
}

/// T2I-shaped inpainting template: image positions inside `region` are the
/// only targets (and are masked), everything else is fixed context.
pub fn build_inpaint(
    vocab: &Vocab,
    caption: &[TokenId],
    image: &[TokenId],
    region: &[bool],
) -> Result<TokenSequence> {
    if region.len() != image.len() {
        return Err(Error::Template(format!(
            "region covers {} patches, image has {}",
            region.len(),
            image.len()
        )));
    }
    let mut s = build_t2i(vocab, caption, image)?;
    let mut k = 0;
    for i in 0..s.len() {
        match s.roles[i] {
            Role::CaptionText => s.target[i] = false,
            Role::GenImage(_) => {
                s.target[i] = region[k];
                if region[k] {
                    s.ids[i] = Special::Mask.id();
                }
                k += 1;
            }
            _ => {}
        }
    }
    Ok(s)
}

/// Segments recovered from a sequence by its bracket tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTemplate {
    pub task: Special,
    pub texts: Vec<Vec<TokenId>>,
    pub images: Vec<Vec<TokenId>>,
}

pub fn parse_template(vocab: &Vocab, ids: &[TokenId]) -> Result<ParsedTemplate> {
    let task = match ids.first().map(|&id| vocab.kind(id)).transpose()? {
        Some(TokenKind::Special(
            s @ (Special::T2i | Special::I2mv | Special::T2mv | Special::Mmu),
        )) => s,
        _ => return Err(Error::Template("sequence does not start with a task token".into())),
    };
    let mut texts = Vec::new();
    let mut images = Vec::new();
    let mut i = 1;
    while i < ids.len() {
        let (open, close, into_images) = match vocab.kind(ids[i])? {
            TokenKind::Special(Special::Sot) => (Special::Sot, Special::Eot, false),
            TokenKind::Special(Special::Soi) => (Special::Soi, Special::Eoi, true),
            other => {
                return Err(Error::Template(format!(
                    "unexpected token {other:?} at position {i}"
                )))
            }
        };
        let start = i + 1;
        let end = ids[start..]
            .iter()
            .position(|&id| id == close.id())
            .map(|p| start + p)
            .ok_or_else(|| Error::Template(format!("unterminated {open} block at {i}")))?;
        let block = ids[start..end].to_vec();
        if into_images {
            images.push(block);
        } else {
            texts.push(block);
        }
        i = end + 1;
    }
    Ok(ParsedTemplate {
        task,
        texts,
        images,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
        }
        Ok(MaskSpec { ratio, seed })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub sequence: TokenSequence,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub originals: Vec<TokenId>,
}

/// Number of positions masked for `ratio` over `targets` candidates:
/// `round(ratio * targets)`, but at least one whenever `ratio > 0`.
pub fn mask_size(ratio: f64, targets: usize) -> usize {
    let k = (ratio * targets as f64).round() as usize;
    if ratio > 0.0 {
        k.clamp(1, targets)
    } else {
        0
    }
}

/// Replaces a uniformly drawn subset of the target positions by MASK.
pub fn apply_random_mask(seq: &TokenSequence, spec: MaskSpec) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::Config(format!("mask ratio {} outside [0, 1]", spec.ratio)));
    }
    let candidates = seq.target_positions();
    if candidates.is_empty() {
        return Err(Error::Template("sequence has no target positions".into()));
    }
    let k = mask_size(spec.ratio, candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();
    let mut sequence = seq.clone();
    let originals = positions
        .iter()
        .map(|&p| std::mem::replace(&mut sequence.ids[p], Special::Mask.id()))
        .collect();
    Ok(MaskedSequence {
        sequence,
        positions,
        originals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::default()
    }

    fn img(v: &Vocab, n: usize, salt: u32) -> Vec<TokenId> {
        (0..n as u32).map(|i| v.visual_id((i * 31 + salt) % 1024).unwrap()).collect()
    }

    fn text(v: &Vocab, n: usize) -> Vec<TokenId> {
        v.encode_text(&"abcdefghijklmnopqrstuvwxyz"[..n]).unwrap()
    }

    #[test]
    fn t2i_geometry() {
        let v = vocab();
        let s = build_t2i(&v, &text(&v, 8), &img(&v, 64, 0)).unwrap();
        assert_eq!(s.len(), 77);
        assert_eq!(s.target_count(), 72);
        assert!(matches!(build_t2i(&v, &[], &img(&v, 64, 0)), Err(Error::Template(_))));
    }

    #[test]
    fn i2mv_geometry() {
        let v = vocab();
        let targets: Vec<_> = (0..3).map(|k| img(&v, 64, k + 1)).collect();
        let s = build_i2mv(&v, &text(&v, 8), &img(&v, 64, 0), &targets).unwrap();
        assert_eq!(s.len(), 275);
        assert_eq!(s.target_count(), 192);
        assert!(s
            .roles
            .iter()
            .zip(&s.target)
            .all(|(r, &t)| *r != Role::RefImage || !t));
        assert!(matches!(
            build_i2mv(&v, &text(&v, 8), &img(&v, 64, 0), &targets[..2]),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn t2mv_geometry() {
        let v = vocab();
        let targets: Vec<_> = (0..4).map(|k| img(&v, 64, k)).collect();
        let s = build_t2mv(&v, &text(&v, 8), &text(&v, 16), &targets).unwrap();
        assert_eq!(s.len(), 291);
        assert_eq!(s.target_count(), 256);
        let bare = build_t2mv(&v, &text(&v, 8), &[], &targets).unwrap();
        assert_eq!(bare.len(), 291 - 16);
        assert!(build_t2mv(&v, &text(&v, 8), &[], &targets[..3]).is_err());
    }

    #[test]
    fn mmu_geometry_and_padding() {
        let v = vocab();
        let s = build_mmu(&v, &text(&v, 8), &img(&v, 64, 0), &text(&v, 5), 16).unwrap();
        assert_eq!(s.len(), 95);
        assert_eq!(s.target_count(), 16);
        let pads = s.ids.iter().filter(|&&id| id == Special::Pad.id()).count();
        assert_eq!(pads, 11);
        assert!(s
            .roles
            .iter()
            .zip(&s.target)
            .all(|(r, &t)| t == (*r == Role::AnswerText)));
        assert!(build_mmu(&v, &text(&v, 8), &img(&v, 64, 0), &text(&v, 17), 16).is_err());
    }

    #[test]
    fn every_view_is_bracketed() {
        let v = vocab();
        let targets: Vec<_> = (0..3).map(|k| img(&v, 16, k)).collect();
        let s = build_i2mv(&v, &text(&v, 3), &img(&v, 16, 9), &targets).unwrap();
        for view in 0..3 {
            let pos = s.view_positions(view);
            assert_eq!(pos.len(), 16);
            assert_eq!(s.ids[pos[0] - 1], Special::Soi.id());
            assert_eq!(s.ids[pos[15] + 1], Special::Eoi.id());
        }
    }

    #[test]
    fn parse_recovers_segments() {
        let v = vocab();
        let targets: Vec<_> = (0..3).map(|k| img(&v, 64, k + 1)).collect();
        let s = build_i2mv(&v, &text(&v, 8), &img(&v, 64, 0), &targets).unwrap();
        let p = parse_template(&v, &s.ids).unwrap();
        assert_eq!(p.task, Special::I2mv);
        assert_eq!(p.texts, vec![text(&v, 8)]);
        assert_eq!(p.images.len(), 4);
        assert_eq!(p.images[0], img(&v, 64, 0));
        assert_eq!(&p.images[1..], &targets[..]);
    }

    #[test]
    fn mask_extremes_and_counts() {
        let v = vocab();
        let targets: Vec<_> = (0..3).map(|k| img(&v, 64, k + 1)).collect();
        let s = build_i2mv(&v, &text(&v, 8), &img(&v, 64, 0), &targets).unwrap();
        let none = apply_random_mask(&s, MaskSpec::new(0.0, 1).unwrap()).unwrap();
        assert!(none.positions.is_empty());
        assert_eq!(none.sequence, s);
        let all = apply_random_mask(&s, MaskSpec::new(1.0, 1).unwrap()).unwrap();
        assert_eq!(all.positions, s.target_positions());
        let half = apply_random_mask(&s, MaskSpec::new(0.5, 3).unwrap()).unwrap();
        assert_eq!(half.positions.len(), 96);
        assert!(half.positions.iter().all(|&p| s.target[p]));
        for (&p, &orig) in half.positions.iter().zip(&half.originals) {
            assert_eq!(s.ids[p], orig);
            assert_eq!(half.sequence.ids[p], Special::Mask.id());
        }
    }

    #[test]
    fn tiny_ratio_still_masks_one() {
        assert_eq!(mask_size(1e-6, 192), 1);
        assert_eq!(mask_size(0.0, 192), 0);
        assert_eq!(mask_size(0.5, 192), 96);
    }

    #[test]
    fn mask_without_targets_is_template_error() {
        let v = vocab();
        let mut s = build_t2i(&v, &text(&v, 2), &img(&v, 4, 0)).unwrap();
        s.target.iter_mut().for_each(|t| *t = false);
        assert!(matches!(
            apply_random_mask(&s, MaskSpec::new(0.5, 0).unwrap()),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn render_uses_bracket_names() {
        let v = vocab();
        let s = build_t2i(&v, &v.encode_text("ab").unwrap(), &img(&v, 2, 0)).unwrap();
        let r = s.render(&v);
        assert!(r.starts_with("[T2I][SOT] 107 108 [EOT][SOI] "), "{r}");
        assert!(r.ends_with("[EOI]"));
    }
}
