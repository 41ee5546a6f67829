//! The single token id space shared by special, text and visual tokens.
//!
//! Layout is fixed and contiguous:
//! specials `[0, S)`, text `[S, S + text_size)`, visual `[S + text_size, total)`.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const MIN_LFQ_BITS: u32 = 4;
pub const MAX_LFQ_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum Special {
    Mask = 0,
    Pad,
    T2i,
    I2mv,
    T2mv,
    Mmu,
    Sot,
    Eot,
    Soi,
    Eoi,
}

impl Special {
    pub const ALL: [Special; 10] = [
        Special::Mask,
        Special::Pad,
        Special::T2i,
        Special::I2mv,
        Special::T2mv,
        Special::Mmu,
        Special::Sot,
        Special::Eot,
        Special::Soi,
        Special::Eoi,
    ];

    pub const COUNT: u32 = Self::ALL.len() as u32;

    pub fn name(self) -> &'static str {
        match self {
            Special::Mask => "MASK",
            Special::Pad => "PAD",
            Special::T2i => "T2I",
            Special::I2mv => "I2MV",
            Special::T2mv => "T2MV",
            Special::Mmu => "MMU",
            Special::Sot => "SOT",
            Special::Eot => "EOT",
            Special::Soi => "SOI",
            Special::Eoi => "EOI",
        }
    }

    pub fn from_name(name: &str) -> Option<Special> {
        Self::ALL.iter().copied().find(|s| s.name() == name)
    }

    pub fn id(self) -> TokenId {
        self as TokenId
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special(Special),
    /// Text token carrying its byte value.
    Text(u32),
    /// Visual token carrying its LFQ code.
    Visual(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    text_size: u32,
    lfq_bits: u32,
}

impl Vocab {
    pub fn new(text_size: u32, lfq_bits: u32) -> Result<Self> {
        if text_size < 2 {
            return Err(Error::Config(format!(
                "text_size must be at least 2, got {text_size}"
            )));
        }
        if !(MIN_LFQ_BITS..=MAX_LFQ_BITS).contains(&lfq_bits) {
            return Err(Error::Config(format!(
                "lfq_bits must lie in [{MIN_LFQ_BITS}, {MAX_LFQ_BITS}], got {lfq_bits}"
            )));
        }
        Ok(Vocab {
            text_size,
            lfq_bits,
        })
    }

    pub fn text_size(&self) -> u32 {
        self.text_size
    }

    pub fn lfq_bits(&self) -> u32 {
        self.lfq_bits
    }

    pub fn visual_size(&self) -> u32 {
        1 << self.lfq_bits
    }

    pub fn special_count(&self) -> u32 {
        Special::COUNT
    }

    pub fn total_size(&self) -> u32 {
        Special::COUNT + self.text_size + self.visual_size()
    }

    pub fn text_range(&self) -> Range<TokenId> {
        Special::COUNT..Special::COUNT + self.text_size
    }

    pub fn visual_range(&self) -> Range<TokenId> {
        let start = Special::COUNT + self.text_size;
        start..start + self.visual_size()
    }

    pub fn special(&self, s: Special) -> TokenId {
        s.id()
    }

    pub fn visual_id(&self, code: u32) -> Result<TokenId> {
        if code >= self.visual_size() {
            return Err(Error::Config(format!(
                "visual code {code} exceeds {} codes",
                self.visual_size()
            )));
        }
        Ok(self.visual_range().start + code)
    }

    pub fn text_id(&self, byte: u8) -> Result<TokenId> {
        if u32::from(byte) >= self.text_size {
            return Err(Error::Config(format!(
                "byte {byte} does not fit a text vocabulary of {}",
                self.text_size
            )));
        }
        Ok(Special::COUNT + u32::from(byte))
    }

    pub fn kind(&self, id: TokenId) -> Result<TokenKind> {
        if id >= self.total_size() {
            return Err(Error::OutOfVocab {
                id,
                size: self.total_size(),
            });
        }
        Ok(if id < Special::COUNT {
            TokenKind::Special(Special::ALL[id as usize])
        } else if self.text_range().contains(&id) {
            TokenKind::Text(id - Special::COUNT)
        } else {
            TokenKind::Visual(id - self.visual_range().start)
        })
    }

    /// Visual code for a visual id, `None` for anything else.
    pub fn visual_code(&self, id: TokenId) -> Option<u32> {
        match self.kind(id) {
            Ok(TokenKind::Visual(c)) => Some(c),
            _ => None,
        }
    }

    /// Byte-level text encoding. Captions are ASCII.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>> {
        text.bytes().map(|b| self.text_id(b)).collect()
    }

    /// Inverse of [`Vocab::encode_text`]; non-text ids (PAD included) are skipped.
    pub fn decode_text(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&id| match self.kind(id) {
                Ok(TokenKind::Text(b)) => u8::try_from(b).ok().map(char::from),
                _ => None,
            })
            .collect()
    }

    pub fn visual_ids(&self, codes: &[u32]) -> Result<Vec<TokenId>> {
        codes.iter().map(|&c| self.visual_id(c)).collect()
    }

    /// Debug rendering: specials as `[NAME]`, other ids as space-separated numbers,
    /// e.g. `[I2MV][SOT] 17 42 [EOT][SOI] ...`.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut after_plain = false;
        for &id in ids {
            match self.kind(id) {
                Ok(TokenKind::Special(s)) => {
                    if after_plain {
                        out.push(' ');
                    }
                    out.push_str(&s.to_string());
                    after_plain = false;
                }
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(&id.to_string());
                    after_plain = true;
                }
            }
        }
        out
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            text_size: 256,
            lfq_bits: 10,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_sums() {
        let v = Vocab::new(256, 10).unwrap();
        assert_eq!(v.total_size(), 10 + 256 + 1024);
        assert_eq!(v.total_size(), 1290);
    }

    #[test]
    fn smallest_vocab_visual_range() {
        let v = Vocab::new(2, 4).unwrap();
        assert_eq!(v.visual_range(), 12..28);
    }

    #[test]
    fn mask_is_zero() {
        for (t, k) in [(2, 4), (256, 10), (300, 16)] {
            let v = Vocab::new(t, k).unwrap();
            assert_eq!(v.special(Special::Mask), 0);
            assert_eq!(v.kind(0).unwrap(), TokenKind::Special(Special::Mask));
        }
    }

    #[test]
    fn rejects_bad_bits_and_text() {
        assert!(matches!(Vocab::new(256, 3), Err(Error::Config(_))));
        assert!(matches!(Vocab::new(256, 17), Err(Error::Config(_))));
        assert!(matches!(Vocab::new(1, 10), Err(Error::Config(_))));
    }

    #[test]
    fn kind_boundaries() {
        let v = Vocab::default();
        let first_visual = v.special_count() + v.text_size();
        assert_eq!(v.kind(first_visual).unwrap(), TokenKind::Visual(0));
        assert_eq!(v.kind(first_visual - 1).unwrap(), TokenKind::Text(255));
        assert!(matches!(
            v.kind(v.total_size()),
            Err(Error::OutOfVocab { id: 1290, size: 1290 })
        ));
    }

    #[test]
    fn every_visual_code_round_trips() {
        let v = Vocab::new(16, 10).unwrap();
        for c in 0..v.visual_size() {
            let id = v.visual_id(c).unwrap();
            assert_eq!(v.kind(id).unwrap(), TokenKind::Visual(c));
        }
        assert!(v.visual_id(v.visual_size()).is_err());
    }

    #[test]
    fn special_names_are_exactly_ten() {
        let names: Vec<_> = Special::ALL.iter().map(|s| s.name()).collect();
        assert_eq!(
            names,
            ["MASK", "PAD", "T2I", "I2MV", "T2MV", "MMU", "SOT", "EOT", "SOI", "EOI"]
        );
        for s in Special::ALL {
            assert_eq!(Special::from_name(s.name()), Some(s));
        }
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::default();
        let ids = v.encode_text("a red cube").unwrap();
        assert_eq!(v.decode_text(&ids), "a red cube");
        let tiny = Vocab::new(2, 4).unwrap();
        assert!(tiny.encode_text("a").is_err());
    }
}
