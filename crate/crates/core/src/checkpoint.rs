//! `VMK1` checkpoint container.
//!
//! Layout (little-endian): the magic `VMK1`, a `u32` section count, then per
//! section a length-prefixed name and a `u32` tensor count. Each tensor is a
//! `u32`-length-prefixed UTF-8 name, a dtype byte, a rank byte, `rank` `u64`
//! dims and the raw element bytes. Sections appear in the order vocab,
//! tokenizer, model, optimizer, meta.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::AdamW;
use crate::tokenizer::{LfqTokenizer, TokenizerConfig};
use crate::vocab::{Special, Vocab};

pub const MAGIC: &[u8; 4] = b"VMK1";
pub const SECTION_ORDER: [&str; 5] = ["vocab", "tokenizer", "model", "optimizer", "meta"];
const VOCAB_MAGIC: &[u8] = b"VMK-VOCAB";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DTypeTag {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U32 = 3,
    U64 = 4,
}

impl DTypeTag {
    pub fn size(self) -> usize {
        match self {
            DTypeTag::F32 | DTypeTag::U32 => 4,
            DTypeTag::F64 | DTypeTag::U64 => 8,
            DTypeTag::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DTypeTag::F32 => "f32",
            DTypeTag::F64 => "f64",
            DTypeTag::U8 => "u8",
            DTypeTag::U32 => "u32",
            DTypeTag::U64 => "u64",
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => DTypeTag::F32,
            1 => DTypeTag::F64,
            2 => DTypeTag::U8,
            3 => DTypeTag::U32,
            4 => DTypeTag::U64,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DTypeTag,
    pub dims: Vec<u64>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn f32(name: &str, dims: &[usize], data: &[f32]) -> Self {
        Self::with(name, DTypeTag::F32, dims, data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn f64(name: &str, dims: &[usize], data: &[f64]) -> Self {
        Self::with(name, DTypeTag::F64, dims, data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn u64s(name: &str, data: &[u64]) -> Self {
        Self::with(name, DTypeTag::U64, &[data.len()], data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn u32s(name: &str, data: &[u32]) -> Self {
        Self::with(name, DTypeTag::U32, &[data.len()], data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn bytes(name: &str, data: &[u8]) -> Self {
        Self::with(name, DTypeTag::U8, &[data.len()], data.to_vec())
    }

    fn with(name: &str, dtype: DTypeTag, dims: &[usize], bytes: Vec<u8>) -> Self {
        RawTensor {
            name: name.to_string(),
            dtype,
            dims: dims.iter().map(|&d| d as u64).collect(),
            bytes,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    fn expect(&self, dtype: DTypeTag) -> Result<(), CheckpointError> {
        if self.dtype == dtype {
            Ok(())
        } else {
            Err(CheckpointError::Malformed(format!(
                "tensor {} has dtype {}, expected {}",
                self.name,
                self.dtype.name(),
                dtype.name()
            )))
        }
    }

    pub fn to_f32(&self) -> Result<Vec<f32>, CheckpointError> {
        self.expect(DTypeTag::F32)?;
        Ok(self.bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_f64(&self) -> Result<Vec<f64>, CheckpointError> {
        self.expect(DTypeTag::F64)?;
        Ok(self.bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_u64(&self) -> Result<Vec<u64>, CheckpointError> {
        self.expect(DTypeTag::U64)?;
        Ok(self.bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_u32(&self) -> Result<Vec<u32>, CheckpointError> {
        self.expect(DTypeTag::U32)?;
        Ok(self.bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_bytes(&self) -> Result<&[u8], CheckpointError> {
        self.expect(DTypeTag::U8)?;
        Ok(&self.bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<RawTensor>,
}

impl Section {
    fn new(name: &str) -> Self {
        Section {
            name: name.to_string(),
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&RawTensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Malformed(format!("section {} lacks tensor {name}", self.name)))
    }
}

/// Serialises sections in the given order.
pub fn encode_sections(sections: &[Section]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    for s in sections {
        put_str(&mut out, &s.name);
        out.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
        for t in &s.tensors {
            put_str(&mut out, &t.name);
            out.push(t.dtype as u8);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn decode_sections(bytes: &[u8]) -> Result<Vec<Section>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("file shorter than the magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::VersionMismatch(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let n_sections = r.u32("section count")?;
    let mut sections = Vec::new();
    for _ in 0..n_sections {
        let mut section = Section::new(&r.string("section name")?);
        let n_tensors = r.u32("tensor count")?;
        for _ in 0..n_tensors {
            let name = r.string("tensor name")?;
            let head = r.take(2, "tensor header")?;
            let dtype = DTypeTag::from_byte(head[0])
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} has dtype tag {}", head[0])))?;
            let dims = (0..head[1])
                .map(|_| r.u64("tensor dims"))
                .collect::<Result<Vec<_>, _>>()?;
            let len = dims
                .iter()
                .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= usize::MAX as u64)
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
            let data = r.take(len as usize, &format!("tensor {name}"))?.to_vec();
            section.tensors.push(RawTensor {
                name,
                dtype,
                dims,
                bytes: data,
            });
        }
        sections.push(section);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last section",
            bytes.len() - r.pos
        )));
    }
    Ok(sections)
}

/// Serialisable position of a [`ChaCha8Rng`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Curriculum stage that produced the weights; 0 for a fresh init.
    pub stage: u32,
    /// Optimizer steps completed within `stage`.
    pub step: u64,
    pub rng: RngState,
    /// Flat `key = value` text of the producing run's configuration.
    pub config_echo: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub tokenizer: Option<LfqTokenizer>,
    pub model: ModelParams<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub meta: CheckpointMeta,
}

fn vocab_section(v: &Vocab) -> Section {
    let names: Vec<&str> = Special::ALL.iter().map(|s| s.name()).collect();
    Section {
        name: "vocab".into(),
        tensors: vec![
            RawTensor::bytes("magic", VOCAB_MAGIC),
            RawTensor::u32s("lfq_bits", &[v.lfq_bits()]),
            RawTensor::u32s("text_size", &[v.text_size()]),
            RawTensor::bytes("specials", names.join("\n").as_bytes()),
        ],
    }
}

fn tokenizer_section(tok: Option<&LfqTokenizer>) -> Section {
    let mut s = Section::new("tokenizer");
    if let Some(tok) = tok {
        let c = tok.config();
        s.tensors.push(RawTensor::u64s(
            "config",
            &[c.patch_size as u64, u64::from(c.bits), c.hidden as u64, c.channels as u64],
        ));
        for e in tok.layout().entries() {
            s.tensors.push(RawTensor::f64(&e.name, &e.shape, &tok.weights()[e.range()]));
        }
    }
    s
}

fn model_section(m: &ModelParams<f32>) -> Section {
    let c = m.config();
    let mut s = Section::new("model");
    s.tensors.push(RawTensor::u64s(
        "config",
        &[c.d, c.n_layers, c.n_heads, c.max_seq_len, c.vocab_size, c.ffn_mult].map(|v| v as u64),
    ));
    for e in m.layout().entries() {
        s.tensors.push(RawTensor::f32(&e.name, &e.shape, &m.data()[e.range()]));
    }
    s
}

fn optimizer_section(opt: Option<&AdamW<f32>>) -> Section {
    let mut s = Section::new("optimizer");
    if let Some(o) = opt {
        s.tensors.push(RawTensor::u64s("t", &[o.t]));
        s.tensors.push(RawTensor::f32("m", &[o.m.len()], &o.m));
        s.tensors.push(RawTensor::f32("v", &[o.v.len()], &o.v));
    }
    s
}

fn meta_section(m: &CheckpointMeta) -> Section {
    Section {
        name: "meta".into(),
        tensors: vec![
            RawTensor::u32s("stage", &[m.stage]),
            RawTensor::u64s("step", &[m.step]),
            RawTensor::bytes("rng.seed", &m.rng.seed),
            RawTensor::u64s("rng.stream", &[m.rng.stream]),
            RawTensor::u64s("rng.word_pos", &[m.rng.word_pos as u64, (m.rng.word_pos >> 64) as u64]),
            RawTensor::bytes("config", m.config_echo.as_bytes()),
        ],
    }
}

fn scalar<T: Copy>(v: Vec<T>, what: &str) -> Result<T, CheckpointError> {
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(CheckpointError::Malformed(format!("{what} must hold one value"))),
    }
}

fn shape_of(t: &RawTensor) -> Vec<usize> {
    t.dims.iter().map(|&d| d as usize).collect()
}

impl Checkpoint {
    pub fn to_sections(&self) -> Vec<Section> {
        vec![
            vocab_section(&self.vocab),
            tokenizer_section(self.tokenizer.as_ref()),
            model_section(&self.model),
            optimizer_section(self.optimizer.as_ref()),
            meta_section(&self.meta),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_sections(&self.to_sections())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let sections = decode_sections(bytes)?;
        let names: Vec<&str> = sections.iter().map(|s| s.name.as_str()).collect();
        if names != SECTION_ORDER {
            return Err(CheckpointError::Malformed(format!(
                "sections {names:?}, expected {SECTION_ORDER:?}"
            )));
        }
        let [vs, ts, ms, os, meta] = &sections[..] else {
            unreachable!("section count checked above")
        };

        if vs.get("magic")?.to_bytes()? != VOCAB_MAGIC {
            return Err(CheckpointError::VersionMismatch("unknown vocab header".into()));
        }
        let specials = String::from_utf8_lossy(vs.get("specials")?.to_bytes()?).into_owned();
        let expected: Vec<&str> = Special::ALL.iter().map(|s| s.name()).collect();
        if specials != expected.join("\n") {
            return Err(CheckpointError::VersionMismatch(format!(
                "special token table differs: {specials:?}"
            )));
        }
        let vocab = Vocab::new(
            scalar(vs.get("text_size")?.to_u32()?, "text_size")?,
            scalar(vs.get("lfq_bits")?.to_u32()?, "lfq_bits")?,
        )
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

        let tokenizer = if ts.tensors.is_empty() {
            None
        } else {
            let c = ts.get("config")?.to_u64()?;
            let [patch_size, bits, hidden, channels] = c[..] else {
                return Err(CheckpointError::Malformed("tokenizer config needs 4 values".into()));
            };
            let cfg = TokenizerConfig {
                patch_size: patch_size as usize,
                bits: bits as u32,
                hidden: hidden as usize,
                channels: channels as usize,
            };
            let layout = cfg.layout();
            let mut w = Vec::with_capacity(layout.total());
            for e in layout.entries() {
                let t = ts.get(&e.name)?;
                if shape_of(t) != e.shape {
                    return Err(CheckpointError::ShapeMismatch(format!(
                        "tokenizer tensor {} has shape {:?}, config implies {:?}",
                        e.name, t.dims, e.shape
                    )));
                }
                w.extend(t.to_f64()?);
            }
            Some(LfqTokenizer::from_weights(cfg, w).map_err(|e| CheckpointError::Malformed(e.to_string()))?)
        };

        let c = ms.get("config")?.to_u64()?;
        let [d, n_layers, n_heads, max_seq_len, vocab_size, ffn_mult] = c[..] else {
            return Err(CheckpointError::Malformed("model config needs 6 values".into()));
        };
        let cfg = ModelConfig {
            d: d as usize,
            n_layers: n_layers as usize,
            n_heads: n_heads as usize,
            max_seq_len: max_seq_len as usize,
            vocab_size: vocab_size as usize,
            ffn_mult: ffn_mult as usize,
        };
        if cfg.vocab_size != vocab.total_size() as usize {
            return Err(CheckpointError::ShapeMismatch(format!(
                "model vocab_size {} but vocabulary has {} ids",
                cfg.vocab_size,
                vocab.total_size()
            )));
        }
        cfg.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let layout = cfg.layout();
        let mut data = Vec::with_capacity(layout.total());
        for e in layout.entries() {
            let t = ms.get(&e.name)?;
            if shape_of(t) != e.shape {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "model tensor {} has shape {:?}, config implies {:?}",
                    e.name, t.dims, e.shape
                )));
            }
            data.extend(t.to_f32()?);
        }
        if ms.tensors.len() != layout.entries().len() + 1 {
            return Err(CheckpointError::ShapeMismatch(format!(
                "model section has {} tensors, config implies {}",
                ms.tensors.len() - 1,
                layout.entries().len()
            )));
        }
        let model = ModelParams::from_data(cfg, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;

        let optimizer = if os.tensors.is_empty() {
            None
        } else {
            let m = os.get("m")?.to_f32()?;
            let v = os.get("v")?.to_f32()?;
            if m.len() != model.len() || v.len() != model.len() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "optimizer moments hold {}/{} values, model has {}",
                    m.len(),
                    v.len(),
                    model.len()
                )));
            }
            Some(AdamW {
                m,
                v,
                t: scalar(os.get("t")?.to_u64()?, "optimizer t")?,
            })
        };

        let seed: [u8; 32] = meta
            .get("rng.seed")?
            .to_bytes()?
            .try_into()
            .map_err(|_| CheckpointError::Malformed("rng seed must be 32 bytes".into()))?;
        let wp = meta.get("rng.word_pos")?.to_u64()?;
        let [lo, hi] = wp[..] else {
            return Err(CheckpointError::Malformed("rng word_pos needs 2 words".into()));
        };
        let meta = CheckpointMeta {
            stage: scalar(meta.get("stage")?.to_u32()?, "stage")?,
            step: scalar(meta.get("step")?.to_u64()?, "step")?,
            rng: RngState {
                seed,
                stream: scalar(meta.get("rng.stream")?.to_u64()?, "rng stream")?,
                word_pos: u128::from(lo) | (u128::from(hi) << 64),
            },
            config_echo: String::from_utf8(meta.get("config")?.to_bytes()?.to_vec())
                .map_err(|_| CheckpointError::Malformed("config echo is not UTF-8".into()))?,
        };
        Ok(Checkpoint {
            vocab,
            tokenizer,
            model,
            optimizer,
            meta,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

/// Section and tensor listing without interpreting the contents.
pub fn read_sections(path: impl AsRef<Path>) -> Result<Vec<Section>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_sections(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let vocab = Vocab::default();
        let cfg = ModelConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 16,
            vocab_size: vocab.total_size() as usize,
            ffn_mult: 2,
        };
        let model = ModelParams::<f32>::init(cfg, 3).unwrap();
        let mut opt = AdamW::new(model.len());
        opt.t = 5;
        opt.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        Checkpoint {
            vocab,
            tokenizer: Some(LfqTokenizer::init(TokenizerConfig { hidden: 8, ..Default::default() }, 2).unwrap()),
            model,
            optimizer: Some(opt),
            meta: CheckpointMeta {
                stage: 2,
                step: 17,
                rng: RngState::capture(&rng),
                config_echo: "steps = 20\n".into(),
            },
        }
    }

    #[test]
    fn resave_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _: [u64; 3] = rng.random();
        let mut restored = RngState::capture(&rng).restore();
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = restored.random();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::VersionMismatch(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut c = sample();
        c.model = ModelParams::init(ModelConfig { d: 16, ..*c.model.config() }, 1).unwrap();
        let mut sections = c.to_sections();
        // Claim the narrow config while keeping the wide tensors.
        sections[2].tensors[0] = model_section(&sample().model).tensors[0].clone();
        assert!(matches!(
            Checkpoint::from_bytes(&encode_sections(&sections)),
            Err(CheckpointError::ShapeMismatch(_))
        ));
    }
}
