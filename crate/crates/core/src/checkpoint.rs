//! `EMVC` checkpoint files.
//!
//! ```text
//! magic "EMVC" | version u8 | section_count u16
//! section: tag [u8; 4] | length u32 | payload
//! ```
//!
//! Sections appear in the order `CONF DGST META CODE* PARM [PRIO]`. All numbers
//! are little-endian; tensors are stored as f32.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{config_digest, Model};
use crate::nn::NamedTensor;
use crate::prior::{Prior, PriorConfig};
use crate::quantizer::Codebook;

pub const MAGIC: [u8; 4] = *b"EMVC";
pub const VERSION: u8 = 1;

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub smoothed_loss: f64,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
    pub perplexity_top: f64,
    pub perplexity_bottom: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,steps,train_loss,smoothed_loss,eval_psnr,eval_ssim,perplexity_top,perplexity_bottom";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.steps,
            self.train_loss,
            self.smoothed_loss,
            opt(self.eval_psnr),
            opt(self.eval_ssim),
            self.perplexity_top,
            opt(self.perplexity_bottom)
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::format(format!("history line {line:?}")));
        }
        let bad = |e: &dyn std::fmt::Display| Error::format(format!("history line {line:?}: {e}"));
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&e));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            epoch: f[0].parse().map_err(|e| bad(&e))?,
            steps: f[1].parse().map_err(|e| bad(&e))?,
            train_loss: num(f[2])?,
            smoothed_loss: num(f[3])?,
            eval_psnr: opt(f[4])?,
            eval_ssim: opt(f[5])?,
            perplexity_top: num(f[6])?,
            perplexity_bottom: opt(f[7])?,
        })
    }
}

pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub prior: Option<Prior>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: Model) -> Self {
        Self {
            config,
            model,
            epoch: 0,
            history: Vec::new(),
            prior: None,
        }
    }

    /// Content hash of the config and every codebook.
    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.config, &self.model.codebooks())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        sections.push((*b"CONF", self.config.to_text().into_bytes()));
        sections.push((*b"DGST", self.digest().to_vec()));
        let mut meta = format!("epoch={}\n{}\n", self.epoch, EpochRecord::CSV_HEADER);
        for r in &self.history {
            let _ = writeln!(meta, "{}", r.to_csv());
        }
        sections.push((*b"META", meta.into_bytes()));
        for (stages, cb) in self.model.codebooks() {
            sections.push((*b"CODE", encode_codebook(stages, cb)));
        }
        let params = match &self.model {
            Model::Vq(m) => m.params().export()?,
            Model::BlockMean(_) => Vec::new(),
        };
        sections.push((*b"PARM", encode_tensors(&params)));
        if let Some(p) = &self.prior {
            let text = p.config().to_text();
            let mut payload = (text.len() as u32).to_le_bytes().to_vec();
            payload.extend_from_slice(text.as_bytes());
            payload.extend(encode_tensors(&p.export()?));
            sections.push((*b"PRIO", payload));
        }
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        out.extend_from_slice(&(sections.len() as u16).to_le_bytes());
        for (tag, payload) in sections {
            out.extend_from_slice(&tag);
            let len = u32::try_from(payload.len()).map_err(|_| Error::invalid("checkpoint section too large"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend(payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad magic, not an EMVC checkpoint"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u16()? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u32()? as usize;
            sections.push((tag, r.take(len)?));
        }
        if r.remaining() != 0 {
            return Err(Error::format("trailing bytes after the last checkpoint section"));
        }
        let mut it = sections.into_iter().peekable();
        let mut expect = |tag: &[u8; 4]| -> Result<&[u8]> {
            match it.next() {
                Some((t, p)) if &t == tag => Ok(p),
                Some((t, _)) => Err(Error::format(format!(
                    "expected section {}, found {}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(&t)
                ))),
                None => Err(Error::format(format!("missing section {}", String::from_utf8_lossy(tag)))),
            }
        };
        let conf = std::str::from_utf8(expect(b"CONF")?).map_err(|e| Error::format(e.to_string()))?;
        let config = TrainConfig::parse(conf).map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let stored_digest: [u8; 32] = expect(b"DGST")?
            .try_into()
            .map_err(|_| Error::format("digest section must be 32 bytes"))?;
        let meta = std::str::from_utf8(expect(b"META")?).map_err(|e| Error::format(e.to_string()))?;
        let (epoch, history) = parse_meta(meta)?;
        let mut model = Model::new(&config)?;
        let expected_books = model.codebooks().len();
        let mut books = Vec::with_capacity(expected_books);
        for _ in 0..expected_books {
            books.push(decode_codebook(expect(b"CODE")?)?);
        }
        let params = decode_tensors(&mut Reader::new(expect(b"PARM")?), true)?;
        match &mut model {
            Model::Vq(m) => {
                m.set_codebooks(books)?;
                m.params().import(&params)?;
            }
            Model::BlockMean(_) => {
                if !params.is_empty() {
                    return Err(Error::format("block-mean checkpoint carries parameters"));
                }
                let fresh: Vec<&Codebook> = model.codebooks().into_iter().map(|(_, c)| c).collect();
                if books.iter().zip(fresh).any(|((_, b), f)| b != f) {
                    return Err(Error::format("block-mean codebook differs from the fixed levels"));
                }
            }
        }
        drop(expect);
        let prior = match it.next() {
            Some((t, payload)) if &t == b"PRIO" => {
                let mut r = Reader::new(payload);
                let len = r.u32()? as usize;
                let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::format(e.to_string()))?;
                let pc = PriorConfig::parse(text)?;
                let tensors = decode_tensors(&mut r, true)?;
                Some(Prior::from_parts(pc, &tensors)?)
            }
            Some((t, _)) => {
                return Err(Error::format(format!("unexpected section {}", String::from_utf8_lossy(&t))))
            }
            None => None,
        };
        if let Some((t, _)) = it.next() {
            return Err(Error::format(format!("unexpected section {}", String::from_utf8_lossy(&t))));
        }
        let ckpt = Self {
            config,
            model,
            epoch,
            history,
            prior,
        };
        if ckpt.digest() != stored_digest {
            return Err(Error::format("checkpoint digest does not match its config and codebooks"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tile_size(&self) -> usize {
        self.config.tile_size
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }
}

fn parse_meta(text: &str) -> Result<(usize, Vec<EpochRecord>)> {
    let mut lines = text.lines();
    let epoch = lines
        .next()
        .and_then(|l| l.strip_prefix("epoch="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format("META section lacks epoch"))?;
    if lines.next() != Some(EpochRecord::CSV_HEADER) {
        return Err(Error::format("META section lacks the history header"));
    }
    let history = lines.map(EpochRecord::from_csv).collect::<Result<_>>()?;
    Ok((epoch, history))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_codebook(stages: u8, cb: &Codebook) -> Vec<u8> {
    let mut out = vec![stages];
    out.extend_from_slice(&(cb.size() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
    out.extend_from_slice(&cb.decay().to_le_bytes());
    out.extend_from_slice(&cb.epsilon().to_le_bytes());
    push_f32s(&mut out, cb.embeddings());
    push_f32s(&mut out, cb.ema_counts());
    push_f32s(&mut out, cb.ema_sums());
    out
}

fn decode_codebook(payload: &[u8]) -> Result<(u8, Codebook)> {
    let mut r = Reader::new(payload);
    let stages = r.u8()?;
    let size = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let decay = r.f32()?;
    let epsilon = r.f32()?;
    let n = size
        .checked_mul(dim)
        .ok_or_else(|| Error::format("codebook dims overflow"))?;
    let embeddings = r.f32s(n)?;
    let counts = r.f32s(size)?;
    let sums = r.f32s(n)?;
    if r.remaining() != 0 {
        return Err(Error::format("trailing bytes in codebook section"));
    }
    let cb = Codebook::from_parts(size, dim, embeddings, counts, sums, decay, epsilon)
        .map_err(|e| Error::format(format!("codebook section: {e}")))?;
    Ok((stages, cb))
}

fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = (tensors.len() as u32).to_le_bytes().to_vec();
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        push_f32s(&mut out, &t.data);
    }
    out
}

fn decode_tensors(r: &mut Reader, exhaust: bool) -> Result<Vec<NamedTensor>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::format(e.to_string()))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("tensor dims overflow"))?;
        let data = r.f32s(n)?;
        out.push(NamedTensor { name, dims, data });
    }
    if exhaust && r.remaining() != 0 {
        return Err(Error::format("trailing bytes in tensor section"));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            levels: vec![2],
            pair: Some((2, 1)),
            hidden_width: 4,
            embed_dim: 3,
            codebook_size: 8,
            residual_blocks: 1,
            tile_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let config = tiny();
        let mut ck = Checkpoint::new(config.clone(), Model::new(&config).unwrap());
        ck.epoch = 3;
        ck.history.push(EpochRecord {
            epoch: 1,
            steps: 8,
            train_loss: 0.123456789,
            smoothed_loss: 0.2,
            eval_psnr: None,
            eval_ssim: Some(0.5),
            perplexity_top: 3.25,
            perplexity_bottom: Some(1.5),
        });
        ck.prior = Some(
            Prior::new(PriorConfig {
                layers: 1,
                width: 8,
                heads: 2,
                top_codes: 8,
                bottom_codes: 8,
                top_dims: (4, 4),
                bottom_dims: (8, 8),
                seed: 1,
            })
            .unwrap(),
        );
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.history, ck.history);
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.digest(), ck.digest());
    }

    #[test]
    fn block_mean_checkpoint_round_trip() {
        let config = TrainConfig {
            model_kind: ModelKind::BlockMean,
            levels: vec![2, 3],
            ..TrainConfig::default()
        };
        let ck = Checkpoint::new(config.clone(), Model::new(&config).unwrap());
        let a = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&a).unwrap().to_bytes().unwrap(), a);
    }

    #[test]
    fn corruption_is_detected() {
        let config = tiny();
        let ck = Checkpoint::new(config.clone(), Model::new(&config).unwrap());
        let a = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&a[..a.len() - 3]).is_err());
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        // Flip a byte inside the digest section.
        let mut bad = a.clone();
        let pos = a.windows(4).position(|w| w == b"DGST").unwrap() + 8;
        bad[pos] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
