//! Decoder-only transformer that predicts bottom tokens from top tokens.
//!
//! A training sequence is `BOS top... SEP bottom...`. Top and bottom codes use
//! disjoint vocabulary ranges of one embedding table, each grid has learned row
//! and column embeddings, and the output head covers the bottom vocabulary
//! only, so sampling can never emit a top code or a special token.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax_last, LayerNorm, Linear, NamedTensor, ParamStore};
use crate::tokenstream::TokenGrid;

const BOS: u32 = 0;
const SEP: u32 = 1;
const MASK_FILL: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub top_codes: usize,
    pub bottom_codes: usize,
    pub top_dims: (usize, usize),
    pub bottom_dims: (usize, usize),
    pub seed: u64,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::invalid("prior layers, width and heads must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "prior width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.top_codes < 2 || self.bottom_codes < 2 {
            return Err(Error::invalid("prior vocabularies need at least two codes"));
        }
        if self.top_len() == 0 || self.bottom_len() == 0 {
            return Err(Error::invalid("prior grids must be non-empty"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.top_codes + self.bottom_codes + 2
    }

    pub fn top_len(&self) -> usize {
        self.top_dims.0 * self.top_dims.1
    }

    pub fn bottom_len(&self) -> usize {
        self.bottom_dims.0 * self.bottom_dims.1
    }

    pub fn max_context(&self) -> usize {
        self.top_len() + self.bottom_len() + 2
    }

    pub fn to_text(&self) -> String {
        format!(
            "layers={}\nwidth={}\nheads={}\ntop_codes={}\nbottom_codes={}\ntop_dims={},{}\nbottom_dims={},{}\nseed={}\n",
            self.layers,
            self.width,
            self.heads,
            self.top_codes,
            self.bottom_codes,
            self.top_dims.0,
            self.top_dims.1,
            self.bottom_dims.0,
            self.bottom_dims.1,
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("prior config line {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::format(format!("prior config lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|e| Error::format(format!("prior config {k}: {e}")))
        };
        let dims = |k: &str| -> Result<(usize, usize)> {
            let (a, b) = get(k)?
                .split_once(',')
                .ok_or_else(|| Error::format(format!("prior config {k}: expected rows,cols")))?;
            let p = |s: &str| s.parse::<usize>().map_err(|e| Error::format(format!("prior config {k}: {e}")));
            Ok((p(a)?, p(b)?))
        };
        let c = Self {
            layers: num("layers")?,
            width: num("width")?,
            heads: num("heads")?,
            top_codes: num("top_codes")?,
            bottom_codes: num("bottom_codes")?,
            top_dims: dims("top_dims")?,
            bottom_dims: dims("bottom_dims")?,
            seed: get("seed")?
                .parse()
                .map_err(|e| Error::format(format!("prior config seed: {e}")))?,
        };
        c.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, top_k: Option<usize> },
}

/// A `(top, bottom)` token pair for one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub top: TokenGrid,
    pub bottom: TokenGrid,
}

struct Block {
    ln1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc: Linear,
    proj: Linear,
}

struct Cache {
    keys: Option<Tensor>,
    values: Option<Tensor>,
}

pub struct Prior {
    config: PriorConfig,
    params: ParamStore,
    tokens: Tensor,
    special_pos: Tensor,
    top_row: Tensor,
    top_col: Tensor,
    bottom_row: Tensor,
    bottom_col: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Prior {
    pub fn new(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(DType::F32, config.seed);
        let w = config.width;
        let std = 0.02;
        let tokens = ps.normal("prior.tok", &[config.vocab(), w], std)?;
        let special_pos = ps.normal("prior.pos_special", &[2, w], std)?;
        let top_row = ps.normal("prior.pos_top_row", &[config.top_dims.0, w], std)?;
        let top_col = ps.normal("prior.pos_top_col", &[config.top_dims.1, w], std)?;
        let bottom_row = ps.normal("prior.pos_bottom_row", &[config.bottom_dims.0, w], std)?;
        let bottom_col = ps.normal("prior.pos_bottom_col", &[config.bottom_dims.1, w], std)?;
        let blocks = (0..config.layers)
            .map(|i| {
                let n = format!("prior.block{i}");
                Ok(Block {
                    ln1: LayerNorm::new(&mut ps, &format!("{n}.ln1"), w)?,
                    query: Linear::new(&mut ps, &format!("{n}.query"), w, w)?,
                    key: Linear::new(&mut ps, &format!("{n}.key"), w, w)?,
                    value: Linear::new(&mut ps, &format!("{n}.value"), w, w)?,
                    out: Linear::new(&mut ps, &format!("{n}.out"), w, w)?,
                    ln2: LayerNorm::new(&mut ps, &format!("{n}.ln2"), w)?,
                    fc: Linear::new(&mut ps, &format!("{n}.fc"), w, 4 * w)?,
                    proj: Linear::new(&mut ps, &format!("{n}.proj"), 4 * w, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut ps, "prior.ln_f", w)?;
        let head = Linear::new(&mut ps, "prior.head", w, config.bottom_codes)?;
        ps.scale("prior.head.weight", 0.1)?;
        Ok(Self {
            config,
            params: ps,
            tokens,
            special_pos,
            top_row,
            top_col,
            bottom_row,
            bottom_col,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn export(&self) -> Result<Vec<NamedTensor>> {
        self.params.export()
    }

    pub fn from_parts(config: PriorConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let prior = Self::new(config)?;
        prior.params.import(tensors)?;
        Ok(prior)
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        let c = &self.config;
        if (seq.top.rows, seq.top.cols) != c.top_dims {
            return Err(Error::shape(format!(
                "top grid {}x{} but the prior expects {:?}",
                seq.top.rows, seq.top.cols, c.top_dims
            )));
        }
        if (seq.bottom.rows, seq.bottom.cols) != c.bottom_dims {
            return Err(Error::shape(format!(
                "bottom grid {}x{} but the prior expects {:?}",
                seq.bottom.rows, seq.bottom.cols, c.bottom_dims
            )));
        }
        self.check_top(&seq.top)?;
        if seq.bottom.tokens.iter().any(|&t| t as usize >= c.bottom_codes) {
            return Err(Error::invalid("bottom token outside the bottom vocabulary"));
        }
        Ok(())
    }

    fn check_top(&self, top: &TokenGrid) -> Result<()> {
        if (top.rows, top.cols) != self.config.top_dims {
            return Err(Error::shape(format!(
                "top grid {}x{} but the prior expects {:?}",
                top.rows, top.cols, self.config.top_dims
            )));
        }
        if top.tokens.iter().any(|&t| t as usize >= self.config.top_codes) {
            return Err(Error::invalid("top token outside the top vocabulary"));
        }
        Ok(())
    }

    fn top_id(&self, t: u32) -> u32 {
        2 + t
    }

    fn bottom_id(&self, t: u32) -> u32 {
        2 + self.config.top_codes as u32 + t
    }

    /// Input ids (everything except the last bottom token).
    fn input_ids(&self, seq: &TokenSequence) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.config.max_context() - 1);
        ids.push(BOS);
        ids.extend(seq.top.tokens.iter().map(|&t| self.top_id(t)));
        ids.push(SEP);
        let b = &seq.bottom.tokens;
        ids.extend(b[..b.len() - 1].iter().map(|&t| self.bottom_id(t)));
        ids
    }

    /// Positional embedding of input position `p`.
    fn position(&self, p: usize) -> Result<Tensor> {
        let c = &self.config;
        let t = c.top_len();
        let row = |table: &Tensor, i: usize| table.get(i);
        Ok(if p == 0 {
            row(&self.special_pos, 0)?
        } else if p <= t {
            let i = p - 1;
            (row(&self.top_row, i / c.top_dims.1)? + row(&self.top_col, i % c.top_dims.1)?)?
        } else if p == t + 1 {
            row(&self.special_pos, 1)?
        } else {
            let j = p - t - 2;
            (row(&self.bottom_row, j / c.bottom_dims.1)? + row(&self.bottom_col, j % c.bottom_dims.1)?)?
        })
    }

    fn positions(&self, len: usize) -> Result<Tensor> {
        let c = &self.config;
        let t = c.top_len();
        let mut parts = vec![self.special_pos.narrow(0, 0, 1)?];
        let top_r: Vec<u32> = (0..t).map(|i| (i / c.top_dims.1) as u32).collect();
        let top_c: Vec<u32> = (0..t).map(|i| (i % c.top_dims.1) as u32).collect();
        let dev = &Device::Cpu;
        parts.push(
            (self.top_row.index_select(&Tensor::new(top_r, dev)?, 0)?
                + self.top_col.index_select(&Tensor::new(top_c, dev)?, 0)?)?,
        );
        parts.push(self.special_pos.narrow(0, 1, 1)?);
        let nb = len - t - 2;
        if nb > 0 {
            let br: Vec<u32> = (0..nb).map(|j| (j / c.bottom_dims.1) as u32).collect();
            let bc: Vec<u32> = (0..nb).map(|j| (j % c.bottom_dims.1) as u32).collect();
            parts.push(
                (self.bottom_row.index_select(&Tensor::new(br, dev)?, 0)?
                    + self.bottom_col.index_select(&Tensor::new(bc, dev)?, 0)?)?,
            );
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    fn heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, w) = x.dims3()?;
        let h = self.config.heads;
        Ok(x.reshape((n, l, h, w / h))?.transpose(1, 2)?.contiguous()?)
    }

    fn merge(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, l, _) = x.dims4()?;
        Ok(x.transpose(1, 2)?.reshape((n, l, self.config.width))?)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let scale = 1.0 / ((self.config.width / self.config.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        Ok(softmax_last(&scores)?.matmul(v)?)
    }

    /// Logits for every input position, `(N, L, K_bottom)`.
    fn forward_ids(&self, ids: &Tensor) -> Result<Tensor> {
        let (n, l) = ids.dims2()?;
        let w = self.config.width;
        let tok = self.tokens.index_select(&ids.flatten_all()?, 0)?.reshape((n, l, w))?;
        let mut x = tok.broadcast_add(&self.positions(l)?)?;
        let mask: Vec<f32> = (0..l)
            .flat_map(|i| (0..l).map(move |j| if j > i { MASK_FILL as f32 } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (l, l), &Device::Cpu)?;
        for b in &self.blocks {
            let h = b.ln1.forward(&x)?;
            let q = self.heads(&b.query.forward(&h)?)?;
            let k = self.heads(&b.key.forward(&h)?)?;
            let v = self.heads(&b.value.forward(&h)?)?;
            let a = self.merge(&self.attend(&q, &k, &v, Some(&mask))?)?;
            x = (x + b.out.forward(&a)?)?;
            let h = b.ln2.forward(&x)?;
            x = (x + b.proj.forward(&b.fc.forward(&h)?.gelu()?)?)?;
        }
        self.head.forward(&self.ln_f.forward(&x)?)
    }

    /// Teacher-forced logits at the bottom positions, `(N, B, K_bottom)`.
    fn bottom_logits_batch(&self, batch: &[&TokenSequence]) -> Result<Tensor> {
        let mut ids = Vec::new();
        for s in batch {
            self.check_sequence(s)?;
            ids.extend(self.input_ids(s));
        }
        let l = self.config.max_context() - 1;
        let ids = Tensor::from_vec(ids, (batch.len(), l), &Device::Cpu)?;
        let logits = self.forward_ids(&ids)?;
        let t = self.config.top_len();
        Ok(logits.narrow(1, t + 1, self.config.bottom_len())?)
    }

    /// Teacher-forced logits for each bottom position of one sequence.
    pub fn bottom_logits(&self, seq: &TokenSequence) -> Result<Vec<Vec<f32>>> {
        Ok(self.bottom_logits_batch(&[seq])?.squeeze(0)?.to_vec2::<f32>()?)
    }

    /// Mean cross-entropy (nats per bottom token) of the batch, differentiable.
    pub fn loss(&self, batch: &[&TokenSequence]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::invalid("empty prior batch"));
        }
        let logits = self.bottom_logits_batch(batch)?;
        let targets: Vec<u32> = batch.iter().flat_map(|s| s.bottom.tokens.iter().copied()).collect();
        let k = self.config.bottom_codes;
        let logits = logits.reshape((targets.len(), k))?;
        let max = logits.max_keepdim(D::Minus1)?.detach();
        let shifted = logits.broadcast_sub(&max)?;
        let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
        let log_probs = shifted.broadcast_sub(&lse)?;
        let targets = Tensor::from_vec(targets, (log_probs.dim(0)?, 1), &Device::Cpu)?;
        Ok(log_probs.gather(&targets, 1)?.neg()?.mean_all()?)
    }

    pub fn loss_value(&self, batch: &[&TokenSequence]) -> Result<f64> {
        Ok(self.loss(batch)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    /// Trains on `pairs` for `steps` AdamW steps; returns the loss per step.
    pub fn train(&mut self, pairs: &[TokenSequence], steps: usize, learning_rate: f64, batch_size: usize) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(Error::invalid("no token pairs to train the prior on"));
        }
        for p in pairs {
            self.check_sequence(p)?;
        }
        let mut opt = AdamW::new(
            self.params.vars(),
            ParamsAdamW {
                lr: learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1));
        let mut history = Vec::with_capacity(steps);
        for step in 0..steps {
            let batch: Vec<&TokenSequence> = if pairs.len() <= batch_size {
                pairs.iter().collect()
            } else {
                (0..batch_size).map(|_| &pairs[rng.random_range(0..pairs.len())]).collect()
            };
            let loss = self.loss(&batch)?;
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("prior loss at step {step}")));
            }
            opt.backward_step(&loss)?;
            history.push(v);
            if step % 50 == 0 {
                log::debug!("prior step {step}: loss {v:.4}");
            }
        }
        Ok(history)
    }

    fn step(&self, id: u32, pos: usize, caches: &mut [Cache]) -> Result<Tensor> {
        let w = self.config.width;
        let tok = self.tokens.get(id as usize)?;
        let mut x = (tok + self.position(pos)?)?.reshape((1, 1, w))?;
        for (b, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            let h = b.ln1.forward(&x)?;
            let q = self.heads(&b.query.forward(&h)?)?;
            let k = self.heads(&b.key.forward(&h)?)?;
            let v = self.heads(&b.value.forward(&h)?)?;
            let keys = match cache.keys.take() {
                Some(prev) => Tensor::cat(&[&prev, &k], 2)?,
                None => k,
            };
            let values = match cache.values.take() {
                Some(prev) => Tensor::cat(&[&prev, &v], 2)?,
                None => v,
            };
            let a = self.merge(&self.attend(&q, &keys, &values, None)?)?;
            cache.keys = Some(keys);
            cache.values = Some(values);
            x = (x + b.out.forward(&a)?)?;
            let h = b.ln2.forward(&x)?;
            x = (x + b.proj.forward(&b.fc.forward(&h)?.gelu()?)?)?;
        }
        Ok(self.head.forward(&self.ln_f.forward(&x)?)?.flatten_all()?)
    }

    /// Generates a bottom grid for `top` in raster order with a KV cache.
    pub fn sample(&self, top: &TokenGrid, sampling: Sampling, seed: u64) -> Result<TokenGrid> {
        self.check_top(top)?;
        if let Sampling::Temperature { temperature, top_k } = sampling {
            if !(temperature > 0.0) || top_k == Some(0) {
                return Err(Error::invalid("temperature must be positive and top_k non-zero"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut caches: Vec<Cache> = (0..self.blocks.len())
            .map(|_| Cache {
                keys: None,
                values: None,
            })
            .collect();
        let mut pos = 0;
        self.step(BOS, pos, &mut caches)?;
        for &t in &top.tokens {
            pos += 1;
            self.step(self.top_id(t), pos, &mut caches)?;
        }
        pos += 1;
        let mut logits = self.step(SEP, pos, &mut caches)?;
        let n = self.config.bottom_len();
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let l = logits.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let t = pick(&l, sampling, &mut rng);
            out.push(t);
            if j + 1 < n {
                pos += 1;
                logits = self.step(self.bottom_id(t), pos, &mut caches)?;
            }
        }
        TokenGrid::new(self.config.bottom_dims.0, self.config.bottom_dims.1, out)
    }
}

fn pick<R: Rng>(logits: &[f32], sampling: Sampling, rng: &mut R) -> u32 {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best as u32
        }
        Sampling::Temperature { temperature, top_k } => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            order.truncate(top_k.unwrap_or(logits.len()).min(logits.len()));
            let max = logits[order[0]] as f64;
            let weights: Vec<f64> = order
                .iter()
                .map(|&i| ((logits[i] as f64 - max) / temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (&i, w) in order.iter().zip(&weights) {
                if u < *w {
                    return i as u32;
                }
                u -= w;
            }
            *order.last().expect("non-empty") as u32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PriorConfig {
        PriorConfig {
            layers: 1,
            width: 16,
            heads: 2,
            top_codes: 5,
            bottom_codes: 7,
            top_dims: (2, 2),
            bottom_dims: (4, 4),
            seed: 3,
        }
    }

    fn seq(seed: u64, c: &PriorConfig) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = (0..c.top_len()).map(|_| rng.random_range(0..c.top_codes as u32)).collect();
        let bottom = (0..c.bottom_len()).map(|_| rng.random_range(0..c.bottom_codes as u32)).collect();
        TokenSequence {
            top: TokenGrid::new(c.top_dims.0, c.top_dims.1, top).unwrap(),
            bottom: TokenGrid::new(c.bottom_dims.0, c.bottom_dims.1, bottom).unwrap(),
        }
    }

    #[test]
    fn vocabulary_and_context() {
        let c = cfg();
        assert_eq!(c.vocab(), 14);
        assert_eq!(c.max_context(), 22);
        assert_eq!(PriorConfig::parse(&c.to_text()).unwrap(), c);
        let mut bad = c.clone();
        bad.heads = 3;
        assert!(Prior::new(bad).is_err());
    }

    #[test]
    fn initial_loss_near_uniform() {
        let c = cfg();
        let p = Prior::new(c.clone()).unwrap();
        let s: Vec<TokenSequence> = (0..8).map(|i| seq(i, &c)).collect();
        let refs: Vec<&TokenSequence> = s.iter().collect();
        let loss = p.loss_value(&refs).unwrap();
        let expect = (c.bottom_codes as f64).ln();
        assert!((loss - expect).abs() < 0.1 * expect, "{loss} vs {expect}");
    }

    #[test]
    fn sampling_shape_and_closure() {
        let c = cfg();
        let p = Prior::new(c.clone()).unwrap();
        let s = seq(1, &c);
        let a = p.sample(&s.top, Sampling::Greedy, 0).unwrap();
        let b = p.sample(&s.top, Sampling::Greedy, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.rows, a.cols), (4, 4));
        let t = Sampling::Temperature { temperature: 2.0, top_k: Some(3) };
        let x = p.sample(&s.top, t, 5).unwrap();
        assert_eq!(x, p.sample(&s.top, t, 5).unwrap());
        assert!(x.tokens.iter().all(|&v| (v as usize) < c.bottom_codes));
        let wrong = TokenGrid::new(1, 4, vec![0; 4]).unwrap();
        assert!(p.sample(&wrong, Sampling::Greedy, 0).is_err());
    }

    #[test]
    fn cached_greedy_matches_teacher_forcing() {
        let c = cfg();
        let p = Prior::new(c.clone()).unwrap();
        let s = seq(4, &c);
        let bottom = p.sample(&s.top, Sampling::Greedy, 0).unwrap();
        let forced = p
            .bottom_logits(&TokenSequence {
                top: s.top.clone(),
                bottom: bottom.clone(),
            })
            .unwrap();
        let argmax: Vec<u32> = forced.iter().map(|l| pick(l, Sampling::Greedy, &mut rand::rng())).collect();
        assert_eq!(argmax, bottom.tokens);
    }
}
