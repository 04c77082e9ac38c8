//! Codec models: the learned VQ autoencoder and a parameter-free block-mean
//! reference codec that shares the container and decode machinery.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autonets::{Encoder, FusionDecoder, LatentPair, TopDecoder};
use crate::config::{ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pixeldata::Raster;
use crate::quantizer::{quantize, Codebook, QuantResult};
use crate::tokenstream::{EmbeddingGrid, TokenGrid};

/// One compression point: encoder, codebook and (for container levels) a
/// top-only decoder.
pub struct Level {
    pub stages: u8,
    pub encoder: Encoder,
    pub decoder: Option<TopDecoder>,
    pub codebook: Codebook,
}

/// Quantization of a `(N, D, h, w)` feature map against a codebook.
pub struct QuantizedMap {
    pub result: QuantResult,
    /// Quantized features, same layout as the input, without gradient.
    pub quantized: Tensor,
    /// Features flattened to `(N * h * w) x D` rows, for EMA updates.
    pub flat: Vec<f32>,
}

/// Nearest-code quantization of an NCHW feature map. Tokens come out in
/// `(n, row, col)` order.
pub fn quantize_map(z: &Tensor, codebook: &Codebook) -> Result<QuantizedMap> {
    let (n, d, h, w) = z.dims4()?;
    if d != codebook.dim() {
        return Err(Error::shape(format!("features have {d} channels, codebook dim {}", codebook.dim())));
    }
    let flat = z
        .detach()
        .permute((0, 2, 3, 1))?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let result = quantize(&flat, d, codebook)?;
    let quantized = Tensor::from_slice(&result.quantized, (n, h, w, d), z.device())?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(z.dtype())?;
    Ok(QuantizedMap {
        result,
        quantized,
        flat,
    })
}

fn grid_to_tensor(grid: &EmbeddingGrid, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(&grid.data, (1, grid.rows, grid.cols, grid.dim), &Device::Cpu)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

fn split_tokens(indices: &[u32], n: usize, rows: usize, cols: usize) -> Result<Vec<TokenGrid>> {
    indices
        .chunks(rows * cols)
        .take(n)
        .map(|c| TokenGrid::new(rows, cols, c.to_vec()))
        .collect()
}

pub struct VqModel {
    params: ParamStore,
    levels: Vec<Level>,
    pair: Option<(u8, u8)>,
    pair_bottom: Option<Level>,
    fusion: Option<FusionDecoder>,
}

impl VqModel {
    /// Freshly initialized model; parameters and codebooks derive from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(DType::F32, config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
        let codebook = |rng: &mut ChaCha8Rng| {
            Codebook::random(config.codebook_size, config.embed_dim, config.ema_decay, config.ema_epsilon, rng)
        };
        let mut levels = Vec::new();
        for &s in &config.levels {
            let cfg = config.encoder_config(s);
            levels.push(Level {
                stages: s,
                encoder: Encoder::new(&mut params, &format!("level{s}.enc"), cfg)?,
                decoder: Some(TopDecoder::new(&mut params, &format!("level{s}.dec"), cfg)?),
                codebook: codebook(&mut rng)?,
            });
        }
        let (pair_bottom, fusion) = match config.pair {
            Some((top, bottom)) => {
                let bcfg = config.encoder_config(bottom);
                let level = Level {
                    stages: bottom,
                    encoder: Encoder::new(&mut params, "pair.enc", bcfg)?,
                    decoder: None,
                    codebook: codebook(&mut rng)?,
                };
                let fusion = FusionDecoder::new(&mut params, "pair.fusion", config.encoder_config(top), bcfg)?;
                (Some(level), Some(fusion))
            }
            None => (None, None),
        };
        Ok(Self {
            params,
            levels,
            pair: config.pair,
            pair_bottom,
            fusion,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Level] {
        &mut self.levels
    }

    pub fn level(&self, stages: u8) -> Result<&Level> {
        self.levels
            .iter()
            .find(|l| l.stages == stages)
            .ok_or_else(|| Error::invalid(format!("model has no d_s={stages} level")))
    }

    pub fn pair(&self) -> Option<(u8, u8)> {
        self.pair
    }

    pub fn pair_bottom(&self) -> Option<&Level> {
        self.pair_bottom.as_ref()
    }

    pub fn pair_bottom_mut(&mut self) -> Option<&mut Level> {
        self.pair_bottom.as_mut()
    }

    pub fn fusion(&self) -> Option<&FusionDecoder> {
        self.fusion.as_ref()
    }

    /// Every codebook in persistence order: container levels, then the pair bottom.
    pub fn codebooks(&self) -> Vec<(u8, &Codebook)> {
        self.levels
            .iter()
            .chain(self.pair_bottom.iter())
            .map(|l| (l.stages, &l.codebook))
            .collect()
    }

    /// Replaces codebooks loaded from a checkpoint, in [`Self::codebooks`] order.
    pub fn set_codebooks(&mut self, books: Vec<(u8, Codebook)>) -> Result<()> {
        let slots: Vec<&mut Level> = self.levels.iter_mut().chain(self.pair_bottom.iter_mut()).collect();
        if slots.len() != books.len() {
            return Err(Error::format(format!("expected {} codebooks, found {}", slots.len(), books.len())));
        }
        for (slot, (stages, book)) in slots.into_iter().zip(books) {
            if slot.stages != stages || slot.codebook.size() != book.size() || slot.codebook.dim() != book.dim() {
                return Err(Error::format(format!("codebook for d_s={stages} does not fit the model")));
            }
            slot.codebook = book;
        }
        Ok(())
    }

    pub fn encode_tiles(&self, tiles: &Tensor, stages: u8) -> Result<Vec<TokenGrid>> {
        let level = self.level(stages)?;
        let z = level.encoder.forward(tiles)?;
        let (n, _, h, w) = z.dims4()?;
        let q = quantize_map(&z, &level.codebook)?;
        split_tokens(&q.result.indices, n, h, w)
    }

    pub fn decode_grid(&self, grid: &EmbeddingGrid, stages: u8) -> Result<Raster> {
        let level = self.level(stages)?;
        let decoder = level.decoder.as_ref().expect("container levels own a decoder");
        let x = decoder.forward(&grid_to_tensor(grid, self.params.dtype())?)?;
        Raster::from_tensor(&x)
    }

    /// Top and bottom token grids of each tile, for prior training.
    pub fn encode_pair_tiles(&self, tiles: &Tensor) -> Result<Vec<(TokenGrid, TokenGrid)>> {
        let (top, _) = self.pair.ok_or_else(|| Error::Unsupported("model has no two-level pair".into()))?;
        let tops = self.encode_tiles(tiles, top)?;
        let bottom = self.pair_bottom.as_ref().expect("pair has a bottom level");
        let z = bottom.encoder.forward(tiles)?;
        let (n, _, h, w) = z.dims4()?;
        let q = quantize_map(&z, &bottom.codebook)?;
        Ok(tops.into_iter().zip(split_tokens(&q.result.indices, n, h, w)?).collect())
    }

    /// Two-level reconstruction of one window.
    pub fn decode_pair(&self, top: &EmbeddingGrid, bottom: &EmbeddingGrid) -> Result<Raster> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::Unsupported("model has no fusion decoder".into()))?;
        let pair = LatentPair {
            top: grid_to_tensor(top, self.params.dtype())?,
            bottom: Some(grid_to_tensor(bottom, self.params.dtype())?),
        };
        Raster::from_tensor(&fusion.forward(&pair)?)
    }
}

/// Reference codec: each `2^d_s` block is replaced by its mean, quantized to
/// one of 256 evenly spaced gray levels; decoding repeats the level over the
/// block. Frames that are constant on blocks round-trip exactly.
pub struct BlockMeanCodec {
    levels: Vec<u8>,
    codebook: Codebook,
}

pub const BLOCK_MEAN_LEVELS: usize = 256;

impl BlockMeanCodec {
    pub fn new(levels: &[u8]) -> Result<Self> {
        let embeddings = (0..BLOCK_MEAN_LEVELS)
            .map(|i| (i as f64 / (BLOCK_MEAN_LEVELS - 1) as f64 - 0.5) as f32)
            .collect();
        Ok(Self {
            levels: levels.to_vec(),
            codebook: Codebook::from_embeddings(BLOCK_MEAN_LEVELS, 1, embeddings, 0.99, 1e-5)?,
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    fn check(&self, stages: u8) -> Result<()> {
        if !self.levels.contains(&stages) {
            return Err(Error::invalid(format!("model has no d_s={stages} level")));
        }
        Ok(())
    }

    pub fn encode_tiles(&self, tiles: &Tensor, stages: u8) -> Result<Vec<TokenGrid>> {
        self.check(stages)?;
        let f = 1usize << stages;
        let means = tiles.to_dtype(DType::F32)?.avg_pool2d(f)?;
        let (n, _, h, w) = means.dims4()?;
        let q = quantize(&means.flatten_all()?.to_vec1::<f32>()?, 1, &self.codebook)?;
        split_tokens(&q.indices, n, h, w)
    }

    pub fn decode_grid(&self, grid: &EmbeddingGrid, stages: u8) -> Result<Raster> {
        self.check(stages)?;
        if grid.dim != 1 {
            return Err(Error::shape("block-mean codec expects 1-d embeddings"));
        }
        let f = 1usize << stages;
        let (rows, cols) = (grid.rows * f, grid.cols * f);
        let data = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| grid.data[(r / f) * grid.cols + c / f]))
            .collect();
        Raster::new(rows, cols, data)
    }
}

pub enum Model {
    Vq(VqModel),
    BlockMean(BlockMeanCodec),
}

impl Model {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config.model_kind {
            ModelKind::Vq => Model::Vq(VqModel::new(config)?),
            ModelKind::BlockMean => Model::BlockMean(BlockMeanCodec::new(&config.levels)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Vq(_) => ModelKind::Vq,
            Model::BlockMean(_) => ModelKind::BlockMean,
        }
    }

    pub fn container_levels(&self) -> Vec<u8> {
        match self {
            Model::Vq(m) => m.levels.iter().map(|l| l.stages).collect(),
            Model::BlockMean(c) => c.levels.clone(),
        }
    }

    pub fn codebook(&self, stages: u8) -> Result<&Codebook> {
        match self {
            Model::Vq(m) => Ok(&m.level(stages)?.codebook),
            Model::BlockMean(c) => {
                c.check(stages)?;
                Ok(&c.codebook)
            }
        }
    }

    pub fn codebooks(&self) -> Vec<(u8, &Codebook)> {
        match self {
            Model::Vq(m) => m.codebooks(),
            Model::BlockMean(c) => c.levels.iter().map(|&s| (s, &c.codebook)).collect(),
        }
    }

    pub fn pair(&self) -> Option<(u8, u8)> {
        match self {
            Model::Vq(m) => m.pair,
            Model::BlockMean(_) => None,
        }
    }

    pub fn encode_tiles(&self, tiles: &Tensor, stages: u8) -> Result<Vec<TokenGrid>> {
        match self {
            Model::Vq(m) => m.encode_tiles(tiles, stages),
            Model::BlockMean(c) => c.encode_tiles(tiles, stages),
        }
    }

    pub fn decode_grid(&self, grid: &EmbeddingGrid, stages: u8) -> Result<Raster> {
        match self {
            Model::Vq(m) => m.decode_grid(grid, stages),
            Model::BlockMean(c) => c.decode_grid(grid, stages),
        }
    }

    pub fn as_vq(&self) -> Option<&VqModel> {
        match self {
            Model::Vq(m) => Some(m),
            Model::BlockMean(_) => None,
        }
    }
}

/// SHA-256 over the canonical config text and every codebook's bytes.
pub fn config_digest(config: &TrainConfig, codebooks: &[(u8, &Codebook)]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config.to_text().as_bytes());
    for (stages, cb) in codebooks {
        h.update([*stages]);
        for v in cb.embeddings().iter().chain(cb.ema_counts()).chain(cb.ema_sums()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(levels: &[u8], pair: Option<(u8, u8)>) -> TrainConfig {
        TrainConfig {
            levels: levels.to_vec(),
            pair,
            hidden_width: 4,
            embed_dim: 3,
            codebook_size: 8,
            residual_blocks: 1,
            tile_size: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn vq_token_grid_shapes() {
        let m = VqModel::new(&tiny(&[2, 3], Some((3, 1)))).unwrap();
        let x = Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let g = m.encode_tiles(&x, 2).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].rows, g[0].cols), (8, 8));
        assert!(m.encode_tiles(&x, 4).is_err());
        let pairs = m.encode_pair_tiles(&x).unwrap();
        assert_eq!((pairs[0].0.rows, pairs[0].1.rows), (4, 16));
        let top = EmbeddingGrid::from_tokens(&pairs[0].0, &m.level(3).unwrap().codebook).unwrap();
        let bottom = EmbeddingGrid::from_tokens(&pairs[0].1, &m.pair_bottom().unwrap().codebook).unwrap();
        let r = m.decode_pair(&top, &bottom).unwrap();
        assert_eq!(r.dims(), (32, 32));
        assert_eq!(m.decode_grid(&top, 3).unwrap().dims(), (32, 32));
    }

    #[test]
    fn same_seed_same_model() {
        let c = tiny(&[2], None);
        let a = VqModel::new(&c).unwrap();
        let b = VqModel::new(&c).unwrap();
        assert_eq!(a.params().export().unwrap(), b.params().export().unwrap());
        assert_eq!(config_digest(&c, &a.codebooks()), config_digest(&c, &b.codebooks()));
        let mut c2 = c.clone();
        c2.learning_rate = 1e-3;
        assert_ne!(config_digest(&c, &a.codebooks()), config_digest(&c2, &a.codebooks()));
    }

    #[test]
    fn block_mean_exact_on_blocky_input() {
        let codec = BlockMeanCodec::new(&[2]).unwrap();
        let px: Vec<u8> = (0..64).map(|i| ((i / 4 % 2) * 40 + (i / 32) * 100) as u8).collect();
        let frame = crate::pixeldata::Frame::from_gray8(8, 8, &px).unwrap();
        let t = frame.values().to_tensor(DType::F32, &Device::Cpu).unwrap();
        let g = codec.encode_tiles(&t, 2).unwrap();
        let emb = EmbeddingGrid::from_tokens(&g[0], codec.codebook()).unwrap();
        let r = codec.decode_grid(&emb, 2).unwrap();
        assert_eq!(&r, frame.values());
    }
}
