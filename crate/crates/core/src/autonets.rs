//! Encoder pyramid, top-only decoder and the FiLM fusion decoder.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ParamStore, ResBlock};

/// Shape of one latent level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Number of stride-2 stages; the latent grid is `2^stages` times coarser.
    pub downsample_stages: u8,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub residual_blocks: usize,
}

impl EncoderConfig {
    pub fn new(downsample_stages: u8, hidden_width: usize, embed_dim: usize) -> Self {
        Self {
            downsample_stages,
            hidden_width,
            embed_dim,
            residual_blocks: 2,
        }
    }

    /// Stage counts 1..=5 are accepted; 1 only makes sense for the bottom
    /// level of a pair, which is never stored in a container.
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.downsample_stages) {
            return Err(Error::invalid(format!(
                "downsample stages {} outside 1..=5",
                self.downsample_stages
            )));
        }
        if self.hidden_width == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("hidden width and embedding dim must be positive"));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        1 << self.downsample_stages
    }
}

pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    projection: Conv2d,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let w = config.hidden_width;
        let stages = (0..config.downsample_stages as usize)
            .map(|i| {
                let c_in = if i == 0 { 1 } else { w };
                Conv2d::new(ps, &format!("{name}.down{i}"), c_in, w, 4, 2, 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..config.residual_blocks)
            .map(|i| ResBlock::new(ps, &format!("{name}.res{i}"), w))
            .collect::<Result<Vec<_>>>()?;
        let projection = Conv2d::new(ps, &format!("{name}.proj"), w, config.embed_dim, 1, 1, 0)?;
        Ok(Self {
            config,
            stages,
            blocks,
            projection,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `(N, 1, H, W)` images to `(N, D, H / 2^s, W / 2^s)` pre-quantization features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let f = self.config.factor();
        if c != 1 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "encoder with {} stages needs single-channel input with sides divisible by {f}, got {c}x{h}x{w}",
                self.config.downsample_stages
            )));
        }
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(&h)?.relu()?;
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        self.projection.forward(&h.relu()?)
    }
}

/// Input convolution, residual refinement, `stages` transposed-conv upsamplers
/// with ReLU, and a 3x3 single-channel prediction head.
struct UpsampleStack {
    input: Conv2d,
    blocks: Vec<ResBlock>,
    ups: Vec<ConvTranspose2d>,
    head: Conv2d,
}

impl UpsampleStack {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, width: usize, blocks: usize, stages: u8) -> Result<Self> {
        let input = Conv2d::new(ps, &format!("{name}.input"), c_in, width, 3, 1, 1)?;
        let blocks = (0..blocks)
            .map(|i| ResBlock::new(ps, &format!("{name}.res{i}"), width))
            .collect::<Result<Vec<_>>>()?;
        let ups = (0..stages as usize)
            .map(|i| ConvTranspose2d::new(ps, &format!("{name}.up{i}"), width, width, 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(ps, &format!("{name}.head"), width, 1, 3, 1, 1)?;
        Ok(Self {
            input,
            blocks,
            ups,
            head,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.input.forward(x)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        h = h.relu()?;
        for up in &self.ups {
            h = up.forward(&h)?.relu()?;
        }
        self.head.forward(&h)
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.abs()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Decodes a single quantized latent directly to pixels.
pub struct TopDecoder {
    stages: u8,
    stack: UpsampleStack,
}

impl TopDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            stages: config.downsample_stages,
            stack: UpsampleStack::new(
                ps,
                name,
                config.embed_dim,
                config.hidden_width,
                config.residual_blocks,
                config.downsample_stages,
            )?,
        })
    }

    pub fn stages(&self) -> u8 {
        self.stages
    }

    /// `(N, D, h, w)` latent to `(N, 1, h * 2^s, w * 2^s)` raster.
    pub fn forward(&self, latent: &Tensor) -> Result<Tensor> {
        check_finite(latent, "top latent")?;
        self.stack.forward(latent)
    }
}

/// Per-position FiLM scale offsets and shifts for the bottom latent.
#[derive(Clone, Debug)]
pub struct FilmParams {
    pub gamma_film: Tensor,
    pub beta_film: Tensor,
}

/// `h * (1 + gamma) + beta`.
pub fn film_modulate(bottom: &Tensor, film: &FilmParams) -> Result<Tensor> {
    if bottom.dims() != film.gamma_film.dims() || bottom.dims() != film.beta_film.dims() {
        return Err(Error::shape(format!(
            "FiLM params {:?}/{:?} do not match bottom latent {:?}",
            film.gamma_film.dims(),
            film.beta_film.dims(),
            bottom.dims()
        )));
    }
    Ok(bottom.mul(&(&film.gamma_film + 1.0)?)?.add(&film.beta_film)?)
}

/// Quantized latents of a two-level hierarchy.
#[derive(Clone, Debug)]
pub struct LatentPair {
    pub top: Tensor,
    pub bottom: Option<Tensor>,
}

/// Two-level decoder: the top latent is upsampled to the bottom grid, produces
/// FiLM parameters through zero-initialized 1x1 convolutions, and the modulated
/// bottom latent is concatenated with it ahead of the shared upsampling stack.
pub struct FusionDecoder {
    top_stages: u8,
    bottom_stages: u8,
    top_up: Vec<ConvTranspose2d>,
    film_gamma: Conv2d,
    film_beta: Conv2d,
    stack: UpsampleStack,
}

impl FusionDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, top: EncoderConfig, bottom: EncoderConfig) -> Result<Self> {
        top.validate()?;
        bottom.validate()?;
        if top.downsample_stages <= bottom.downsample_stages {
            return Err(Error::invalid("top level must be coarser than bottom level"));
        }
        if top.embed_dim != bottom.embed_dim {
            return Err(Error::invalid("top and bottom embedding dims must agree"));
        }
        let d = top.embed_dim;
        let gap = top.downsample_stages - bottom.downsample_stages;
        let top_up = (0..gap as usize)
            .map(|i| ConvTranspose2d::new(ps, &format!("{name}.top_up{i}"), d, d, 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let film_gamma = Conv2d::zeros_1x1(ps, &format!("{name}.film_gamma"), d, d)?;
        let film_beta = Conv2d::zeros_1x1(ps, &format!("{name}.film_beta"), d, d)?;
        let stack = UpsampleStack::new(
            ps,
            name,
            2 * d,
            bottom.hidden_width,
            bottom.residual_blocks,
            bottom.downsample_stages,
        )?;
        Ok(Self {
            top_stages: top.downsample_stages,
            bottom_stages: bottom.downsample_stages,
            top_up,
            film_gamma,
            film_beta,
            stack,
        })
    }

    pub fn stages(&self) -> (u8, u8) {
        (self.top_stages, self.bottom_stages)
    }

    pub fn upsample_top(&self, top: &Tensor) -> Result<Tensor> {
        let mut h = top.clone();
        let last = self.top_up.len().saturating_sub(1);
        for (i, up) in self.top_up.iter().enumerate() {
            h = up.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn film_params(&self, upsampled_top: &Tensor) -> Result<FilmParams> {
        Ok(FilmParams {
            gamma_film: self.film_gamma.forward(upsampled_top)?,
            beta_film: self.film_beta.forward(upsampled_top)?,
        })
    }

    pub fn forward(&self, pair: &LatentPair) -> Result<Tensor> {
        self.forward_with(pair, true)
    }

    /// With `modulate == false` the bottom latent enters the concatenation
    /// unmodulated (the FiLM ablation).
    pub fn forward_with(&self, pair: &LatentPair, modulate: bool) -> Result<Tensor> {
        let bottom = pair
            .bottom
            .as_ref()
            .ok_or_else(|| Error::invalid("two-level decoding needs a bottom latent"))?;
        let (tn, _, th, tw) = pair.top.dims4()?;
        let (bn, _, bh, bw) = bottom.dims4()?;
        let ratio = 1usize << (self.top_stages - self.bottom_stages);
        if tn != bn || bh != th * ratio || bw != tw * ratio {
            return Err(Error::shape(format!(
                "bottom grid {bh}x{bw} is not {ratio}x top grid {th}x{tw}"
            )));
        }
        check_finite(&pair.top, "top latent")?;
        check_finite(bottom, "bottom latent")?;
        let up = self.upsample_top(&pair.top)?;
        let fused = if modulate {
            film_modulate(bottom, &self.film_params(&up)?)?
        } else {
            bottom.clone()
        };
        self.stack.forward(&Tensor::cat(&[&fused, &up], 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn small(stages: u8) -> EncoderConfig {
        EncoderConfig {
            downsample_stages: stages,
            hidden_width: 4,
            embed_dim: 3,
            residual_blocks: 1,
        }
    }

    #[test]
    fn encoder_grid_shapes() {
        for (side, stages) in [(64usize, 2u8), (64, 5), (128, 3)] {
            let mut ps = ParamStore::new(DType::F32, 0);
            let enc = Encoder::new(&mut ps, "e", small(stages)).unwrap();
            let x = Tensor::zeros((1, 1, side, side), DType::F32, &Device::Cpu).unwrap();
            let z = enc.forward(&x).unwrap();
            assert_eq!(z.dims(), &[1, 3, side >> stages, side >> stages]);
        }
    }

    #[test]
    fn encoder_rejects_indivisible_side() {
        let mut ps = ParamStore::new(DType::F32, 0);
        let enc = Encoder::new(&mut ps, "e", small(3)).unwrap();
        let x = Tensor::zeros((1, 1, 60, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn stage_count_validated() {
        let mut ps = ParamStore::new(DType::F32, 0);
        assert!(Encoder::new(&mut ps, "e", small(6)).is_err());
        assert!(Encoder::new(&mut ps, "f", small(0)).is_err());
    }

    #[test]
    fn top_decoder_shape_and_determinism() {
        let mut ps = ParamStore::new(DType::F32, 3);
        let dec = TopDecoder::new(&mut ps, "d", small(2)).unwrap();
        let q = Tensor::randn(0f32, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let a = dec.forward(&q).unwrap();
        let b = dec.forward(&q).unwrap();
        assert_eq!(a.dims(), &[1, 1, 32, 32]);
        let diff = a.sub(&b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        let nan = (q.clone() * f64::NAN).unwrap();
        assert!(matches!(dec.forward(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn film_identity_and_intercept() {
        let dev = Device::Cpu;
        let h = Tensor::randn(0f32, 1.0, (1, 3, 4, 4), &dev).unwrap();
        let zero = h.zeros_like().unwrap();
        let id = FilmParams {
            gamma_film: zero.clone(),
            beta_film: zero.clone(),
        };
        let out = film_modulate(&h, &id).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap(), h.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let beta = Tensor::randn(0f32, 1.0, (1, 3, 4, 4), &dev).unwrap();
        let film = FilmParams {
            gamma_film: Tensor::randn(0f32, 1.0, (1, 3, 4, 4), &dev).unwrap(),
            beta_film: beta.clone(),
        };
        let out = film_modulate(&zero, &film).unwrap();
        let diff = out.sub(&beta).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        let bad = Tensor::zeros((1, 3, 4, 5), DType::F32, &dev).unwrap();
        assert!(film_modulate(&bad, &film).is_err());
    }

    #[test]
    fn film_is_affine() {
        let dev = Device::Cpu;
        let mk = || Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &dev).unwrap();
        let film = FilmParams {
            gamma_film: mk(),
            beta_film: mk(),
        };
        let (a, b) = (mk(), mk());
        let lhs = (film_modulate(&a, &film).unwrap() + film_modulate(&b, &film).unwrap()).unwrap();
        let lhs = lhs.sub(&film_modulate(&a.zeros_like().unwrap(), &film).unwrap()).unwrap();
        let rhs = film_modulate(&(&a + &b).unwrap(), &film).unwrap();
        let diff = lhs.sub(&rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn fusion_shapes_and_zero_film_ablation() {
        let mut ps = ParamStore::new(DType::F32, 5);
        let dec = FusionDecoder::new(&mut ps, "f", small(3), small(2)).unwrap();
        let dev = Device::Cpu;
        let pair = LatentPair {
            top: Tensor::randn(0f32, 1.0, (1, 3, 4, 4), &dev).unwrap(),
            bottom: Some(Tensor::randn(0f32, 1.0, (1, 3, 8, 8), &dev).unwrap()),
        };
        let with = dec.forward(&pair).unwrap();
        assert_eq!(with.dims(), &[1, 1, 32, 32]);
        // FiLM convolutions start at zero, so modulation is the identity.
        let without = dec.forward_with(&pair, false).unwrap();
        let diff = with.sub(&without).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);

        let missing = LatentPair {
            top: pair.top.clone(),
            bottom: None,
        };
        assert!(dec.forward(&missing).is_err());
        let wrong = LatentPair {
            top: pair.top.clone(),
            bottom: Some(Tensor::zeros((1, 3, 4, 4), DType::F32, &dev).unwrap()),
        };
        assert!(matches!(dec.forward(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_top5_bottom4_output_side() {
        let mut ps = ParamStore::new(DType::F32, 5);
        let dec = FusionDecoder::new(&mut ps, "f", small(5), small(4)).unwrap();
        let dev = Device::Cpu;
        let pair = LatentPair {
            top: Tensor::zeros((1, 3, 2, 2), DType::F32, &dev).unwrap(),
            bottom: Some(Tensor::zeros((1, 3, 4, 4), DType::F32, &dev).unwrap()),
        };
        assert_eq!(dec.forward(&pair).unwrap().dims(), &[1, 1, 64, 64]);
    }
}
