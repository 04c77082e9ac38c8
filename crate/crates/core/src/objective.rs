//! Reconstruction objective and fidelity metrics.
//!
//! Every tensor function takes `(N, 1, H, W)` images in the normalized
//! `[-0.5, 0.5]` domain and works in the dtype of its inputs, so gradients can
//! be checked in f64. SSIM-family metrics shift inputs to `[0, 1]` first.

use std::sync::Once;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::pixeldata::Raster;

/// Standard five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Floor applied to per-scale contrast terms in the training loss so the
/// fractional powers stay differentiable.
const LOSS_SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_ms: f64,
    pub gamma_grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_ms: 0.5,
            gamma_grad: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta_ms, self.gamma_grad].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub scale_weights: Vec<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            scale_weights: MS_SSIM_WEIGHTS.to_vec(),
        }
    }
}

impl SsimConfig {
    pub fn with_window(window: usize, sigma: f64) -> Self {
        Self {
            window,
            sigma,
            ..Self::default()
        }
    }

    /// Number of scales usable on images whose shorter side is `min_side`.
    pub fn usable_scales(&self, min_side: usize) -> Result<usize> {
        if min_side < self.window {
            return Err(Error::shape(format!(
                "image side {min_side} smaller than the {} px SSIM window",
                self.window
            )));
        }
        let mut scales = 1;
        while scales < self.scale_weights.len() && min_side >= (1 << scales) * self.window {
            scales += 1;
        }
        Ok(scales)
    }
}

/// Normalized 1-D Gaussian taps centred on `window / 2`.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let centre = (window / 2) as f64;
    let taps: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - centre;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize)> {
    if x.dims() != y.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    let (n, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("expected single-channel images, got {c} channels")));
    }
    Ok((n, h, w))
}

/// Separable valid-mode Gaussian filter.
fn blur(x: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let dev = x.device();
    let k = Tensor::from_vec(taps, cfg.window, dev)?.to_dtype(x.dtype())?;
    let kv = k.reshape((1, 1, cfg.window, 1))?;
    let kh = k.reshape((1, 1, 1, cfg.window))?;
    Ok(x.conv2d(&kv, 0, 1, 1, 1)?.conv2d(&kh, 0, 1, 1, 1)?)
}

/// Sum divided by the count, so a map of ones averages to exactly one.
fn per_image_mean(t: &Tensor) -> Result<Tensor> {
    let flat = t.flatten_from(1)?;
    let n = Tensor::new(flat.dim(1)? as f64, t.device())?.to_dtype(t.dtype())?;
    Ok(flat.sum(1)?.broadcast_div(&n)?)
}

/// Per-image `(ssim, contrast-structure)` means of two `[0, 1]` images.
fn ssim_and_cs(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<(Tensor, Tensor)> {
    let c1 = (cfg.k1 * 1.0).powi(2);
    let c2 = (cfg.k2 * 1.0).powi(2);
    let mu_x = blur(x, cfg)?;
    let mu_y = blur(y, cfg)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let s_xx = (blur(&x.sqr()?, cfg)? - &mu_xx)?;
    let s_yy = (blur(&y.sqr()?, cfg)? - &mu_yy)?;
    let s_xy = (blur(&(x * y)?, cfg)? - &mu_xy)?;
    let cs_map = ((s_xy * 2.0)? + c2)?.div(&((s_xx + s_yy)? + c2)?)?;
    let lum = ((mu_xy * 2.0)? + c1)?.div(&((mu_xx + mu_yy)? + c1)?)?;
    let ssim_map = (lum * &cs_map)?;
    Ok((per_image_mean(&ssim_map)?, per_image_mean(&cs_map)?))
}

/// Single-scale SSIM (batch mean) with a Gaussian window.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    let (_, h, w) = check_pair(x, y)?;
    cfg.usable_scales(h.min(w))?;
    let (s, _) = ssim_and_cs(&(x + 0.5)?, &(y + 0.5)?, cfg)?;
    Ok(s.mean_all()?)
}

/// 2x average pooling; an odd side gets one leading zero row/column first.
fn downsample(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut t = x.clone();
    if h % 2 == 1 {
        t = t.pad_with_zeros(2, 1, 0)?;
    }
    if w % 2 == 1 {
        t = t.pad_with_zeros(3, 1, 0)?;
    }
    Ok(t.avg_pool2d(2)?)
}

static SCALE_WARNING: Once = Once::new();

fn ms_ssim_impl(x: &Tensor, y: &Tensor, cfg: &SsimConfig, floor: Option<f64>) -> Result<Tensor> {
    let (_, h, w) = check_pair(x, y)?;
    let scales = cfg.usable_scales(h.min(w))?;
    let weights: Vec<f64> = if scales < cfg.scale_weights.len() {
        SCALE_WARNING.call_once(|| {
            log::warn!(
                "{}x{} images too small for {} MS-SSIM scales, using {scales}",
                h,
                w,
                cfg.scale_weights.len()
            )
        });
        let sum: f64 = cfg.scale_weights[..scales].iter().sum();
        cfg.scale_weights[..scales].iter().map(|v| v / sum).collect()
    } else {
        cfg.scale_weights.clone()
    };
    let clip = |t: Tensor| -> Result<Tensor> {
        Ok(match floor {
            Some(f) => t.maximum(f)?,
            None => t.relu()?,
        })
    };
    let mut a = (x + 0.5)?;
    let mut b = (y + 0.5)?;
    let mut product: Option<Tensor> = None;
    for (i, weight) in weights.iter().enumerate() {
        let (s, cs) = ssim_and_cs(&a, &b, cfg)?;
        let term = if i + 1 == scales { clip(s)? } else { clip(cs)? };
        let term = term.powf(*weight)?;
        product = Some(match product {
            None => term,
            Some(p) => (p * term)?,
        });
        if i + 1 < scales {
            a = downsample(&a)?;
            b = downsample(&b)?;
        }
    }
    Ok(product.expect("at least one scale").mean_all()?)
}

/// Multi-scale SSIM (batch mean). Scales are dropped, with a one-time warning,
/// when the images are too small for the configured count.
pub fn ms_ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    ms_ssim_impl(x, y, cfg, None)
}

/// `mean |x - y|`.
pub fn l1(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pair(x, y)?;
    Ok(x.sub(y)?.abs()?.mean_all()?)
}

/// Mean absolute difference of forward-difference gradients, summed over the
/// two axes. Replicate padding makes the last difference on each axis zero.
pub fn grad_l1(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, h, w) = check_pair(x, y)?;
    let count = (n * h * w) as f64;
    let d = x.sub(y)?;
    let mut total = d.zeros_like()?.sum_all()?;
    if w > 1 {
        let dx = (d.narrow(3, 1, w - 1)? - d.narrow(3, 0, w - 1)?)?;
        total = (total + dx.abs()?.sum_all()?)?;
    }
    if h > 1 {
        let dy = (d.narrow(2, 1, h - 1)? - d.narrow(2, 0, h - 1)?)?;
        total = (total + dy.abs()?.sum_all()?)?;
    }
    Ok((total / count)?)
}

/// The three reconstruction terms before weighting.
#[derive(Clone, Debug)]
pub struct RecTerms {
    pub l1: Tensor,
    /// `1 - MS-SSIM`.
    pub ms_ssim_term: Tensor,
    pub grad_l1: Tensor,
}

impl RecTerms {
    pub fn compute(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Self> {
        Ok(Self {
            l1: l1(x, y)?,
            ms_ssim_term: ms_ssim_impl(x, y, cfg, Some(LOSS_SCALE_FLOOR))?.affine(-1.0, 1.0)?,
            grad_l1: grad_l1(x, y)?,
        })
    }

    pub fn weighted(&self, w: &LossWeights) -> Result<Tensor> {
        Ok(((&self.l1 * w.alpha)? + (&self.ms_ssim_term * w.beta_ms)?)?.add(&(&self.grad_l1 * w.gamma_grad)?)?)
    }
}

/// `alpha |x - x̂|_1 + beta (1 - MS-SSIM) + gamma |grad x - grad x̂|_1`.
pub fn rec_loss(x: &Tensor, y: &Tensor, weights: &LossWeights, cfg: &SsimConfig) -> Result<Tensor> {
    weights.validate()?;
    RecTerms::compute(x, y, cfg)?.weighted(weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelRole {
    Top,
    Bottom,
}

/// One level's commitment loss and its weight.
#[derive(Clone, Debug)]
pub struct Commitment {
    pub role: LevelRole,
    pub loss: Tensor,
    pub lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rec_l1: f64,
    pub ms_ssim_term: f64,
    pub grad_l1: f64,
    /// Weighted reconstruction loss.
    pub rec_loss: f64,
    pub commitment_top: f64,
    pub commitment_bottom: Option<f64>,
    pub total: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Combines reconstruction terms (summed over every reconstruction) with the
/// weighted commitment losses. Returns the differentiable total and its report.
pub fn combine(
    recs: &[RecTerms],
    commitments: &[Commitment],
    weights: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    if recs.is_empty() {
        return Err(Error::invalid("no reconstruction terms"));
    }
    if commitments.iter().any(|c| !(c.lambda >= 0.0)) {
        return Err(Error::invalid("commitment weights must be non-negative"));
    }
    let mut report = LossReport::default();
    let mut total: Option<Tensor> = None;
    for r in recs {
        report.rec_l1 += scalar(&r.l1)?;
        report.ms_ssim_term += scalar(&r.ms_ssim_term)?;
        report.grad_l1 += scalar(&r.grad_l1)?;
        let w = r.weighted(weights)?;
        report.rec_loss += scalar(&w)?;
        total = Some(match total {
            None => w,
            Some(t) => (t + w)?,
        });
    }
    let mut total = total.expect("non-empty");
    for c in commitments {
        let v = scalar(&c.loss)?;
        match c.role {
            LevelRole::Top => report.commitment_top += v,
            LevelRole::Bottom => *report.commitment_bottom.get_or_insert(0.0) += v,
        }
        total = (total + (&c.loss * c.lambda)?)?;
    }
    report.total = scalar(&total)?;
    Ok((total, report))
}

/// Total objective for one reconstruction.
pub fn total_loss(
    x: &Tensor,
    y: &Tensor,
    commitments: &[Commitment],
    weights: &LossWeights,
    cfg: &SsimConfig,
) -> Result<LossReport> {
    let terms = RecTerms::compute(x, y, cfg)?;
    Ok(combine(&[terms], commitments, weights)?.1)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    check_pair(x, y)?;
    let mse = scalar(&x.sub(y)?.to_dtype(DType::F64)?.sqr()?.mean_all()?)?;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn raster_pair(a: &Raster, b: &Raster) -> Result<(Tensor, Tensor)> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let dev = candle_core::Device::Cpu;
    Ok((a.to_tensor(DType::F32, &dev)?, b.to_tensor(DType::F32, &dev)?))
}

pub fn ssim_raster(a: &Raster, b: &Raster, cfg: &SsimConfig) -> Result<f64> {
    let (x, y) = raster_pair(a, b)?;
    scalar(&ssim(&x, &y, cfg)?)
}

pub fn ms_ssim_raster(a: &Raster, b: &Raster, cfg: &SsimConfig) -> Result<f64> {
    let (x, y) = raster_pair(a, b)?;
    scalar(&ms_ssim(&x, &y, cfg)?)
}

pub fn psnr_raster(a: &Raster, b: &Raster, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| {
            let d = *p as f64 - *q as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(psnr_from_mse(mse, peak))
}
