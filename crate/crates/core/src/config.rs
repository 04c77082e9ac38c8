//! Flat `key=value` training configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autonets::EncoderConfig;
use crate::error::{Error, Result};
use crate::objective::{LossWeights, SsimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Learned VQ autoencoder.
    Vq,
    /// Parameter-free reference codec: block means quantized to 256 gray levels.
    BlockMean,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Vq => "vq",
            ModelKind::BlockMean => "block_mean",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vq" => Ok(ModelKind::Vq),
            "block_mean" => Ok(ModelKind::BlockMean),
            other => Err(Error::invalid(format!("unknown model_kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSettings {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 256,
            heads: 8,
            steps: 300,
            learning_rate: 1e-3,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    /// Compression points (`d_s`) that get their own encoder, codebook and
    /// top-only decoder.
    pub levels: Vec<u8>,
    /// Optional `(top, bottom)` stage pair trained with the fusion decoder.
    pub pair: Option<(u8, u8)>,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub codebook_size: usize,
    pub residual_blocks: usize,
    pub tile_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub loss: LossWeights,
    pub lambda_top: f64,
    pub lambda_bottom: f64,
    pub ema_decay: f32,
    pub ema_epsilon: f32,
    pub restart_dead_codes: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Epochs during which only the top level of the pair is trained.
    pub freeze_top_epochs: usize,
    pub prior: PriorSettings,
    /// Fault injection: replace the loss at this step with NaN.
    pub inject_nan_at_step: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Vq,
            levels: vec![2],
            pair: None,
            hidden_width: 64,
            embed_dim: 64,
            codebook_size: 256,
            residual_blocks: 2,
            tile_size: 64,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            batch_size: 2,
            epochs: 100,
            max_steps: 0,
            loss: LossWeights::default(),
            lambda_top: 0.25,
            lambda_bottom: 0.25,
            ema_decay: crate::quantizer::DEFAULT_EMA_DECAY,
            ema_epsilon: crate::quantizer::DEFAULT_EMA_EPSILON,
            restart_dead_codes: false,
            grad_clip: 1.0,
            holdout_fraction: 0.1,
            seed: 0,
            deterministic: true,
            ssim_window: 11,
            ssim_sigma: 1.5,
            freeze_top_epochs: 0,
            prior: PriorSettings::default(),
            inject_nan_at_step: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::invalid(format!("config key {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("config key {key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value", lineno + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model_kind" => self.model_kind = v.parse()?,
            "levels" => {
                self.levels = v
                    .split(',')
                    .map(|s| parse::<u8>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "pair" => {
                self.pair = if v == "none" {
                    None
                } else {
                    let (t, b) = v
                        .split_once(',')
                        .ok_or_else(|| Error::invalid("config key pair: expected `top,bottom` or `none`"))?;
                    Some((parse(key, t.trim())?, parse(key, b.trim())?))
                }
            }
            "hidden_width" => self.hidden_width = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "codebook_size" => self.codebook_size = parse(key, v)?,
            "residual_blocks" => self.residual_blocks = parse(key, v)?,
            "tile_size" => self.tile_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "loss_alpha" => self.loss.alpha = parse(key, v)?,
            "loss_beta_ms" => self.loss.beta_ms = parse(key, v)?,
            "loss_gamma_grad" => self.loss.gamma_grad = parse(key, v)?,
            "lambda_top" => self.lambda_top = parse(key, v)?,
            "lambda_bottom" => self.lambda_bottom = parse(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "ema_epsilon" => self.ema_epsilon = parse(key, v)?,
            "restart_dead_codes" => self.restart_dead_codes = parse_bool(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "ssim_window" => self.ssim_window = parse(key, v)?,
            "ssim_sigma" => self.ssim_sigma = parse(key, v)?,
            "freeze_top_epochs" => self.freeze_top_epochs = parse(key, v)?,
            "prior_layers" => self.prior.layers = parse(key, v)?,
            "prior_width" => self.prior.width = parse(key, v)?,
            "prior_heads" => self.prior.heads = parse(key, v)?,
            "prior_steps" => self.prior.steps = parse(key, v)?,
            "prior_learning_rate" => self.prior.learning_rate = parse(key, v)?,
            "prior_batch_size" => self.prior.batch_size = parse(key, v)?,
            "inject_nan_at_step" => {
                self.inject_nan_at_step = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config, and equal
    /// configs always serialize to the same bytes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("model_kind", self.model_kind.as_str().into());
        kv(
            "levels",
            self.levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        );
        kv(
            "pair",
            self.pair.map_or("none".into(), |(t, b)| format!("{t},{b}")),
        );
        kv("hidden_width", self.hidden_width.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("codebook_size", self.codebook_size.to_string());
        kv("residual_blocks", self.residual_blocks.to_string());
        kv("tile_size", self.tile_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("loss_alpha", self.loss.alpha.to_string());
        kv("loss_beta_ms", self.loss.beta_ms.to_string());
        kv("loss_gamma_grad", self.loss.gamma_grad.to_string());
        kv("lambda_top", self.lambda_top.to_string());
        kv("lambda_bottom", self.lambda_bottom.to_string());
        kv("ema_decay", self.ema_decay.to_string());
        kv("ema_epsilon", self.ema_epsilon.to_string());
        kv("restart_dead_codes", self.restart_dead_codes.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("holdout_fraction", self.holdout_fraction.to_string());
        kv("seed", self.seed.to_string());
        kv("deterministic", self.deterministic.to_string());
        kv("ssim_window", self.ssim_window.to_string());
        kv("ssim_sigma", self.ssim_sigma.to_string());
        kv("freeze_top_epochs", self.freeze_top_epochs.to_string());
        kv("prior_layers", self.prior.layers.to_string());
        kv("prior_width", self.prior.width.to_string());
        kv("prior_heads", self.prior.heads.to_string());
        kv("prior_steps", self.prior.steps.to_string());
        kv("prior_learning_rate", self.prior.learning_rate.to_string());
        kv("prior_batch_size", self.prior.batch_size.to_string());
        kv(
            "inject_nan_at_step",
            self.inject_nan_at_step.map_or("none".into(), |s| s.to_string()),
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("levels must be non-empty"));
        }
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.levels {
            return Err(Error::invalid("levels must be strictly increasing"));
        }
        if let Some(&bad) = self.levels.iter().find(|l| !(2..=5).contains(*l)) {
            return Err(Error::invalid(format!("level d_s={bad} outside 2..=5")));
        }
        if let Some((top, bottom)) = self.pair {
            if !self.levels.contains(&top) {
                return Err(Error::invalid(format!("pair top d_s={top} is not a configured level")));
            }
            if bottom == 0 || bottom >= top {
                return Err(Error::invalid("pair bottom d_s must be in 1..top"));
            }
        }
        let positive = [
            ("hidden_width", self.hidden_width),
            ("embed_dim", self.embed_dim),
            ("tile_size", self.tile_size),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("ssim_window", self.ssim_window),
            ("prior_layers", self.prior.layers),
            ("prior_width", self.prior.width),
            ("prior_heads", self.prior.heads),
            ("prior_batch_size", self.prior.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{k} must be positive")));
        }
        if !(2..=65536).contains(&self.codebook_size) {
            return Err(Error::invalid("codebook_size must be in 2..=65536"));
        }
        if self.embed_dim > u16::MAX as usize {
            return Err(Error::invalid("embed_dim must fit in 16 bits"));
        }
        let max_factor = 1usize << self.max_stage();
        if self.tile_size % max_factor != 0 {
            return Err(Error::invalid(format!(
                "tile_size {} not divisible by 2^{} = {max_factor}",
                self.tile_size,
                self.max_stage()
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.prior.learning_rate > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("weight_decay and grad_clip must be non-negative"));
        }
        if !(self.lambda_top >= 0.0) || !(self.lambda_bottom >= 0.0) {
            return Err(Error::invalid("commitment weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.ema_epsilon > 0.0) {
            return Err(Error::invalid("ema_decay must be in [0, 1) and ema_epsilon positive"));
        }
        if self.prior.width % self.prior.heads != 0 {
            return Err(Error::invalid("prior_width must be divisible by prior_heads"));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::invalid("ssim_sigma must be positive"));
        }
        self.loss.validate()
    }

    pub fn max_stage(&self) -> u8 {
        *self.levels.iter().max().expect("levels validated non-empty")
    }

    pub fn encoder_config(&self, stages: u8) -> EncoderConfig {
        EncoderConfig {
            downsample_stages: stages,
            hidden_width: self.hidden_width,
            embed_dim: self.embed_dim,
            residual_blocks: self.residual_blocks,
        }
    }

    pub fn ssim_config(&self) -> SsimConfig {
        SsimConfig::with_window(self.ssim_window, self.ssim_sigma)
    }
}
