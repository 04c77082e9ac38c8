//! Autoencoder training, prior training and evaluation sweeps.

use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autonets::LatentPair;
use crate::checkpoint::{Checkpoint, EpochRecord};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{quantize_map, Model, VqModel};
use crate::nn::NamedTensor;
use crate::objective::{combine, ms_ssim_raster, psnr_raster, ssim_raster, Commitment, LevelRole, LossReport, RecTerms};
use crate::pixeldata::{load_grayscale, plan_tiles, Frame, Raster};
use crate::pipeline::{decode_top_only, encode_frame};
use crate::prior::{Prior, PriorConfig, TokenSequence};
use crate::quantizer::{perplexity, usage_histogram, Codebook};

const SMOOTHING: f64 = 0.9;

/// Image files of a dataset directory in filename order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG/TIFF frames in {}", dir.display())));
    }
    Ok(paths)
}

/// Non-overlapping tiles of one frame (the last row/column is clamped inward).
pub fn frame_tiles(frame: &Frame, tile_size: usize) -> Result<Vec<Raster>> {
    let plan = plan_tiles(frame.height(), frame.width(), tile_size, tile_size)?;
    plan.origins
        .iter()
        .map(|&(r, c)| frame.values().crop(r, c, tile_size, tile_size))
        .collect()
}

/// All tiles of a dataset directory, frames in filename order.
pub fn load_tiles(dir: &Path, tile_size: usize) -> Result<Vec<Raster>> {
    let mut tiles = Vec::new();
    for path in list_frames(dir)? {
        tiles.extend(frame_tiles(&load_grayscale(&path)?, tile_size)?);
    }
    Ok(tiles)
}

/// Number of tiles held out: the last `floor(n * fraction)`, leaving at least one.
pub fn holdout_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1))
}

fn stack(tiles: &[&Raster]) -> Result<Tensor> {
    let parts = tiles
        .iter()
        .map(|t| t.to_tensor(DType::F32, &Device::Cpu))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Quantizer state gathered in one forward pass, applied after the step.
struct LevelUpdate {
    /// Index into `VqModel::levels`, or `None` for the pair bottom.
    level: Option<usize>,
    flat: Vec<f32>,
    indices: Vec<u32>,
}

/// Which parts of a two-level model are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Joint,
    TopOnly,
    BottomOnly,
}

fn phase(config: &TrainConfig, epoch: usize) -> Phase {
    match (config.pair, config.freeze_top_epochs) {
        (Some(_), n) if n > 0 && epoch < n => Phase::TopOnly,
        (Some(_), n) if n > 0 => Phase::BottomOnly,
        _ => Phase::Joint,
    }
}

/// Forward pass of every trained path with the combined objective.
fn forward_loss(model: &VqModel, config: &TrainConfig, x: &Tensor, phase: Phase) -> Result<(Tensor, LossReport, Vec<LevelUpdate>)> {
    let ssim = config.ssim_config();
    let mut recs = Vec::new();
    let mut commitments = Vec::new();
    let mut updates = Vec::new();
    let mut pair_top = None;
    let top_stage = config.pair.map(|(t, _)| t);
    for (i, level) in model.levels().iter().enumerate() {
        let z = level.encoder.forward(x)?;
        let q = quantize_map(&z, &level.codebook)?;
        let st = crate::quantizer::straight_through(&z, &q.quantized)?;
        if phase != Phase::BottomOnly {
            let decoder = level.decoder.as_ref().expect("container levels own a decoder");
            recs.push(RecTerms::compute(&decoder.forward(&st)?, x, &ssim)?);
            commitments.push(Commitment {
                role: LevelRole::Top,
                loss: crate::quantizer::commitment_loss(&z, &q.quantized)?,
                lambda: config.lambda_top,
            });
            updates.push(LevelUpdate {
                level: Some(i),
                flat: q.flat,
                indices: q.result.indices,
            });
        }
        if Some(level.stages) == top_stage {
            pair_top = Some(if phase == Phase::BottomOnly { q.quantized } else { st });
        }
    }
    if phase != Phase::TopOnly {
        if let (Some(bottom), Some(fusion), Some(top)) = (model.pair_bottom(), model.fusion(), pair_top) {
            let z = bottom.encoder.forward(x)?;
            let q = quantize_map(&z, &bottom.codebook)?;
            let st = crate::quantizer::straight_through(&z, &q.quantized)?;
            let recon = fusion.forward(&LatentPair {
                top,
                bottom: Some(st),
            })?;
            recs.push(RecTerms::compute(&recon, x, &ssim)?);
            commitments.push(Commitment {
                role: LevelRole::Bottom,
                loss: crate::quantizer::commitment_loss(&z, &q.quantized)?,
                lambda: config.lambda_bottom,
            });
            updates.push(LevelUpdate {
                level: None,
                flat: q.flat,
                indices: q.result.indices,
            });
        }
    }
    let (total, report) = combine(&recs, &commitments, &config.loss)?;
    Ok((total, report, updates))
}

/// Loss report of a fresh forward pass, without any state change.
pub fn evaluate_loss(model: &VqModel, config: &TrainConfig, batch: &[&Raster]) -> Result<LossReport> {
    Ok(forward_loss(model, config, &stack(batch)?, phase(config, 0))?.1)
}

fn trainable_vars(model: &VqModel, config: &TrainConfig, phase: Phase) -> Vec<Var> {
    let top = config.pair.map(|(t, _)| format!("level{t}."));
    match (phase, top) {
        (Phase::TopOnly, _) => model.params().vars_excluding(&["pair.".to_string()]),
        (Phase::BottomOnly, Some(top)) => model.params().vars_excluding(&[top]),
        _ => model.params().vars(),
    }
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn new_optimizer(vars: Vec<Var>, config: &TrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: config.weight_decay,
        },
    )?)
}

/// Order in which training tiles are visited during `epoch`.
pub fn epoch_order(config: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
}

struct Snapshot {
    params: Vec<NamedTensor>,
    codebooks: Vec<(u8, Codebook)>,
}

fn snapshot(model: &VqModel) -> Result<Snapshot> {
    Ok(Snapshot {
        params: model.params().export()?,
        codebooks: model.codebooks().into_iter().map(|(s, c)| (s, c.clone())).collect(),
    })
}

fn restore(model: &mut VqModel, snap: Snapshot) -> Result<()> {
    model.params().import(&snap.params)?;
    model.set_codebooks(snap.codebooks)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Total loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Set when training stopped on a non-finite loss; the checkpoint then
    /// holds the last state whose parameters were all finite.
    pub aborted: Option<String>,
}

/// Called after every epoch with the record just appended.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Trains a model on `tiles` (all `tile_size` square). The last
/// `holdout_fraction` of tiles is held out for per-epoch evaluation.
pub fn train(config: &TrainConfig, tiles: &[Raster], mut hook: Option<EpochHook>) -> Result<TrainOutcome> {
    config.validate()?;
    if tiles.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if let Some(bad) = tiles.iter().find(|t| t.dims() != (config.tile_size, config.tile_size)) {
        return Err(Error::shape(format!(
            "tile {:?} does not match tile_size {}",
            bad.dims(),
            config.tile_size
        )));
    }
    let model = Model::new(config)?;
    let Model::Vq(mut vq) = model else {
        return Ok(TrainOutcome {
            checkpoint: Checkpoint::new(config.clone(), model),
            step_losses: Vec::new(),
            aborted: None,
        });
    };
    let held = holdout_count(tiles.len(), config.holdout_fraction);
    let (train_tiles, eval_tiles) = tiles.split_at(tiles.len() - held);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let mut step_losses = Vec::new();
    let mut history = Vec::new();
    let mut smoothed: Option<f64> = None;
    let mut last_good = snapshot(&vq)?;
    let mut aborted = None;
    let mut current_phase = phase(config, 0);
    let mut vars = trainable_vars(&vq, config, current_phase);
    let mut opt = new_optimizer(vars.clone(), config)?;
    let mut epochs_done = 0;
    'epochs: for epoch in 0..config.epochs {
        if config.max_steps > 0 && step_losses.len() >= config.max_steps {
            break;
        }
        let p = phase(config, epoch);
        if p != current_phase {
            current_phase = p;
            vars = trainable_vars(&vq, config, p);
            opt = new_optimizer(vars.clone(), config)?;
        }
        let mut hist_top = vec![0u64; config.codebook_size];
        let mut hist_bottom = vec![0u64; config.codebook_size];
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        let order = epoch_order(config, train_tiles.len(), epoch);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps > 0 && step_losses.len() >= config.max_steps {
                break;
            }
            let batch: Vec<&Raster> = chunk.iter().map(|&i| &train_tiles[i]).collect();
            let (loss, report, updates) = forward_loss(&vq, config, &stack(&batch)?, current_phase)?;
            let step = step_losses.len();
            let value = if config.inject_nan_at_step == Some(step) {
                f64::NAN
            } else {
                report.total
            };
            if !value.is_finite() {
                let msg = format!("non-finite loss at step {step} (epoch {epoch})");
                log::error!("{msg}; keeping the last good checkpoint");
                aborted = Some(msg);
                break 'epochs;
            }
            let mut grads = loss.backward()?;
            let norm = clip_gradients(&mut grads, &vars, config.grad_clip)?;
            if !norm.is_finite() {
                let msg = format!("non-finite gradient norm at step {step} (epoch {epoch})");
                log::error!("{msg}; keeping the last good checkpoint");
                aborted = Some(msg);
                break 'epochs;
            }
            opt.step(&grads)?;
            let pair_top = config.pair.map(|(t, _)| t);
            for u in updates {
                let (book, hist) = match u.level {
                    Some(i) => {
                        let stages = vq.levels()[i].stages;
                        let tracked = pair_top.map_or(i == 0, |t| t == stages);
                        (&mut vq.levels_mut()[i].codebook, tracked.then_some(&mut hist_top))
                    }
                    None => (
                        &mut vq.pair_bottom_mut().expect("pair bottom").codebook,
                        Some(&mut hist_bottom),
                    ),
                };
                book.ema_update(&u.flat, &u.indices)?;
                if config.restart_dead_codes {
                    book.restart_dead_codes(&u.flat, &mut rng)?;
                }
                if let Some(h) = hist {
                    for (a, b) in h.iter_mut().zip(usage_histogram(&u.indices, config.codebook_size)) {
                        *a += b;
                    }
                }
            }
            step_losses.push(value);
            smoothed = Some(match smoothed {
                None => value,
                Some(s) => SMOOTHING * s + (1.0 - SMOOTHING) * value,
            });
            epoch_loss += value;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            break;
        }
        epochs_done = epoch + 1;
        let perplexity_top = perplexity(&hist_top).unwrap_or(1.0);
        let perplexity_bottom = config
            .pair
            .filter(|_| current_phase != Phase::TopOnly)
            .map(|_| perplexity(&hist_bottom).unwrap_or(1.0));
        for p in std::iter::once(perplexity_top).chain(perplexity_bottom) {
            if p < config.codebook_size as f64 / 16.0 {
                log::warn!(
                    "epoch {epoch}: codebook perplexity {p:.2} below K/16 = {:.2}, possible collapse",
                    config.codebook_size as f64 / 16.0
                );
            }
        }
        let (eval_psnr, eval_ssim) = if eval_tiles.is_empty() {
            (None, None)
        } else {
            let (p, s) = eval_tiles_top_only(&vq, config, eval_tiles)?;
            (Some(p), Some(s))
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: step_losses.len(),
            train_loss: epoch_loss / epoch_steps as f64,
            smoothed_loss: smoothed.unwrap_or(f64::NAN),
            eval_psnr,
            eval_ssim,
            perplexity_top,
            perplexity_bottom,
        };
        log::info!(
            "epoch {} step {}: loss {:.5} (smoothed {:.5}) perplexity {:.2}",
            record.epoch,
            record.steps,
            record.train_loss,
            record.smoothed_loss,
            record.perplexity_top
        );
        if let Some(h) = hook.as_mut() {
            h(&record);
        }
        history.push(record);
        last_good = snapshot(&vq)?;
    }
    if aborted.is_some() {
        restore(&mut vq, last_good)?;
        history.truncate(epochs_done);
    }
    let mut checkpoint = Checkpoint::new(config.clone(), Model::Vq(vq));
    checkpoint.epoch = epochs_done;
    checkpoint.history = history;
    Ok(TrainOutcome {
        checkpoint,
        step_losses,
        aborted,
    })
}

/// Mean PSNR and SSIM of top-only tile reconstructions at the finest level.
fn eval_tiles_top_only(model: &VqModel, config: &TrainConfig, tiles: &[Raster]) -> Result<(f64, f64)> {
    let level = &model.levels()[0];
    let decoder = level.decoder.as_ref().expect("container levels own a decoder");
    let ssim_cfg = config.ssim_config();
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for tile in tiles {
        let x = tile.to_tensor(DType::F32, &Device::Cpu)?;
        let q = quantize_map(&level.encoder.forward(&x)?, &level.codebook)?;
        let recon = Raster::from_tensor(&decoder.forward(&q.quantized)?.clamp(-0.5f32, 0.5f32)?)?;
        psnr_sum += psnr_raster(tile, &recon, 1.0)?.min(100.0);
        ssim_sum += ssim_raster(tile, &recon, &ssim_cfg)?;
    }
    let n = tiles.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

/// Trains the prior on `(top, bottom)` token pairs of every tile, with the
/// autoencoder frozen. Returns the per-step loss.
pub fn train_prior(checkpoint: &mut Checkpoint, tiles: &[Raster], seed: u64) -> Result<Vec<f64>> {
    let config = checkpoint.config.clone();
    let vq = checkpoint
        .model
        .as_vq()
        .ok_or_else(|| Error::Unsupported("prior training needs a learned model".into()))?;
    let (top, bottom) = vq
        .pair()
        .ok_or_else(|| Error::Unsupported("checkpoint has no two-level pair (set `pair=top,bottom`)".into()))?;
    if tiles.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut pairs = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(8) {
        let refs: Vec<&Raster> = chunk.iter().collect();
        for (t, b) in vq.encode_pair_tiles(&stack(&refs)?)? {
            pairs.push(TokenSequence { top: t, bottom: b });
        }
    }
    let tile = config.tile_size;
    let prior_config = PriorConfig {
        layers: config.prior.layers,
        width: config.prior.width,
        heads: config.prior.heads,
        top_codes: config.codebook_size,
        bottom_codes: config.codebook_size,
        top_dims: (tile >> top, tile >> top),
        bottom_dims: (tile >> bottom, tile >> bottom),
        seed,
    };
    let mut prior = Prior::new(prior_config)?;
    let losses = prior.train(&pairs, config.prior.steps, config.prior.learning_rate, config.prior.batch_size)?;
    checkpoint.prior = Some(prior);
    Ok(losses)
}

/// Ratio label for a compression point: `4^d_s`, doubled under checkerboard.
pub fn nominal_ratio(stages: u8, checkerboard: bool) -> u64 {
    let r = 1u64 << (2 * stages as u32);
    if checkerboard {
        2 * r
    } else {
        r
    }
}

/// Compression point `(d_s, checkerboard)` behind a ratio label.
pub fn ratio_setting(ratio: u64, levels: &[u8]) -> Result<(u8, bool)> {
    for &s in levels {
        if nominal_ratio(s, false) == ratio {
            return Ok((s, false));
        }
    }
    for &s in levels {
        if nominal_ratio(s, true) == ratio {
            return Ok((s, true));
        }
    }
    Err(Error::invalid(format!(
        "ratio {ratio}x unavailable: checkpoint levels d_s={levels:?} give {:?}",
        levels
            .iter()
            .flat_map(|&s| [nominal_ratio(s, false), nominal_ratio(s, true)])
            .collect::<Vec<_>>()
    )))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub frame_id: String,
    pub ratio: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub perplexity_top: f64,
    pub perplexity_bottom: Option<f64>,
}

pub const EVAL_CSV_HEADER: &str = "frame_id,ratio,psnr,ssim,ms_ssim,perplexity_top,perplexity_bottom";

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.frame_id,
            self.ratio,
            self.psnr,
            self.ssim,
            self.ms_ssim,
            self.perplexity_top,
            self.perplexity_bottom.map_or(String::new(), |v| v.to_string())
        )
    }
}

/// Per-frame metrics for each ratio followed by one `mean` row per ratio.
/// Reconstructions are top-only.
pub fn evaluate(checkpoint: &Checkpoint, frames: &[(String, Frame)], ratios: &[u64]) -> Result<Vec<EvalRow>> {
    let levels = checkpoint.model.container_levels();
    let settings = ratios
        .iter()
        .map(|&r| ratio_setting(r, &levels).map(|s| (r, s)))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let ssim_cfg = checkpoint.config.ssim_config();
    let digest = checkpoint.digest();
    let tile = checkpoint.tile_size();
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &(ratio, (stages, checkerboard)) in &settings {
        let mut per_ratio = Vec::new();
        for (id, frame) in frames {
            let container = encode_frame(&checkpoint.model, tile, digest, frame, stages, checkerboard)?;
            let recon = decode_top_only(&checkpoint.model, tile, &container)?;
            let k = container.header.codebook_size as usize;
            let perplexity_top = perplexity(&usage_histogram(&container.tokens, k))?;
            let perplexity_bottom = match checkpoint.model.as_vq() {
                Some(vq) if vq.pair().is_some_and(|(t, _)| t == stages) => {
                    let (_, b) = vq.pair().expect("checked");
                    let bottom = vq.pair_bottom().expect("pair bottom");
                    let grid = bottom_tokens(vq, tile, frame, b)?;
                    Some(perplexity(&usage_histogram(&grid, bottom.codebook.size()))?)
                }
                _ => None,
            };
            let (a, b) = (frame.values(), recon.values());
            let ms = ms_ssim_raster(a, b, &ssim_cfg).unwrap_or(f64::NAN);
            let row = EvalRow {
                frame_id: id.clone(),
                ratio,
                psnr: psnr_raster(a, b, 1.0)?,
                ssim: ssim_raster(a, b, &ssim_cfg)?,
                ms_ssim: ms,
                perplexity_top,
                perplexity_bottom,
            };
            per_ratio.push(row);
        }
        let n = per_ratio.len() as f64;
        let mean = |f: &dyn Fn(&EvalRow) -> f64| per_ratio.iter().map(f).sum::<f64>() / n;
        means.push(EvalRow {
            frame_id: "mean".into(),
            ratio,
            psnr: mean(&|r| r.psnr),
            ssim: mean(&|r| r.ssim),
            ms_ssim: mean(&|r| r.ms_ssim),
            perplexity_top: mean(&|r| r.perplexity_top),
            perplexity_bottom: per_ratio[0]
                .perplexity_bottom
                .map(|_| mean(&|r| r.perplexity_bottom.unwrap_or(f64::NAN))),
        });
        rows.extend(per_ratio);
    }
    rows.extend(means);
    Ok(rows)
}

fn bottom_tokens(vq: &VqModel, tile: usize, frame: &Frame, stages: u8) -> Result<Vec<u32>> {
    let bottom = vq.pair_bottom().expect("pair bottom");
    let f = 1usize << stages;
    let (h, w) = (frame.height().div_ceil(f) * f, frame.width().div_ceil(f) * f);
    let padded = frame.values().pad_edge(h, w)?;
    let mut tokens = Vec::new();
    for r in (0..h).step_by(tile.min(h)) {
        for c in (0..w).step_by(tile.min(w)) {
            let th = tile.min(h - r);
            let tw = tile.min(w - c);
            let x = padded.crop(r, c, th, tw)?.to_tensor(DType::F32, &Device::Cpu)?;
            let q = quantize_map(&bottom.encoder.forward(&x)?, &bottom.codebook)?;
            tokens.extend(q.result.indices);
        }
    }
    Ok(tokens)
}

/// Writes evaluation rows as CSV.
pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut text = String::from(EVAL_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
