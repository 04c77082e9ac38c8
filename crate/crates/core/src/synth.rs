//! Synthetic EM-like frames: band-limited noise texture crossed by dark,
//! curved membranes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pixeldata::Frame;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    /// Gaussian blur of the texture noise, in pixels.
    pub texture_sigma: f64,
    /// Number of membranes; `None` scales with the frame area.
    pub membranes: Option<usize>,
    pub grain: f64,
}

impl SynthParams {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            texture_sigma: 3.0,
            membranes: None,
            grain: 0.015,
        }
    }
}

fn blur_axis(src: &[f64], h: usize, w: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let o = k as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                } else {
                    ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                };
                acc += t * src[yy as usize * w + xx as usize];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Renders one frame; the same parameters and seed give the same pixels.
pub fn synth_frame(params: &SynthParams, seed: u64) -> Result<Frame> {
    let (h, w) = (params.height, params.width);
    if h == 0 || w == 0 {
        return Err(Error::invalid("synthetic frame dims must be positive"));
    }
    if !(params.texture_sigma > 0.0) || !(params.grain >= 0.0) {
        return Err(Error::invalid("texture_sigma must be positive and grain non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise: Vec<f64> = (0..h * w).map(|_| unit.sample(&mut rng)).collect();
    let radius = (3.0 * params.texture_sigma).ceil() as usize;
    let taps: Vec<f64> = {
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * params.texture_sigma * params.texture_sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let smooth = blur_axis(&blur_axis(&noise, h, w, &taps, true), h, w, &taps, false);
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64)
        .sqrt()
        .max(1e-12);
    let mut img: Vec<f64> = smooth.iter().map(|v| 0.62 + 0.12 * (v - mean) / std).collect();

    let count = params.membranes.unwrap_or_else(|| (h * w / 6000).max(3));
    let mut dist = vec![f64::INFINITY; h * w];
    let mut darkness = vec![0.0f64; h * w];
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..count {
        let point = |rng: &mut ChaCha8Rng| (rng.random_range(-0.1..1.1) * hf, rng.random_range(-0.1..1.1) * wf);
        let (p0, p1, p2) = (point(&mut rng), point(&mut rng), point(&mut rng));
        let thickness = rng.random_range(1.2..2.8);
        let depth = rng.random_range(0.35..0.5);
        let len = ((p2.0 - p0.0).hypot(p2.1 - p0.1) + (p1.0 - p0.0).hypot(p1.1 - p0.1)).max(1.0);
        let samples = (len * 2.0) as usize + 2;
        let reach = thickness + 1.5;
        for s in 0..samples {
            let t = s as f64 / (samples - 1) as f64;
            let u = 1.0 - t;
            let cy = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let cx = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let y0 = (cy - reach).floor().max(0.0) as usize;
            let y1 = ((cy + reach).ceil().max(0.0) as usize).min(h.saturating_sub(1));
            let x0 = (cx - reach).floor().max(0.0) as usize;
            let x1 = ((cx + reach).ceil().max(0.0) as usize).min(w.saturating_sub(1));
            if cy + reach < 0.0 || cx + reach < 0.0 || y0 >= h || x0 >= w {
                continue;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = (y as f64 - cy).hypot(x as f64 - cx) - thickness;
                    let i = y * w + x;
                    if d < dist[i] {
                        dist[i] = d;
                        darkness[i] = depth;
                    }
                }
            }
        }
    }
    for i in 0..h * w {
        let profile = (1.0 - dist[i]).clamp(0.0, 1.0);
        img[i] *= 1.0 - darkness[i] * profile;
    }
    let grain = Normal::new(0.0, params.grain.max(1e-12)).expect("valid normal");
    let px: Vec<u8> = img
        .iter()
        .map(|v| {
            let g = if params.grain > 0.0 { grain.sample(&mut rng) } else { 0.0 };
            ((v + g).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Frame::from_gray8(h, w, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_textured() {
        let p = SynthParams::new(64, 80);
        let a = synth_frame(&p, 1).unwrap();
        assert_eq!(a, synth_frame(&p, 1).unwrap());
        assert_ne!(a, synth_frame(&p, 2).unwrap());
        assert_eq!((a.height(), a.width()), (64, 80));
        let px = a.to_gray8();
        let min = *px.iter().min().unwrap();
        let max = *px.iter().max().unwrap();
        assert!(max - min > 60, "contrast {min}..{max}");
    }
}
