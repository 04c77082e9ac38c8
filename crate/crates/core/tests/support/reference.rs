//! Plain f64 reference implementations used as test oracles.
#![allow(dead_code)]

/// `(ssim, cs)` means of two `[0, 1]` images with a valid-mode Gaussian
/// window, computing the local covariance directly.
pub fn ssim_cs(x: &[f64], y: &[f64], h: usize, w: usize, window: usize, sigma: f64) -> (f64, f64) {
    let r = window as f64 / 2.0 - 0.5;
    let g: Vec<f64> = (0..window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (oh, ow) = (h - window + 1, w - window + 1);
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..window {
                for b in 0..window {
                    let k = g[a] * g[b] / total;
                    mx += k * x[(i + a) * w + j + b];
                    my += k * y[(i + a) * w + j + b];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for a in 0..window {
                for b in 0..window {
                    let k = g[a] * g[b] / total;
                    let dx = x[(i + a) * w + j + b] - mx;
                    let dy = y[(i + a) * w + j + b] - my;
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cov += k * dx * dy;
                }
            }
            let cs = (2.0 * cov + c2) / (vx + vy + c2);
            cs_sum += cs;
            s_sum += cs * (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        }
    }
    let n = (oh * ow) as f64;
    (s_sum / n, cs_sum / n)
}

/// 2x mean pooling; odd sides gain a leading zero row or column first.
fn halve(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h % 2, w % 2);
    let at = |r: usize, c: usize| -> f64 {
        if r < ph || c < pw {
            0.0
        } else {
            x[(r - ph) * w + c - pw]
        }
    };
    let (nh, nw) = ((h + ph) / 2, (w + pw) / 2);
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        for c in 0..nw {
            out.push((at(2 * r, 2 * c) + at(2 * r + 1, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c + 1)) / 4.0);
        }
    }
    (out, nh, nw)
}

pub const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Multi-scale SSIM of two `[0, 1]` images. Scales that do not fit
/// (`min side < 2^s * window`) are dropped and the remaining weights
/// renormalized; the full five-scale set is used as published.
pub fn ms_ssim(x: &[f64], y: &[f64], h: usize, w: usize, window: usize, sigma: f64) -> f64 {
    let mut scales = 1;
    while scales < 5 && h.min(w) >= (1 << scales) * window {
        scales += 1;
    }
    let norm: f64 = if scales < 5 { MS_WEIGHTS[..scales].iter().sum() } else { 1.0 };
    let (mut a, mut b, mut hh, mut ww) = (x.to_vec(), y.to_vec(), h, w);
    let mut out = 1.0;
    for s in 0..scales {
        let (ssim, cs) = ssim_cs(&a, &b, hh, ww, window, sigma);
        let v = if s + 1 == scales { ssim } else { cs };
        out *= v.max(0.0).powf(MS_WEIGHTS[s] / norm);
        if s + 1 < scales {
            let (na, nh, nw) = halve(&a, hh, ww);
            let (nb, _, _) = halve(&b, hh, ww);
            (a, b, hh, ww) = (na, nb, nh, nw);
        }
    }
    out
}

/// Index of the nearest row by exhaustive scan; the first minimum wins.
pub fn nearest(z: &[f32], rows: &[f32], dim: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, e) in rows.chunks_exact(dim).enumerate() {
        let d: f64 = z.iter().zip(e).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}
