//! Vector quantization with EMA codebook updates.
//!
//! The codebook is learned only through exponential moving averages of
//! assignment counts and assigned-vector sums; gradients reach the encoder
//! through the straight-through passthrough and never touch the embeddings.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_EMA_DECAY: f32 = 0.99;
pub const DEFAULT_EMA_EPSILON: f32 = 1e-5;
/// Smoothed count below which a code counts as dead for restarts.
pub const DEAD_CODE_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    embeddings: Vec<f32>,
    ema_counts: Vec<f32>,
    ema_sums: Vec<f32>,
    decay: f32,
    epsilon: f32,
}

impl Codebook {
    /// Gaussian initialization with std `1/sqrt(dim)`. EMA statistics start as
    /// one pseudo-assignment of each embedding to itself.
    pub fn random<R: Rng + ?Sized>(size: usize, dim: usize, decay: f32, epsilon: f32, rng: &mut R) -> Result<Self> {
        check_dims(size, dim)?;
        let normal = Normal::new(0.0f32, 1.0 / (dim as f32).sqrt())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let embeddings: Vec<f32> = (0..size * dim).map(|_| normal.sample(rng)).collect();
        Self::from_embeddings(size, dim, embeddings, decay, epsilon)
    }

    pub fn from_embeddings(size: usize, dim: usize, embeddings: Vec<f32>, decay: f32, epsilon: f32) -> Result<Self> {
        check_dims(size, dim)?;
        if embeddings.len() != size * dim {
            return Err(Error::shape(format!(
                "codebook {size}x{dim} needs {} values, got {}",
                size * dim,
                embeddings.len()
            )));
        }
        Self::from_parts(size, dim, embeddings.clone(), vec![1.0; size], embeddings, decay, epsilon)
    }

    /// Rebuilds a codebook from persisted state.
    pub fn from_parts(
        size: usize,
        dim: usize,
        embeddings: Vec<f32>,
        ema_counts: Vec<f32>,
        ema_sums: Vec<f32>,
        decay: f32,
        epsilon: f32,
    ) -> Result<Self> {
        check_dims(size, dim)?;
        if embeddings.len() != size * dim || ema_sums.len() != size * dim || ema_counts.len() != size {
            return Err(Error::shape("codebook state lengths disagree with size/dim"));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1)")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("EMA smoothing must be positive"));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook embedding".into()));
        }
        if ema_counts.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::invalid("EMA counts must be non-negative"));
        }
        Ok(Self {
            size,
            dim,
            embeddings,
            ema_counts,
            ema_sums,
            decay,
            epsilon,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn decay(&self) -> f32 {
        self.decay
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn ema_counts(&self) -> &[f32] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f32] {
        &self.ema_sums
    }

    pub fn embedding(&self, index: usize) -> &[f32] {
        &self.embeddings[index * self.dim..(index + 1) * self.dim]
    }

    /// Concatenated embeddings of `indices`.
    pub fn lookup(&self, indices: &[u32]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i as usize >= self.size {
                return Err(Error::invalid(format!("token {i} >= codebook size {}", self.size)));
            }
            out.extend_from_slice(self.embedding(i as usize));
        }
        Ok(out)
    }

    /// Laplace-smoothed counts `(n_i + eps) * N / (N + K * eps)`.
    pub fn smoothed_counts(&self) -> Vec<f64> {
        let total: f64 = self.ema_counts.iter().map(|&c| c as f64).sum();
        let eps = self.epsilon as f64;
        let denom = total + self.size as f64 * eps;
        self.ema_counts
            .iter()
            .map(|&c| (c as f64 + eps) * total / denom)
            .collect()
    }

    /// One EMA step from a batch of vectors `z` (rows of length `dim`) and
    /// their assignments.
    pub fn ema_update(&mut self, z: &[f32], indices: &[u32]) -> Result<()> {
        if z.len() != indices.len() * self.dim {
            return Err(Error::shape(format!(
                "{} vectors of dim {} but {} values",
                indices.len(),
                self.dim,
                z.len()
            )));
        }
        let mut assigned = vec![0f64; self.size];
        let mut sums = vec![0f64; self.size * self.dim];
        for (row, &i) in z.chunks_exact(self.dim).zip(indices) {
            let i = i as usize;
            if i >= self.size {
                return Err(Error::invalid(format!("index {i} >= codebook size {}", self.size)));
            }
            assigned[i] += 1.0;
            for (acc, v) in sums[i * self.dim..(i + 1) * self.dim].iter_mut().zip(row) {
                *acc += *v as f64;
            }
        }
        let g = self.decay as f64;
        for (count, n) in self.ema_counts.iter_mut().zip(&assigned) {
            *count = (g * *count as f64 + (1.0 - g) * n) as f32;
        }
        for (s, new) in self.ema_sums.iter_mut().zip(&sums) {
            *s = (g * *s as f64 + (1.0 - g) * new) as f32;
        }
        self.refresh_embeddings();
        Ok(())
    }

    fn refresh_embeddings(&mut self) {
        let smoothed = self.smoothed_counts();
        for (k, n) in smoothed.iter().enumerate() {
            let range = k * self.dim..(k + 1) * self.dim;
            for (e, s) in self.embeddings[range.clone()].iter_mut().zip(&self.ema_sums[range]) {
                *e = (*s as f64 / n) as f32;
            }
        }
    }

    /// Moves every code whose smoothed count fell below [`DEAD_CODE_THRESHOLD`]
    /// onto a randomly drawn row of `z`. Returns the number of restarted codes.
    pub fn restart_dead_codes<R: Rng + ?Sized>(&mut self, z: &[f32], rng: &mut R) -> Result<usize> {
        if z.is_empty() || z.len() % self.dim != 0 {
            return Err(Error::shape("restart needs a non-empty batch of whole vectors"));
        }
        let rows = z.len() / self.dim;
        let smoothed = self.smoothed_counts();
        let mut restarted = 0;
        for (k, n) in smoothed.iter().enumerate() {
            if *n >= DEAD_CODE_THRESHOLD {
                continue;
            }
            let pick = rng.random_range(0..rows);
            let src = &z[pick * self.dim..(pick + 1) * self.dim];
            self.ema_sums[k * self.dim..(k + 1) * self.dim].copy_from_slice(src);
            self.ema_counts[k] = 1.0;
            restarted += 1;
        }
        if restarted > 0 {
            self.refresh_embeddings();
        }
        Ok(restarted)
    }
}

fn check_dims(size: usize, dim: usize) -> Result<()> {
    if size < 2 {
        return Err(Error::invalid(format!("codebook needs at least 2 codes, got {size}")));
    }
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantResult {
    pub indices: Vec<u32>,
    /// Row `p` equals `embeddings[indices[p]]`.
    pub quantized: Vec<f32>,
    pub perplexity: f64,
}

/// Nearest-embedding assignment under squared Euclidean distance; ties go to
/// the lowest index.
pub fn quantize(z: &[f32], dim: usize, codebook: &Codebook) -> Result<QuantResult> {
    if dim != codebook.dim {
        return Err(Error::shape(format!(
            "feature dim {dim} does not match codebook dim {}",
            codebook.dim
        )));
    }
    if z.len() % dim != 0 {
        return Err(Error::shape(format!("{} values is not a whole number of {dim}-vectors", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    let rows = z.len() / dim;
    let mut indices = Vec::with_capacity(rows);
    for row in z.chunks_exact(dim) {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (k, e) in codebook.embeddings.chunks_exact(dim).enumerate() {
            let d: f64 = row
                .iter()
                .zip(e)
                .map(|(a, b)| {
                    let t = *a as f64 - *b as f64;
                    t * t
                })
                .sum();
            if d < best_dist {
                best_dist = d;
                best = k;
            }
        }
        indices.push(best as u32);
    }
    let quantized = codebook.lookup(&indices)?;
    let perplexity = perplexity(&usage_histogram(&indices, codebook.size))?;
    Ok(QuantResult {
        indices,
        quantized,
        perplexity,
    })
}

pub fn usage_histogram(indices: &[u32], size: usize) -> Vec<u64> {
    let mut hist = vec![0u64; size];
    for &i in indices {
        if let Some(h) = hist.get_mut(i as usize) {
            *h += 1;
        }
    }
    hist
}

/// `exp(-sum p_i ln p_i)` of a usage histogram.
pub fn perplexity(histogram: &[u64]) -> Result<f64> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::invalid("perplexity of an all-zero histogram"));
    }
    let total = total as f64;
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp().clamp(1.0, histogram.len() as f64))
}

/// Forward value `quantized`, identity Jacobian with respect to `z`, and no
/// gradient into `quantized`.
pub fn straight_through(z: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    if z.dims() != quantized.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", z.dims(), quantized.dims())));
    }
    Ok(z.add(&quantized.sub(z)?.detach())?)
}

/// Mean squared distance between `z` and the detached quantized features.
pub fn commitment_loss(z: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    if z.dims() != quantized.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", z.dims(), quantized.dims())));
    }
    Ok(z.sub(&quantized.detach())?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[&[f32]]) -> Codebook {
        let dim = rows[0].len();
        let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_embeddings(rows.len(), dim, flat, 0.99, 1e-5).unwrap()
    }

    #[test]
    fn nearest_of_two() {
        let cb = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let q = quantize(&[0.1, 0.1], 2, &cb).unwrap();
        assert_eq!(q.indices, vec![0]);
    }

    #[test]
    fn exact_match_has_zero_error() {
        let cb = book(&[&[0.0, 0.0], &[1.0, 1.0], &[-2.0, 0.5]]);
        let q = quantize(&[-2.0, 0.5], 2, &cb).unwrap();
        assert_eq!(q.indices, vec![2]);
        assert_eq!(q.quantized, vec![-2.0, 0.5]);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let mut rows = vec![[9.0f32, 9.0]; 8];
        rows[3] = [1.0, 0.0];
        rows[7] = [-1.0, 0.0];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let cb = book(&refs);
        let q = quantize(&[0.0, 0.0], 2, &cb).unwrap();
        assert_eq!(q.indices, vec![3]);
    }

    #[test]
    fn quantize_errors() {
        let cb = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(quantize(&[0.0; 3], 3, &cb), Err(Error::Shape(_))));
        assert!(matches!(quantize(&[0.0; 3], 2, &cb), Err(Error::Shape(_))));
        assert!(matches!(quantize(&[f32::NAN, 0.0], 2, &cb), Err(Error::NonFinite(_))));
    }

    #[test]
    fn perplexity_cases() {
        assert!((perplexity(&[5; 256]).unwrap() - 256.0).abs() < 1e-9);
        let mut one_hot = vec![0u64; 256];
        one_hot[17] = 40;
        assert_eq!(perplexity(&one_hot).unwrap(), 1.0);
        assert!((perplexity(&[3, 3, 0, 0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(perplexity(&[0, 0]).is_err());
    }

    #[test]
    fn unassigned_code_decays_without_turning() {
        let mut cb = book(&[&[0.0, 0.0], &[3.0, 4.0]]);
        let before = cb.embedding(1).to_vec();
        let count = cb.ema_counts()[1];
        cb.ema_update(&[0.2, 0.1], &[0]).unwrap();
        assert!((cb.ema_counts()[1] - 0.99 * count).abs() < 1e-7);
        let after = cb.embedding(1);
        let cross = before[0] * after[1] - before[1] * after[0];
        assert!(cross.abs() < 1e-5);
        assert!(before[0] * after[0] + before[1] * after[1] > 0.0);
    }

    #[test]
    fn zero_decay_gives_batch_means() {
        let mut cb = Codebook::from_embeddings(2, 1, vec![0.0, 1.0], 0.0, 1e-5).unwrap();
        cb.ema_update(&[0.5, 1.5, 10.0], &[0, 0, 1]).unwrap();
        assert!((cb.embedding(0)[0] - 1.0).abs() < 1e-4);
        assert!((cb.embedding(1)[0] - 10.0).abs() < 1e-3);
    }

    #[test]
    fn ema_rejects_bad_batches() {
        let mut cb = book(&[&[0.0], &[1.0]]);
        assert!(cb.ema_update(&[0.0, 1.0], &[0]).is_err());
        assert!(cb.ema_update(&[0.0], &[2]).is_err());
    }

    #[test]
    fn restart_revives_dead_codes() {
        let mut cb = Codebook::from_embeddings(3, 1, vec![0.0, 5.0, 9.0], 0.0, 1e-5).unwrap();
        cb.ema_update(&[0.1, 0.2], &[0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = cb.restart_dead_codes(&[0.1, 0.2], &mut rng).unwrap();
        assert_eq!(n, 2);
        assert!(cb.embeddings().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn commitment_loss_of_offset() {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f32, 1.0, (2, 3, 4, 4), &dev).unwrap();
        let z = (&q + 0.3).unwrap();
        let l = commitment_loss(&z, &q).unwrap().to_scalar::<f32>().unwrap();
        assert!((l - 0.09).abs() < 1e-6);
        let zero = commitment_loss(&q, &q).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn straight_through_forward_and_gradients() {
        let dev = Device::Cpu;
        let z = Var::randn(0f64, 1.0, (1, 2, 3, 3), &dev).unwrap();
        let e = Var::randn(0f64, 1.0, (1, 2, 3, 3), &dev).unwrap();
        let q = e.as_tensor().affine(2.0, 0.5).unwrap();
        let p = straight_through(z.as_tensor(), &q).unwrap();
        let diff = p.sub(&q).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let grads = p.sum_all().unwrap().backward().unwrap();
        let gz = grads.get(z.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(gz.iter().all(|g| *g == 1.0));
        assert!(grads.get(e.as_tensor()).is_none());
        let bad = Tensor::zeros((1, 2, 3, 4), DType::F64, &dev).unwrap();
        assert!(straight_through(z.as_tensor(), &bad).is_err());
    }
}
