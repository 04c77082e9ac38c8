//! Minimal layer set over candle tensors with an ordered parameter registry.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// A named parameter snapshot, as persisted in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameters in declaration order. Initial values come from a seeded host RNG
/// so construction is reproducible.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, dims: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(data, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(handle)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f32) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name, dims, data)
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f32) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name, dims, data)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        self.register(name, dims, vec![value; n])
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn vars_excluding(&self, prefixes: &[String]) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|(n, _)| !prefixes.iter().any(|p| n.starts_with(p.as_str())))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn export(&self) -> Result<Vec<NamedTensor>> {
        self.entries
            .iter()
            .map(|(name, var)| {
                Ok(NamedTensor {
                    name: name.clone(),
                    dims: var.dims().to_vec(),
                    data: var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `tensors`, which must list the same
    /// names and shapes in declaration order.
    pub fn import(&self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::format(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for ((name, var), t) in self.entries.iter().zip(tensors) {
            if *name != t.name || var.dims() != t.dims.as_slice() {
                return Err(Error::format(format!(
                    "parameter {name} {:?} does not match stored {} {:?}",
                    var.dims(),
                    t.name,
                    t.dims
                )));
            }
            let src = Tensor::from_slice(&t.data, t.dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&src)?;
        }
        Ok(())
    }

    /// Multiplies the named parameter by `factor` in place.
    pub fn scale(&self, name: &str, factor: f64) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::invalid(format!("no parameter {name}")))?;
        let scaled = (var.as_tensor() * factor)?;
        var.set(&scaled)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f32).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Zero-initialized 1x1 convolution.
    pub fn zeros_1x1(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = ps.constant(&format!("{name}.weight"), &[c_out, c_in, 1, 1], 0.0)?;
        let bias = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: 0,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Transposed convolution; weight layout `(c_in, c_out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_out * kernel * kernel) as f32).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[c_in, c_out, kernel, kernel], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// `x + conv(relu(conv(relu(x))))` with two 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    first: Conv2d,
    second: Conv2d,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            first: Conv2d::new(ps, &format!("{name}.conv1"), width, width, 3, 1, 1)?,
            second: Conv2d::new(ps, &format!("{name}.conv2"), width, width, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.first.forward(&x.relu()?)?;
        let h = self.second.forward(&h.relu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f32).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[d_out, d_in], bound)?,
            bias: ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.constant(&format!("{name}.gain"), &[width], 1.0)?,
            shift: ps.constant(&format!("{name}.shift"), &[width], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Softmax over the last axis with autograd support.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_import_round_trip() {
        let mut a = ParamStore::new(DType::F32, 1);
        Conv2d::new(&mut a, "c", 2, 3, 3, 1, 1).unwrap();
        let mut b = ParamStore::new(DType::F32, 2);
        Conv2d::new(&mut b, "c", 2, 3, 3, 1, 1).unwrap();
        assert_ne!(a.export().unwrap(), b.export().unwrap());
        b.import(&a.export().unwrap()).unwrap();
        assert_eq!(a.export().unwrap(), b.export().unwrap());
    }

    #[test]
    fn import_rejects_mismatched_layout() {
        let mut a = ParamStore::new(DType::F32, 1);
        Conv2d::new(&mut a, "c", 2, 3, 3, 1, 1).unwrap();
        let mut b = ParamStore::new(DType::F32, 1);
        Conv2d::new(&mut b, "d", 2, 3, 3, 1, 1).unwrap();
        assert!(b.import(&a.export().unwrap()).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut ps = ParamStore::new(DType::F32, 7);
            Linear::new(&mut ps, "l", 4, 5).unwrap();
            ps.export().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2.0, 3.0], [-1.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[1f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap();
        let mean = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(mean.abs() < 1e-12);
    }
}
