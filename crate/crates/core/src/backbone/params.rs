//! Named parameter storage with seeded initialization, plus the small set of
//! layers the classifier and decoder are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Trainable parameters and non-trainable buffers (batch-norm running
/// statistics), keyed by dotted names. Ordered maps keep optimizer and
/// serialization order stable.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    /// Parameters followed by buffers, each group in name order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy: the returned store owns fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(Self {
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }

    /// Overwrites every tensor with the same-named tensor of `other`.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in self.named_tensors() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} != {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Overwrites tensors from `(name, tensor)` pairs; every stored tensor
    /// must be supplied.
    pub fn assign_named(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_tensors() {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} != {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// True when every parameter and buffer is bitwise equal to `other`'s.
    pub fn equals(&self, other: &ParamStore) -> Result<bool> {
        for (name, var) in self.named_tensors() {
            let Some(o) = other.get(name) else { return Ok(false) };
            if o.dims() != var.dims() {
                return Ok(false);
            }
            let a: Vec<f64> = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            let b: Vec<f64> = o.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(self.params.len() + self.buffers.len() == other.params.len() + other.buffers.len())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let conv = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?)))
                .collect()
        };
        Ok(Self {
            params: conv(&self.params)?,
            buffers: conv(&self.buffers)?,
            dtype,
            device: self.device.clone(),
        })
    }
}

/// Creates parameters under a name prefix, drawing initial values from a
/// seeded generator.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize], buffer: bool) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        let map = if buffer { &mut self.store.buffers } else { &mut self.store.params };
        if map.insert(name.clone(), var).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(tensor)
    }

    /// Zero-mean normal values with standard deviation `sqrt(gain / fan_in)`.
    pub fn fan_in(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) -> Result<Tensor> {
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.insert(name, values, shape, false)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, false)
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name.clone(), vec![value; n], shape, true)?;
        Ok(self.store.buffers[&name].clone())
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Conv> {
        let per_group = c_in / groups;
        let fan_in = per_group * kernel * kernel;
        let weight = self.fan_in(format!("{name}.weight"), &[c_out, per_group, kernel, kernel], fan_in, 2.0)?;
        let bias = if bias {
            Some(self.constant(format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride,
            padding: (kernel - 1) / 2,
            groups,
        })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.constant(format!("{name}.weight"), &[channels], 1.0)?,
            beta: self.constant(format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: self.buffer(format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: self.buffer(format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }
}

/// 2-D convolution with "same"-style padding `(k - 1) / 2`, so the output
/// side is `ceil(input / stride)`.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_unfolded(x, &self.weight, self.stride, self.padding, self.groups)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Every `stride`-th entry of dimension `dim`, starting at 0.
fn subsample(x: &Tensor, dim: usize, stride: usize, out: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.narrow(dim, 0, out)?);
    }
    let len = x.dim(dim)?;
    let x = if len < out * stride {
        x.pad_with_zeros(dim, 0, out * stride - len)?
    } else {
        x.narrow(dim, 0, out * stride)?
    };
    let mut shape = x.dims().to_vec();
    shape[dim] = out;
    shape.insert(dim + 1, stride);
    let x = x.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?;
    Ok(x)
}

/// 2-D convolution as shifted views plus a matrix product (dense) or a
/// weighted sum of shifts (depthwise). Built from differentiable tensor ops
/// only, so the backward pass avoids the slow direct transposed convolution.
pub fn conv2d_unfolded(x: &Tensor, weight: &Tensor, stride: usize, padding: usize, groups: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_out, c_per_group, k, k2) = weight.dims4()?;
    if k != k2 || c_per_group * groups != c {
        return Err(Error::Shape(format!(
            "kernel {:?} does not fit {c} input channels in {groups} groups",
            weight.dims()
        )));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    if k == 1 && stride == 1 && padding == 0 && groups == 1 {
        let y = weight.reshape((c_out, c))?.broadcast_matmul(&x.reshape((n, c, h * w))?)?;
        return Ok(y.reshape((n, c_out, h, w))?);
    }
    let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
    let shifted = |ki: usize, kj: usize| -> Result<Tensor> {
        let v = xp.narrow(2, ki, (ho - 1) * stride + 1)?;
        let v = subsample(&v, 2, stride, ho)?;
        let v = v.narrow(3, kj, (wo - 1) * stride + 1)?;
        subsample(&v, 3, stride, wo)
    };
    if groups == 1 {
        let mut cols = Vec::with_capacity(k * k);
        for ki in 0..k {
            for kj in 0..k {
                cols.push(shifted(ki, kj)?.unsqueeze(2)?);
            }
        }
        let cols = Tensor::cat(&cols, 2)?.reshape((n, c * k * k, ho * wo))?;
        let y = weight.reshape((c_out, c * k * k))?.broadcast_matmul(&cols)?;
        Ok(y.reshape((n, c_out, ho, wo))?)
    } else if groups == c && c_out == c {
        let mut acc: Option<Tensor> = None;
        for ki in 0..k {
            for kj in 0..k {
                let wk = weight.narrow(2, ki, 1)?.narrow(3, kj, 1)?.reshape((1, c, 1, 1))?;
                let term = shifted(ki, kj)?.broadcast_mul(&wk)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        Ok(acc.expect("kernel is nonempty"))
    } else {
        Err(Error::Shape(format!("unsupported grouping: {groups} groups over {c} channels")))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    /// Batch statistics in training mode (running statistics are updated),
    /// running statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(D::Minus1)?
                .mean_keepdim(D::Minus2)?
                .mean_keepdim(0)?;
            let (n, _, h, w) = x.dims4()?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let norm = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

pub fn hard_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x + 3.0)?.clamp(0.0, 6.0)? / 6.0)?)
}

pub fn hard_swish(x: &Tensor) -> Result<Tensor> {
    Ok((x * hard_sigmoid(x)?)?)
}

/// Spatial global average pooling keeping a `(N, C, 1, 1)` shape.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}
