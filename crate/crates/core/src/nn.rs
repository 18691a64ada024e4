//! Parameter storage and the small set of layers the models are built from.
//!
//! Weights live in a [`VarStore`], a name-ordered map of candle `Var`s initialised
//! from a seeded ChaCha stream so that two stores built with the same seed are
//! bit-identical. Layers hold plain tensors that share storage with the store's
//! variables; a store opened in detached mode hands out untracked views of the
//! same storage, which is how frozen inference copies are made.
//!
//! Convolutions are lowered to an im2col unfold followed by a single matmul, and
//! group norm and SiLU run as fused CPU ops with hand-written backward passes.
//! All of them support `f32` and `f64`.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled {
        fan_in: usize,
        gain: f64,
    },
}

pub struct VarStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    detached: bool,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
            detached: false,
        }
    }

    /// A view over the same storage whose tensors are not tracked by autograd.
    pub fn detached(&self) -> Self {
        Self {
            vars: self.vars.clone(),
            rng: ChaCha8Rng::seed_from_u64(0),
            dtype: self.dtype,
            device: self.device.clone(),
            detached: true,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> VarPath<'_> {
        VarPath {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn get(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(&name) {
            if var.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    var.dims()
                )));
            }
        } else {
            if self.detached {
                return Err(Error::State(format!("parameter {name} missing from store")));
            }
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Scaled { fan_in, gain } => {
                    let std = gain / (fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut self.rng)).collect()
                }
            };
            let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
            self.vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        let var = &self.vars[&name];
        Ok(if self.detached {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    /// Overwrites existing parameters with the given tensors; every name must exist with the same shape.
    pub fn assign(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "tensor {name}: stored {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values in name order.
    pub fn checksum(&self) -> Result<String> {
        checksum_tensors(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }
}

pub fn checksum_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

pub struct VarPath<'a> {
    store: &'a mut VarStore,
    prefix: String,
}

impl VarPath<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> VarPath<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        VarPath {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get(full, shape, init)
    }
}

/// 2-D convolution with stride 1 and "same" padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Weight reshaped to (out, k*k*in) in (dy, dx, channel) order.
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new(
        vs: &mut VarPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::with_gain(vs, in_channels, out_channels, kernel, 2f64.sqrt())
    }

    pub fn with_gain(
        vs: &mut VarPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "kernel size {kernel} must be odd"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = vs.get(
            "weight",
            &[out_channels, kernel * kernel * in_channels],
            Init::Scaled { fan_in, gain },
        )?;
        let bias = vs.get("bias", &[out_channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let cols = if self.kernel == 1 {
            x.reshape((b, c, h * w))?
        } else {
            im2col(x, self.kernel)?
        };
        let y = self.weight.broadcast_matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1))?)?;
        Ok(y.reshape((b, self.out_channels, h, w))?)
    }
}

/// Unfolds (B, C, H, W) into (B, k·k·C, H·W) patches in (dy, dx, channel) row order,
/// zero-padded so the output grid matches the input grid.
pub fn im2col(x: &Tensor, kernel: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col { kernel })?)
}

struct Im2Col {
    kernel: usize,
}

struct Col2Im {
    kernel: usize,
    channels: usize,
    height: usize,
    width: usize,
}

fn unfold<T: Copy + Default>(
    src: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let rows = k * k * c;
    let mut out = vec![T::default(); b * rows * hw];
    for bi in 0..b {
        for dy in 0..k {
            for dx in 0..k {
                for ci in 0..c {
                    let row = (dy * k + dx) * c + ci;
                    let dst = &mut out[(bi * rows + row) * hw..(bi * rows + row + 1) * hw];
                    let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let oy = dy as isize - pad;
                    let ox = dx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let s = sy as usize * w;
                        let sx0 = (x0 as isize + ox) as usize;
                        dst[y * w + x0..y * w + x1]
                            .copy_from_slice(&plane[s + sx0..s + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    out
}

fn fold<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let rows = k * k * c;
    let mut out = vec![T::default(); b * c * hw];
    for bi in 0..b {
        for dy in 0..k {
            for dx in 0..k {
                for ci in 0..c {
                    let row = (dy * k + dx) * c + ci;
                    let col = &src[(bi * rows + row) * hw..(bi * rows + row + 1) * hw];
                    let plane = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let oy = dy as isize - pad;
                    let ox = dx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                        let s = sy as usize * w;
                        for xx in x0..x1 {
                            plane[s + (xx as isize + ox) as usize] += col[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let k = self.kernel;
        let shape = Shape::from((b, k * k * c, h * w));
        let out = match storage {
            CpuStorage::F32(d) => {
                CpuStorage::F32(unfold(contiguous_slice(d, layout)?, b, c, h, w, k))
            }
            CpuStorage::F64(d) => {
                CpuStorage::F64(unfold(contiguous_slice(d, layout)?, b, c, h, w, k))
            }
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            kernel: self.kernel,
            channels: c,
            height: h,
            width: w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, _, _) = layout.shape().dims3()?;
        let (c, h, w, k) = (self.channels, self.height, self.width, self.kernel);
        let shape = Shape::from((b, c, h, w));
        let out = match storage {
            CpuStorage::F32(d) => {
                CpuStorage::F32(fold(contiguous_slice(d, layout)?, b, c, h, w, k))
            }
            CpuStorage::F64(d) => {
                CpuStorage::F64(fold(contiguous_slice(d, layout)?, b, c, h, w, k))
            }
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vs: &mut VarPath, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = vs.get(
            "weight",
            &[output, input],
            Init::Scaled {
                fan_in: input,
                gain: 1.0,
            },
        )?;
        let bias = if bias {
            Some(vs.get("bias", &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Group normalisation over (B, C, H, W) with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(vs: &mut VarPath, channels: usize) -> Result<Self> {
        let groups = (1..=8)
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        Ok(Self {
            gamma: vs.get("gamma", &[channels], Init::Ones)?,
            beta: vs.get("beta", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = GroupNormOp {
            groups: self.groups,
            eps: self.eps,
        };
        Ok(x.contiguous()?
            .apply_op3(&self.gamma.contiguous()?, &self.beta.contiguous()?, op)?)
    }
}

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

/// Per-(batch, group) mean and inverse standard deviation.
fn group_stats(x: &[f64], b: usize, groups: usize, group_len: usize, eps: f64) -> Vec<(f64, f64)> {
    let mut stats = Vec::with_capacity(b * groups);
    for g in 0..b * groups {
        let xs = &x[g * group_len..(g + 1) * group_len];
        let mean = xs.iter().sum::<f64>() / group_len as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
        stats.push((mean, 1.0 / (var + eps).sqrt()));
    }
    stats
}

fn to_f64_vec(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn cpu_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    Ok(match s {
        CpuStorage::F32(d) => contiguous_slice(d, l)?.iter().map(|v| *v as f64).collect(),
        CpuStorage::F64(d) => contiguous_slice(d, l)?.to_vec(),
        _ => candle_core::bail!("only f32 and f64 are supported"),
    })
}

fn cpu_from_f64(like: &CpuStorage, v: Vec<f64>) -> candle_core::Result<CpuStorage> {
    Ok(match like {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|a| a as f32).collect()),
        CpuStorage::F64(_) => CpuStorage::F64(v),
        _ => candle_core::bail!("only f32 and f64 are supported"),
    })
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let x = cpu_f64(s1, l1)?;
        let gamma = cpu_f64(s2, l2)?;
        let beta = cpu_f64(s3, l3)?;
        let cg = c / self.groups;
        let hw = h * w;
        let stats = group_stats(&x, b, self.groups, cg * hw, self.eps);
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let (mean, inv) = stats[bi * self.groups + ci / cg];
                let base = (bi * c + ci) * hw;
                for i in base..base + hw {
                    out[i] = (x[i] - mean) * inv * gamma[ci] + beta[ci];
                }
            }
        }
        Ok((cpu_from_f64(s1, out)?, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let xs = to_f64_vec(x)?;
        let gs = to_f64_vec(gamma)?;
        let dy = to_f64_vec(grad)?;
        let cg = c / self.groups;
        let hw = h * w;
        let n = (cg * hw) as f64;
        let stats = group_stats(&xs, b, self.groups, cg * hw, self.eps);
        let mut dx = vec![0.0; xs.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for g in 0..self.groups {
                let (mean, inv) = stats[bi * self.groups + g];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ci in g * cg..(g + 1) * cg {
                    let base = (bi * c + ci) * hw;
                    for i in base..base + hw {
                        let xhat = (xs[i] - mean) * inv;
                        let dxhat = dy[i] * gs[ci];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[ci] += dy[i] * xhat;
                        dbeta[ci] += dy[i];
                    }
                }
                let m1 = sum_dxhat / n;
                let m2 = sum_dxhat_xhat / n;
                for (ci, &gc) in gs.iter().enumerate().take((g + 1) * cg).skip(g * cg) {
                    let base = (bi * c + ci) * hw;
                    for i in base..base + hw {
                        let xhat = (xs[i] - mean) * inv;
                        dx[i] = inv * (dy[i] * gc - m1 - xhat * m2);
                    }
                }
            }
        }
        let dev = x.device();
        let dx = Tensor::from_vec(dx, x.shape(), dev)?.to_dtype(x.dtype())?;
        let dgamma = Tensor::from_vec(dgamma, gamma.shape(), dev)?.to_dtype(gamma.dtype())?;
        let dbeta = Tensor::from_vec(dbeta, gamma.shape(), dev)?.to_dtype(gamma.dtype())?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

struct SiluOp;

impl CustomOp1 for SiluOp {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(
                contiguous_slice(d, layout)?
                    .iter()
                    .map(|&v| v / (1.0 + (-v).exp()))
                    .collect(),
            ),
            CpuStorage::F64(d) => CpuStorage::F64(
                contiguous_slice(d, layout)?
                    .iter()
                    .map(|&v| v / (1.0 + (-v).exp()))
                    .collect(),
            ),
            _ => candle_core::bail!("silu supports f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let xs = to_f64_vec(arg)?;
        let dy = to_f64_vec(grad)?;
        let dx: Vec<f64> = xs
            .iter()
            .zip(&dy)
            .map(|(&v, &g)| {
                let s = 1.0 / (1.0 + (-v).exp());
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect();
        Ok(Some(
            Tensor::from_vec(dx, arg.shape(), arg.device())?.to_dtype(arg.dtype())?,
        ))
    }
}

/// 2x2 average pooling.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve spatial size {h}x{w}")));
    }
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Interpolation matrix (out x in) for 1-D linear resampling with half-pixel centres.
pub fn linear_resize_matrix(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[i * input + i0] += 1.0 - frac;
        m[i * input + i1] += frac;
    }
    m
}

/// Bilinear resize of the two trailing axes, expressed as two matmuls so it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let n = dims.len();
    if n < 2 {
        return Err(Error::Shape(format!(
            "resize needs at least 2 dims, got {dims:?}"
        )));
    }
    let (in_h, in_w) = (dims[n - 2], dims[n - 1]);
    if in_h == out_h && in_w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows = Tensor::from_vec(linear_resize_matrix(out_h, in_h), (out_h, in_h), dev)?
        .to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(linear_resize_matrix(out_w, in_w), (out_w, in_w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    Ok(rows.broadcast_matmul(&x.broadcast_matmul(&cols)?)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SiluOp)?)
}

/// Softmax over the last axis, composed from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
