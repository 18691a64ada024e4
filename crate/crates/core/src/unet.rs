//! Small conditional denoising U-Net.
//!
//! Three resolutions with two residual blocks each on both paths. Every decoder
//! block is a residual block (consuming one encoder skip) followed by
//! cross-attention over the condition tokens; these decoder blocks are the
//! capture points for intermediate features and attention maps, numbered in
//! execution order from the coarsest block (layer 0) to the finest.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, GroupNorm, Linear, VarPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub cond_dim: usize,
    pub heads: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 32,
            channel_mults: vec![1, 2, 2],
            blocks_per_level: 2,
            cond_dim: 64,
            heads: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.blocks_per_level == 0 || self.base_width == 0 {
            return Err(Error::Parameter(
                "U-Net needs at least one level and block".into(),
            ));
        }
        for m in &self.channel_mults {
            let c = m * self.base_width;
            if !c.is_multiple_of(self.heads) {
                return Err(Error::Parameter(format!(
                    "width {c} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    pub fn decoder_layers(&self) -> usize {
        self.channel_mults.len() * self.blocks_per_level
    }

    /// Channel width and downsampling factor of each decoder layer, in layer order.
    pub fn decoder_layout(&self) -> Vec<(usize, usize)> {
        let levels = self.channel_mults.len();
        let mut out = Vec::new();
        for level in (0..levels).rev() {
            for _ in 0..self.blocks_per_level {
                out.push((self.channel_mults[level] * self.base_width, 1 << level));
            }
        }
        out
    }

    fn time_dim(&self) -> usize {
        4 * self.base_width
    }
}

fn sinusoidal(ts: &[usize], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
        v.resize(v.len() + dim - 2 * half, 0.0);
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(vs: &mut VarPath, cin: usize, cout: usize, tdim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut vs.pp("norm1"), cin)?,
            conv1: Conv2d::new(&mut vs.pp("conv1"), cin, cout, 3)?,
            temb: Linear::new(&mut vs.pp("temb"), tdim, cout, true)?,
            norm2: GroupNorm::new(&mut vs.pp("norm2"), cout)?,
            conv2: Conv2d::with_gain(&mut vs.pp("conv2"), cout, cout, 3, 0.5)?,
            skip: if cin != cout {
                Some(Conv2d::with_gain(&mut vs.pp("skip"), cin, cout, 1, 1.0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&nn::silu(&self.norm1.forward(x)?)?)?;
        let t = self
            .temb
            .forward(&nn::silu(temb)?)?
            .unsqueeze(2)?
            .unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&nn::silu(&self.norm2.forward(&h)?)?)?;
        let shortcut = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((shortcut + h)?)
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(vs: &mut VarPath, channels: usize, cond_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut vs.pp("norm"), channels)?,
            q: Linear::new(&mut vs.pp("q"), channels, channels, false)?,
            k: Linear::new(&mut vs.pp("k"), cond_dim, channels, false)?,
            v: Linear::new(&mut vs.pp("v"), cond_dim, channels, false)?,
            out: Linear::new(&mut vs.pp("out"), channels, channels, true)?,
            heads,
        })
    }

    /// Returns the residual output and the attention weights (B, heads, H·W, K).
    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let k_tokens = ctx.dim(1)?;
        let hd = c / self.heads;
        let seq = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?;
        let q = self
            .q
            .forward(&seq)?
            .reshape((b, h * w, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let k = self
            .k
            .forward(ctx)?
            .reshape((b, k_tokens, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let v = self
            .v
            .forward(ctx)?
            .reshape((b, k_tokens, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let probs = nn::softmax_last(&scores)?;
        let attended = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, h * w, c))?;
        let o = self
            .out
            .forward(&attended)?
            .transpose(1, 2)?
            .reshape((b, c, h, w))?;
        Ok(((x + o)?, probs))
    }
}

/// Features recorded at one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    /// Residual-block output, (B, d_l, h_l, w_l).
    pub inter: Tensor,
    /// Head-averaged cross-attention maps, (B, K, h_l, w_l).
    pub cross: Tensor,
    /// Raw attention weights, (B, heads, h_l·w_l, K).
    pub attention: Tensor,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Vec<ResBlock>>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
    up: Vec<Vec<(ResBlock, CrossAttention)>>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(vs: &mut VarPath, config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let tdim = config.time_dim();
        let widths: Vec<usize> = config
            .channel_mults
            .iter()
            .map(|m| m * config.base_width)
            .collect();
        let levels = widths.len();
        let time1 = Linear::new(&mut vs.pp("time1"), config.base_width, tdim, true)?;
        let time2 = Linear::new(&mut vs.pp("time2"), tdim, tdim, true)?;
        let conv_in =
            Conv2d::with_gain(&mut vs.pp("conv_in"), config.in_channels, widths[0], 3, 1.0)?;

        let mut down = Vec::with_capacity(levels);
        let mut downsample = Vec::new();
        let mut skips = Vec::new();
        let mut ch = widths[0];
        for (level, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_level {
                blocks.push(ResBlock::new(
                    &mut vs.pp(format!("down{level}.{b}")),
                    ch,
                    w,
                    tdim,
                )?);
                ch = w;
                skips.push(ch);
            }
            down.push(blocks);
            if level + 1 < levels {
                downsample.push(Conv2d::new(
                    &mut vs.pp(format!("downsample{level}")),
                    ch,
                    ch,
                    3,
                )?);
            }
        }

        let mid1 = ResBlock::new(&mut vs.pp("mid1"), ch, ch, tdim)?;
        let mid_attn =
            CrossAttention::new(&mut vs.pp("mid_attn"), ch, config.cond_dim, config.heads)?;
        let mid2 = ResBlock::new(&mut vs.pp("mid2"), ch, ch, tdim)?;

        let mut up = Vec::with_capacity(levels);
        let mut upsample = Vec::new();
        for level in (0..levels).rev() {
            let w = widths[level];
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_level {
                let skip = skips.pop().expect("one skip per decoder block");
                let mut p = vs.pp(format!("up{level}.{b}"));
                let res = ResBlock::new(&mut p.pp("res"), ch + skip, w, tdim)?;
                let attn =
                    CrossAttention::new(&mut p.pp("attn"), w, config.cond_dim, config.heads)?;
                blocks.push((res, attn));
                ch = w;
            }
            up.push(blocks);
            if level > 0 {
                upsample.push(Conv2d::new(
                    &mut vs.pp(format!("upsample{level}")),
                    ch,
                    ch,
                    3,
                )?);
            }
        }
        let norm_out = GroupNorm::new(&mut vs.pp("norm_out"), ch)?;
        let conv_out = Conv2d::with_gain(&mut vs.pp("conv_out"), ch, config.in_channels, 3, 0.1)?;
        Ok(Self {
            config: config.clone(),
            time1,
            time2,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Predicts noise for a batch `x` (B, C, H, W) at per-item timesteps with
    /// condition tokens `ctx` (B, K, d_cond). When `capture` is set, returns one
    /// [`LayerCapture`] per decoder layer.
    pub fn forward(
        &self,
        x: &Tensor,
        ts: &[usize],
        ctx: &Tensor,
        capture: bool,
    ) -> Result<(Tensor, Option<Vec<LayerCapture>>)> {
        let (b, c, h, w) = x.dims4()?;
        let levels = self.config.channel_mults.len();
        let factor = 1 << (levels - 1);
        if c != self.config.in_channels || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "denoiser input {:?} incompatible with {} channels and {levels} levels",
                x.dims(),
                self.config.in_channels
            )));
        }
        if ts.len() != b || ctx.dim(0)? != b || ctx.dim(2)? != self.config.cond_dim {
            return Err(Error::Shape(format!(
                "batch {b} with {} timesteps and context {:?}",
                ts.len(),
                ctx.dims()
            )));
        }
        let temb = sinusoidal(ts, self.config.base_width, x)?;
        let temb = self
            .time2
            .forward(&nn::silu(&self.time1.forward(&temb)?)?)?;

        let mut hcur = self.conv_in.forward(x)?;
        let mut skips = Vec::new();
        for (level, blocks) in self.down.iter().enumerate() {
            for block in blocks {
                hcur = block.forward(&hcur, &temb)?;
                skips.push(hcur.clone());
            }
            if let Some(ds) = self.downsample.get(level) {
                hcur = ds.forward(&nn::avg_pool2(&hcur)?)?;
            }
        }
        hcur = self.mid1.forward(&hcur, &temb)?;
        hcur = self.mid_attn.forward(&hcur, ctx)?.0;
        hcur = self.mid2.forward(&hcur, &temb)?;

        let mut captures = capture.then(Vec::new);
        for (i, blocks) in self.up.iter().enumerate() {
            for (res, attn) in blocks {
                let skip = skips.pop().expect("balanced skips");
                let inter = res.forward(&Tensor::cat(&[&hcur, &skip], 1)?, &temb)?;
                let (out, probs) = attn.forward(&inter, ctx)?;
                if let Some(caps) = captures.as_mut() {
                    let (_, _, lh, lw) = inter.dims4()?;
                    let k = ctx.dim(1)?;
                    let cross = probs.mean(1)?.transpose(1, 2)?.reshape((b, k, lh, lw))?;
                    caps.push(LayerCapture {
                        inter: inter.clone(),
                        cross,
                        attention: probs,
                    });
                }
                hcur = out;
            }
            if let Some(us) = self.upsample.get(i) {
                hcur = nn::upsample_nearest2(&us.forward(&hcur)?)?;
            }
        }
        let eps = self
            .conv_out
            .forward(&nn::silu(&self.norm_out.forward(&hcur)?)?)?;
        Ok((eps, captures))
    }
}

/// Sum over the token axis of a capture's attention weights; all ones for a valid softmax.
pub fn attention_row_sums(capture: &LayerCapture) -> Result<Tensor> {
    Ok(capture.attention.sum(D::Minus1)?)
}
