//! Linear-beta noise schedule, forward noising and deterministic DDIM steps.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl Schedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        make_noise_schedule(params.train_timesteps, params.beta_start, params.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn train_timesteps(&self) -> usize {
        self.params.train_timesteps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// ᾱ at `t`, or a parameter error when `t` is outside the schedule.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or_else(|| {
            Error::Parameter(format!(
                "timestep {t} outside schedule of length {}",
                self.alphas_cumprod.len()
            ))
        })
    }
}

pub fn make_noise_schedule(
    train_timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<Schedule> {
    if train_timesteps < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 training timesteps, got {train_timesteps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let n = train_timesteps;
    let betas: Vec<f64> = (0..n)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
        .collect();
    let mut acc = 1.0;
    let alphas_cumprod = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(Schedule {
        params: ScheduleParams {
            train_timesteps,
            beta_start,
            beta_end,
        },
        betas,
        alphas_cumprod,
    })
}

/// A (channels, height, width) image-space latent tagged with its diffusion timestep.
#[derive(Debug, Clone)]
pub struct LatentImage {
    pub data: Tensor,
    pub timestep: usize,
}

impl LatentImage {
    pub fn new(data: Tensor, timestep: usize) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!(
                "latent must be (channels, height, width), got {:?}",
                data.dims()
            )));
        }
        Ok(Self { data, timestep })
    }

    pub fn clean(data: Tensor) -> Result<Self> {
        Self::new(data, 0)
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[1], d[2])
    }
}

fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Forward q-sample: `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`.
pub fn add_noise(
    x0: &LatentImage,
    eps: &Tensor,
    t: usize,
    sched: &Schedule,
) -> Result<LatentImage> {
    ensure_same_shape(&x0.data, eps, "noise shape")?;
    let ab = sched.alpha_bar(t)?;
    let data = ((&x0.data * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?;
    LatentImage::new(data, t)
}

/// Batched q-sample with one timestep per leading-axis item.
pub fn add_noise_batch(
    x0: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    sched: &Schedule,
) -> Result<Tensor> {
    ensure_same_shape(x0, eps, "noise shape")?;
    let b = x0.dim(0)?;
    if ts.len() != b {
        return Err(Error::Shape(format!(
            "{} timesteps for batch of {b}",
            ts.len()
        )));
    }
    let mut signal = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(b);
    for &t in ts {
        let ab = sched.alpha_bar(t)?;
        signal.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let mut shape = vec![1; x0.rank()];
    shape[0] = b;
    let dev = x0.device();
    let signal = Tensor::from_vec(signal, shape.as_slice(), dev)?.to_dtype(x0.dtype())?;
    let noise = Tensor::from_vec(noise, shape.as_slice(), dev)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

fn ddim_move(
    x: &Tensor,
    eps_hat: &Tensor,
    from: usize,
    to: usize,
    sched: &Schedule,
) -> Result<Tensor> {
    ensure_same_shape(x, eps_hat, "predicted noise shape")?;
    let a_from = sched.alpha_bar(from)?;
    let a_to = sched.alpha_bar(to)?;
    let x0_hat = ((x - (eps_hat * (1.0 - a_from).sqrt())?)? / a_from.sqrt())?;
    Ok(((x0_hat * a_to.sqrt())? + (eps_hat * (1.0 - a_to).sqrt())?)?)
}

/// Deterministic (η = 0) DDIM inversion from `t` up to `t_next`.
pub fn ddim_invert_step(
    x_t: &LatentImage,
    eps_hat: &Tensor,
    t: usize,
    t_next: usize,
    sched: &Schedule,
) -> Result<LatentImage> {
    if t_next < t {
        return Err(Error::Parameter(format!(
            "inversion must move forward in time, got {t} -> {t_next}"
        )));
    }
    if t_next == t {
        sched.alpha_bar(t)?;
        return LatentImage::new(x_t.data.clone(), t);
    }
    LatentImage::new(ddim_move(&x_t.data, eps_hat, t, t_next, sched)?, t_next)
}

/// Deterministic (η = 0) DDIM denoising from `t` down to `t_prev`.
pub fn ddim_denoise_step(
    x_t: &LatentImage,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &Schedule,
) -> Result<LatentImage> {
    if t_prev > t {
        return Err(Error::Parameter(format!(
            "denoising must move backward in time, got {t} -> {t_prev}"
        )));
    }
    if t_prev == t {
        sched.alpha_bar(t)?;
        return LatentImage::new(x_t.data.clone(), t);
    }
    LatentImage::new(ddim_move(&x_t.data, eps_hat, t, t_prev, sched)?, t_prev)
}
