//! Mask-guided inversion: each category's region follows the trajectory of
//! its own single-category prompt, uncovered pixels follow the null prompt.

use candle_core::{DType, Device, Tensor};

use crate::condition::Prompt;
use crate::data::{LabelMap, IGNORE_INDEX};
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::features::{ConditionPlan, FeaturePair, PlanStep};
use crate::schedule::{ddim_invert_step, LatentImage};

/// One binary mask per category, all at the same resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    categories: Vec<String>,
    height: usize,
    width: usize,
    /// (categories, height, width) row-major, values in {0, 1}.
    data: Vec<f32>,
}

impl MaskSet {
    pub fn new(
        categories: Vec<String>,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Parameter(
                "mask set needs at least one category".into(),
            ));
        }
        if data.len() != categories.len() * height * width {
            return Err(Error::Shape(format!(
                "{} mask values for {} categories at {height}x{width}",
                data.len(),
                categories.len()
            )));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Parameter("category masks must be binary".into()));
        }
        Ok(Self {
            categories,
            height,
            width,
            data,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self, category: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[category * n..(category + 1) * n]
    }

    /// Indices of categories with at least one pixel.
    pub fn present(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&c| self.mask(c).iter().any(|&v| v > 0.0))
            .collect()
    }

    /// Per-pixel mask sum Σ_j M_j.
    pub fn coverage(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut cov = vec![0f32; n];
        for c in 0..self.len() {
            for (a, &m) in cov.iter_mut().zip(self.mask(c)) {
                *a += m;
            }
        }
        cov
    }

    pub fn has_uncovered(&self) -> bool {
        self.coverage().contains(&0.0)
    }

    /// Nearest-neighbour resampling (sample at pixel centres).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter("mask size must be positive".into()));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let src = |o: usize, out: usize, inp: usize| {
            (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1)
        };
        let mut data = Vec::with_capacity(self.len() * height * width);
        for c in 0..self.len() {
            let m = self.mask(c);
            for y in 0..height {
                let sy = src(y, height, self.height);
                for x in 0..width {
                    data.push(m[sy * self.width + src(x, width, self.width)]);
                }
            }
        }
        Self::new(self.categories.clone(), height, width, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Masks as a (categories, H, W) tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.len(), self.height, self.width),
            &Device::Cpu,
        )?)
    }
}

/// Splits a label map into one binary mask per class; ignored pixels belong to no mask.
pub fn decompose_annotation(labels: &LabelMap, class_names: &[String]) -> Result<MaskSet> {
    let cls = class_names.len();
    let n = labels.height * labels.width;
    let mut data = vec![0f32; cls * n];
    for (i, &v) in labels.data.iter().enumerate() {
        if v == IGNORE_INDEX {
            continue;
        }
        if v as usize >= cls {
            return Err(Error::Data(format!("label {v} outside {cls} classes")));
        }
        data[v as usize * n + i] = 1.0;
    }
    MaskSet::new(class_names.to_vec(), labels.height, labels.width, data)
}

/// M_i / Σ_j M_j per pixel as (categories, H, W); zero where no mask covers the pixel.
pub fn coverage_weights(masks: &MaskSet) -> Result<Tensor> {
    let n = masks.height * masks.width;
    let cov = masks.coverage();
    let mut w = Vec::with_capacity(masks.data.len());
    for c in 0..masks.len() {
        w.extend(
            masks
                .mask(c)
                .iter()
                .zip(&cov)
                .map(|(&m, &s)| if s > 0.0 { m / s } else { 0.0 }),
        );
    }
    debug_assert_eq!(w.len(), masks.len() * n);
    Ok(Tensor::from_vec(
        w,
        (masks.len(), masks.height, masks.width),
        &Device::Cpu,
    )?)
}

fn uncovered(masks: &MaskSet) -> Result<Tensor> {
    let u: Vec<f32> = masks
        .coverage()
        .iter()
        .map(|&s| if s == 0.0 { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(
        u,
        (1, masks.height, masks.width),
        &Device::Cpu,
    )?)
}

/// Σ_i w_i ⊙ x_i + u ⊙ x_null over (C, H, W) tensors with (H, W) weight maps.
fn blend(
    masks: &MaskSet,
    present: &[usize],
    items: &[Tensor],
    null: Option<&Tensor>,
) -> Result<Tensor> {
    let weights = coverage_weights(masks)?;
    let mut acc: Option<Tensor> = None;
    for (&c, x) in present.iter().zip(items) {
        let w = weights.narrow(0, c, 1)?.to_dtype(x.dtype())?;
        let term = x.broadcast_mul(&w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    if masks.has_uncovered() {
        let x = null.ok_or_else(|| Error::State("uncovered pixels without a null pass".into()))?;
        let term = x.broadcast_mul(&uncovered(masks)?.to_dtype(x.dtype())?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| Error::State("nothing to blend".into()))
}

/// Path-controlled trajectory driven by a fixed mask set at latent resolution.
pub struct PathControlled {
    masks: MaskSet,
}

impl PathControlled {
    pub fn new(masks: &MaskSet) -> Result<Self> {
        Ok(Self {
            masks: masks.clone(),
        })
    }
}

impl ConditionPlan for PathControlled {
    fn query(
        &self,
        model: &DiffusionModel,
        latent: &LatentImage,
        t_next: Option<usize>,
        layers: Option<&[usize]>,
    ) -> Result<PlanStep> {
        let masks = &self.masks;
        if masks.spatial() != latent.spatial() {
            return Err(Error::Shape(format!(
                "masks at {:?} but latent at {:?}",
                masks.spatial(),
                latent.spatial()
            )));
        }
        let present = masks.present();
        let need_null = masks.has_uncovered();
        let mut prompts: Vec<Prompt> = present
            .iter()
            .map(|&c| Prompt::single(masks.categories[c].clone()))
            .collect();
        if need_null {
            prompts.push(Prompt::Null);
        }
        let t = latent.timestep;
        let capture = layers.is_some();
        let mut candidates = Vec::with_capacity(prompts.len());
        let mut captures = Vec::with_capacity(prompts.len());
        for prompt in &prompts {
            let cond = model.embed_condition(prompt)?;
            let out = model.predict_noise(latent, t, &cond, capture)?;
            if let Some(tn) = t_next {
                candidates
                    .push(ddim_invert_step(latent, &out.eps_hat, t, tn, model.schedule())?.data);
            }
            captures.push(out.captured);
        }
        let split = |v: &[Tensor]| -> (Vec<Tensor>, Option<Tensor>) {
            if need_null {
                (v[..v.len() - 1].to_vec(), v.last().cloned())
            } else {
                (v.to_vec(), None)
            }
        };
        let next = match t_next {
            Some(tn) => {
                let (cat, null) = split(&candidates);
                Some(LatentImage::new(
                    blend(masks, &present, &cat, null.as_ref())?,
                    tn,
                )?)
            }
            None => None,
        };
        let features = match layers {
            None => None,
            Some(ls) => {
                let mut pairs = Vec::with_capacity(ls.len());
                for &l in ls {
                    let mut inter = Vec::with_capacity(captures.len());
                    let mut cross = Vec::with_capacity(captures.len());
                    for caps in &captures {
                        let cap = &caps.as_ref().expect("capture requested")[l];
                        inter.push(cap.inter.squeeze(0)?);
                        cross.push(cap.cross.squeeze(0)?);
                    }
                    let (_, h, w) = inter[0].dims3()?;
                    let local = masks.resize_nearest(h, w)?;
                    let (ci, ni) = split(&inter);
                    let (cc, nc) = split(&cross);
                    pairs.push(FeaturePair::new(
                        blend(&local, &present, &ci, ni.as_ref())?,
                        blend(&local, &present, &cc, nc.as_ref())?,
                    )?);
                }
                Some(pairs)
            }
        };
        Ok(PlanStep { next, features })
    }
}

/// One path-controlled inversion step from `latent.timestep` to `t_next`.
pub fn fused_step(
    model: &DiffusionModel,
    latent: &LatentImage,
    masks: &MaskSet,
    t_next: usize,
) -> Result<LatentImage> {
    PathControlled::new(masks)?
        .query(model, latent, Some(t_next), None)?
        .next
        .ok_or_else(|| Error::State("fused step produced no latent".into()))
}

/// Mask set covering every pixel with a single category.
pub fn full_mask(
    categories: Vec<String>,
    category: usize,
    height: usize,
    width: usize,
) -> Result<MaskSet> {
    let n = height * width;
    let mut data = vec![0f32; categories.len() * n];
    data[category * n..(category + 1) * n].fill(1.0);
    MaskSet::new(categories, height, width, data)
}

/// Checks that a weight tensor is a partition of unity on covered pixels.
pub fn coverage_sums(masks: &MaskSet) -> Result<Vec<f32>> {
    Ok(coverage_weights(masks)?
        .to_dtype(DType::F32)?
        .sum(0)?
        .flatten_all()?
        .to_vec1::<f32>()?)
}
