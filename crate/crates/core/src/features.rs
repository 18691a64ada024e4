//! Diffusion feature fusion: capture decoder features and cross-attention maps
//! along an inversion trajectory, align them to one grid, concatenate them and
//! fuse them with a trainable convolutional block.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::condition::Prompt;
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, GroupNorm, VarPath};
use crate::path_control::{MaskSet, PathControlled};
use crate::schedule::{ddim_invert_step, LatentImage};

/// Which inversion timesteps are visited and which decoder layers are recorded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub steps: Vec<usize>,
    pub layers: Vec<usize>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            steps: vec![1, 334, 667],
            layers: (0..6).collect(),
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self, train_timesteps: usize, decoder_layers: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Parameter(
                "trajectory needs at least one step".into(),
            ));
        }
        if self.steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter(format!(
                "trajectory steps must be strictly increasing: {:?}",
                self.steps
            )));
        }
        if let Some(&t) = self.steps.iter().find(|&&t| t >= train_timesteps) {
            return Err(Error::Parameter(format!(
                "step {t} outside schedule of length {train_timesteps}"
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Parameter(
                "trajectory needs at least one layer".into(),
            ));
        }
        let mut seen = self.layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.layers.len() {
            return Err(Error::Parameter(format!(
                "duplicate layers in {:?}",
                self.layers
            )));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= decoder_layers) {
            return Err(Error::Parameter(format!(
                "layer {l} out of range for {decoder_layers} decoder layers"
            )));
        }
        Ok(())
    }

    /// Channel count produced by [`align_and_concat`] for a given decoder layout.
    pub fn stacked_channels(&self, layout: &[(usize, usize)], tokens: usize) -> usize {
        self.steps.len()
            * self
                .layers
                .iter()
                .map(|&l| layout[l].0 + tokens)
                .sum::<usize>()
    }
}

/// Intermediate feature and cross-attention map at one (step, layer).
#[derive(Debug, Clone)]
pub struct FeaturePair {
    /// (d_l, h_l, w_l)
    pub inter: Tensor,
    /// (K, h_l, w_l)
    pub cross: Tensor,
}

impl FeaturePair {
    pub fn new(inter: Tensor, cross: Tensor) -> Result<Self> {
        let (_, ih, iw) = inter.dims3()?;
        let (_, ch, cw) = cross.dims3()?;
        if (ih, iw) != (ch, cw) {
            return Err(Error::Shape(format!(
                "feature {:?} and attention map {:?} differ spatially",
                inter.dims(),
                cross.dims()
            )));
        }
        Ok(Self { inter, cross })
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.inter.dims();
        (d[1], d[2])
    }
}

#[derive(Debug, Clone, Default)]
pub struct FeatureBundle {
    entries: BTreeMap<(usize, usize), FeaturePair>,
}

impl FeatureBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: usize, layer: usize, pair: FeaturePair) -> Result<()> {
        if self.entries.contains_key(&(t, layer)) {
            return Err(Error::Parameter(format!(
                "duplicate entry for step {t}, layer {layer}"
            )));
        }
        self.entries.insert((t, layer), pair);
        Ok(())
    }

    pub fn get(&self, t: usize, layer: usize) -> Option<&FeaturePair> {
        self.entries.get(&(t, layer))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in canonical (step ascending, layer ascending) order.
    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &FeaturePair)> {
        self.entries.iter()
    }

    pub fn is_complete(&self, cfg: &TrajectoryConfig) -> bool {
        self.len() == cfg.steps.len() * cfg.layers.len()
            && cfg.steps.iter().all(|&t| {
                cfg.layers
                    .iter()
                    .all(|&l| self.entries.contains_key(&(t, l)))
            })
    }

    /// Mirrors every map along the width axis.
    pub fn flip_horizontal(&self) -> Result<Self> {
        let mut out = Self::new();
        for (&(t, l), pair) in &self.entries {
            out.insert(
                t,
                l,
                FeaturePair::new(pair.inter.flip(&[2])?, pair.cross.flip(&[2])?)?,
            )?;
        }
        Ok(out)
    }
}

/// Result of one denoiser query on the trajectory.
pub struct PlanStep {
    /// Latent advanced to the requested next timestep.
    pub next: Option<LatentImage>,
    /// One pair per requested layer, in request order.
    pub features: Option<Vec<FeaturePair>>,
}

/// How latents advance and features are assembled at each trajectory step.
pub trait ConditionPlan {
    fn query(
        &self,
        model: &DiffusionModel,
        latent: &LatentImage,
        t_next: Option<usize>,
        layers: Option<&[usize]>,
    ) -> Result<PlanStep>;
}

/// Plain DDIM inversion under a single prompt (the null prompt for the unconditional branch).
pub struct SinglePrompt(pub Prompt);

impl ConditionPlan for SinglePrompt {
    fn query(
        &self,
        model: &DiffusionModel,
        latent: &LatentImage,
        t_next: Option<usize>,
        layers: Option<&[usize]>,
    ) -> Result<PlanStep> {
        let cond = model.embed_condition(&self.0)?;
        let t = latent.timestep;
        let out = model.predict_noise(latent, t, &cond, layers.is_some())?;
        let next = match t_next {
            Some(tn) => Some(ddim_invert_step(
                latent,
                &out.eps_hat,
                t,
                tn,
                model.schedule(),
            )?),
            None => None,
        };
        let features = match (layers, out.captured) {
            (Some(ls), Some(caps)) => Some(
                ls.iter()
                    .map(|&l| {
                        FeaturePair::new(caps[l].inter.squeeze(0)?, caps[l].cross.squeeze(0)?)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        Ok(PlanStep { next, features })
    }
}

/// Runs the inversion trajectory from a clean image and records features at every configured (step, layer).
pub fn capture_features(
    model: &DiffusionModel,
    image: &LatentImage,
    plan: &dyn ConditionPlan,
    cfg: &TrajectoryConfig,
) -> Result<FeatureBundle> {
    if !model.is_frozen() {
        return Err(Error::State(
            "feature capture requires a frozen denoiser".into(),
        ));
    }
    cfg.validate(model.schedule().train_timesteps(), model.decoder_layers())?;
    if image.timestep != 0 {
        return Err(Error::Parameter(format!(
            "trajectory starts from a clean image, got timestep {}",
            image.timestep
        )));
    }
    let mut latent = image.clone();
    if cfg.steps[0] > 0 {
        latent = plan
            .query(model, &latent, Some(cfg.steps[0]), None)?
            .next
            .expect("next latent requested");
    }
    let mut bundle = FeatureBundle::new();
    for (i, &t) in cfg.steps.iter().enumerate() {
        let t_next = cfg.steps.get(i + 1).copied();
        let step = plan.query(model, &latent, t_next, Some(&cfg.layers))?;
        let features = step
            .features
            .ok_or_else(|| Error::State("condition plan returned no features".into()))?;
        for (&l, pair) in cfg.layers.iter().zip(features) {
            bundle.insert(t, l, pair)?;
        }
        if let Some(next) = step.next {
            latent = next;
        }
    }
    Ok(bundle)
}

/// Resizes every map to the finest captured grid and concatenates along channels
/// in (step, layer, intermediate-before-attention) order. Returns (C, H, W).
pub fn align_and_concat(bundle: &FeatureBundle) -> Result<Tensor> {
    if bundle.is_empty() {
        return Err(Error::Parameter(
            "cannot concatenate an empty feature bundle".into(),
        ));
    }
    let (h, w) = bundle
        .iter()
        .map(|(_, p)| p.spatial())
        .max_by_key(|&(h, w)| h * w)
        .expect("nonempty");
    let mut parts = Vec::with_capacity(2 * bundle.len());
    for (_, pair) in bundle.iter() {
        parts.push(nn::resize_bilinear(&pair.inter, h, w)?);
        parts.push(nn::resize_bilinear(&pair.cross, h, w)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Output of the fusion block, (d_out, H, W).
#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub data: Tensor,
}

impl FusedFeature {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims3()?;
        let finite = data
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("fused feature".into()));
        }
        Ok(Self { data })
    }
}

/// 1×1 conv → norm → SiLU → 3×3 conv → norm → SiLU.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    reduce: Conv2d,
    norm1: GroupNorm,
    mix: Conv2d,
    norm2: GroupNorm,
}

impl FusionBlock {
    pub fn new(vs: &mut VarPath, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(&mut vs.pp("reduce"), in_channels, out_channels, 1)?,
            norm1: GroupNorm::new(&mut vs.pp("norm1"), out_channels)?,
            mix: Conv2d::new(&mut vs.pp("mix"), out_channels, out_channels, 3)?,
            norm2: GroupNorm::new(&mut vs.pp("norm2"), out_channels)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.mix.out_channels()
    }

    /// Batched forward on (B, C_in, H, W).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "fusion block expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let h = nn::silu(&self.norm1.forward(&self.reduce.forward(x)?)?)?;
        nn::silu(&self.norm2.forward(&self.mix.forward(&h)?)?)
    }

    pub fn fuse(&self, stacked: &Tensor) -> Result<FusedFeature> {
        stacked.dims3()?;
        FusedFeature::new(self.forward(&stacked.unsqueeze(0)?)?.squeeze(0)?)
    }
}

/// Captures the conditional (mask-guided) or unconditional bundle for an image.
pub fn capture_for_condition(
    model: &DiffusionModel,
    image: &LatentImage,
    condition: Option<&MaskSet>,
    cfg: &TrajectoryConfig,
) -> Result<FeatureBundle> {
    match condition {
        None => capture_features(model, image, &SinglePrompt(Prompt::Null), cfg),
        Some(masks) => capture_features(model, image, &PathControlled::new(masks)?, cfg),
    }
}

/// `fuse(align_and_concat(capture_features(..)))` for one image.
pub fn extract_diffusion_features(
    model: &DiffusionModel,
    fusion: &FusionBlock,
    image: &LatentImage,
    condition: Option<&MaskSet>,
    cfg: &TrajectoryConfig,
) -> Result<FusedFeature> {
    let bundle = capture_for_condition(model, image, condition, cfg)?;
    fusion.fuse(&align_and_concat(&bundle)?)
}
