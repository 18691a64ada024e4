//! The conditional denoiser as a whole: weights, schedule, vocabulary,
//! pretraining, freezing and the on-disk checkpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionEmbedder, ConditionEmbedding, Prompt, Vocabulary, DEFAULT_TOKENS};
use crate::error::{Error, Result};
use crate::nn::{checksum_tensors, VarStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::{add_noise_batch, LatentImage, Schedule, ScheduleParams};
use crate::unet::{LayerCapture, UNet, UNetConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleParams,
    /// Prompt length K.
    pub tokens: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            schedule: ScheduleParams::default(),
            tokens: DEFAULT_TOKENS,
        }
    }
}

/// Raw denoiser output for a single latent.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// Same shape as the input latent.
    pub eps_hat: Tensor,
    /// One entry per decoder layer when capture was requested; batch axis of size 1.
    pub captured: Option<Vec<LayerCapture>>,
}

struct Weights {
    store: VarStore,
    unet: UNet,
    embedder: ConditionEmbedder,
    frozen: Option<Frozen>,
}

struct Frozen {
    unet: UNet,
    embedder: ConditionEmbedder,
    checksum: String,
}

pub struct DiffusionModel {
    config: DiffusionConfig,
    schedule: Schedule,
    vocab: Vocabulary,
    weights: Option<Weights>,
    passes: AtomicUsize,
}

impl DiffusionModel {
    /// Creates a model with no weights; call [`DiffusionModel::initialize`] or load a checkpoint.
    pub fn new(config: DiffusionConfig, vocab: Vocabulary) -> Result<Self> {
        config.unet.validate()?;
        if config.tokens < 1 {
            return Err(Error::Parameter("need at least one condition token".into()));
        }
        let schedule = Schedule::new(config.schedule)?;
        Ok(Self {
            config,
            schedule,
            vocab,
            weights: None,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn initialize(&mut self, seed: u64) -> Result<()> {
        let mut store = VarStore::new(seed, DType::F32);
        let (unet, embedder) = self.build(&mut store)?;
        self.weights = Some(Weights {
            store,
            unet,
            embedder,
            frozen: None,
        });
        Ok(())
    }

    pub fn initialized(config: DiffusionConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, vocab)?;
        m.initialize(seed)?;
        Ok(m)
    }

    fn build(&self, store: &mut VarStore) -> Result<(UNet, ConditionEmbedder)> {
        let mut root = store.root();
        let unet = UNet::new(&mut root.pp("unet"), &self.config.unet)?;
        let embedder = ConditionEmbedder::new(
            &mut root.pp("cond"),
            self.vocab.clone(),
            self.config.unet.cond_dim,
            self.config.tokens,
        )?;
        Ok((unet, embedder))
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    pub fn decoder_layers(&self) -> usize {
        self.config.unet.decoder_layers()
    }

    fn weights(&self) -> Result<&Weights> {
        self.weights
            .as_ref()
            .ok_or_else(|| Error::State("diffusion model has no weights".into()))
    }

    pub fn is_initialized(&self) -> bool {
        self.weights.is_some()
    }

    pub fn is_frozen(&self) -> bool {
        self.weights.as_ref().is_some_and(|w| w.frozen.is_some())
    }

    /// Switches inference to untracked views of the weights and records their checksum.
    pub fn freeze(&mut self) -> Result<()> {
        let mut detached = self.weights()?.store.detached();
        let (unet, embedder) = self.build(&mut detached)?;
        let w = self.weights.as_mut().expect("checked above");
        let checksum = w.store.checksum()?;
        w.frozen = Some(Frozen {
            unet,
            embedder,
            checksum,
        });
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        self.weights()?.store.checksum()
    }

    /// Checksum recorded at freeze time.
    pub fn frozen_checksum(&self) -> Option<&str> {
        self.weights
            .as_ref()
            .and_then(|w| w.frozen.as_ref())
            .map(|f| f.checksum.as_str())
    }

    /// Checksums of the denoiser and condition-embedder weights, keyed by group name.
    pub fn group_checksums(&self) -> Result<BTreeMap<String, String>> {
        let store = &self.weights()?.store;
        let mut out = BTreeMap::new();
        for (group, prefix) in [("denoiser", "unet."), ("condition_embedder", "cond.")] {
            let sum = checksum_tensors(
                store
                    .vars()
                    .iter()
                    .filter(|(k, _)| k.starts_with(prefix))
                    .map(|(k, v)| (k.as_str(), v.as_tensor())),
            )?;
            out.insert(group.to_string(), sum);
        }
        Ok(out)
    }

    /// Number of single-latent denoiser evaluations performed so far.
    pub fn denoiser_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn store(&self) -> Result<&VarStore> {
        Ok(&self.weights()?.store)
    }

    fn active(&self) -> Result<(&UNet, &ConditionEmbedder)> {
        let w = self.weights()?;
        Ok(match &w.frozen {
            Some(f) => (&f.unet, &f.embedder),
            None => (&w.unet, &w.embedder),
        })
    }

    pub fn embed_condition(&self, prompt: &Prompt) -> Result<ConditionEmbedding> {
        self.active()?.1.embed(prompt)
    }

    pub fn predict_noise(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: &ConditionEmbedding,
        capture: bool,
    ) -> Result<DenoiserOutput> {
        if x_t.timestep != t {
            return Err(Error::Parameter(format!(
                "latent is at timestep {} but was queried at {t}",
                x_t.timestep
            )));
        }
        self.schedule.alpha_bar(t)?;
        let (eps, captured) = self.predict_noise_batch(
            &x_t.data.unsqueeze(0)?,
            &[t],
            &cond.tokens.unsqueeze(0)?,
            capture,
        )?;
        Ok(DenoiserOutput {
            eps_hat: eps.squeeze(0)?,
            captured,
        })
    }

    /// Batched denoiser call on (B, C, H, W) with contexts (B, K, d_cond).
    pub fn predict_noise_batch(
        &self,
        x: &Tensor,
        ts: &[usize],
        ctx: &Tensor,
        capture: bool,
    ) -> Result<(Tensor, Option<Vec<LayerCapture>>)> {
        let (unet, _) = self.active()?;
        let x = x.to_dtype(DType::F32)?;
        self.passes.fetch_add(x.dim(0)?, Ordering::Relaxed);
        unet.forward(&x, ts, &ctx.to_dtype(DType::F32)?, capture)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let w = self.weights()?;
        let mut meta = self.metadata()?;
        meta.extend(extra.clone());
        write_safetensors(path, &w.store.tensors(), meta)
    }

    pub fn metadata(&self) -> Result<HashMap<String, String>> {
        let mut meta = HashMap::new();
        meta.insert(
            "format_version".into(),
            CHECKPOINT_FORMAT_VERSION.to_string(),
        );
        meta.insert(
            "diffusion_config".into(),
            serde_json::to_string(&self.config)?,
        );
        meta.insert("vocab".into(), serde_json::to_string(&self.vocab)?);
        Ok(meta)
    }

    pub fn load(path: &Path) -> Result<(Self, HashMap<String, String>)> {
        let (tensors, meta) = read_safetensors(path)?;
        let model = Self::from_parts(&tensors, &meta, "")?;
        Ok((model, meta))
    }

    /// Rebuilds a model from checkpoint tensors whose names carry `prefix`.
    pub fn from_parts(
        tensors: &BTreeMap<String, Tensor>,
        meta: &HashMap<String, String>,
        prefix: &str,
    ) -> Result<Self> {
        check_format_version(meta)?;
        let config: DiffusionConfig = serde_json::from_str(meta_field(meta, "diffusion_config")?)?;
        let vocab: Vocabulary = serde_json::from_str(meta_field(meta, "vocab")?)?;
        let mut model = Self::new(config, vocab)?;
        model.initialize(0)?;
        let own: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        model
            .weights
            .as_mut()
            .expect("initialized above")
            .store
            .assign(&own)?;
        Ok(model)
    }
}

pub fn meta_field<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
}

pub fn check_format_version(meta: &HashMap<String, String>) -> Result<()> {
    let v = meta_field(meta, "format_version")?;
    if v != CHECKPOINT_FORMAT_VERSION.to_string() {
        return Err(Error::Format(format!(
            "checkpoint format version {v}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    Ok(())
}

pub fn write_safetensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    meta: HashMap<String, String>,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(contiguous, Some(meta), path)
        .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
}

pub fn read_safetensors(
    path: &Path,
) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::Format(format!("reading {}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok((tensors, meta))
}

/// One pretraining example: an image in [-1, 1] and the category names it shows.
#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub image: Tensor,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub optimizer: AdamWConfig,
    /// Probability of replacing a caption with the null prompt so the null row is trained.
    pub null_prompt_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig {
                lr: 1e-3,
                warmup_steps: 100,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            null_prompt_prob: 0.1,
        }
    }
}

/// Owns the optimizer used to pretrain a [`DiffusionModel`].
pub struct Pretrainer {
    config: PretrainConfig,
    opt: AdamW,
}

impl Pretrainer {
    pub fn new(model: &DiffusionModel, config: PretrainConfig) -> Result<Self> {
        let opt = AdamW::new(model.weights()?.store.vars(), config.optimizer)?;
        Ok(Self { config, opt })
    }

    pub fn steps_taken(&self) -> usize {
        self.opt.step_count()
    }

    /// One noise-prediction MSE update; returns the batch loss.
    pub fn step(
        &mut self,
        model: &mut DiffusionModel,
        batch: &[CaptionedImage],
        seed: u64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty pretraining batch".into()));
        }
        if model.is_frozen() {
            return Err(Error::State("cannot pretrain a frozen denoiser".into()));
        }
        let w = model.weights()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_max = model.schedule.train_timesteps();
        let images = batch
            .iter()
            .map(|b| b.image.to_dtype(DType::F32))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let x0 = Tensor::stack(&images, 0)?;
        let mut ts = Vec::with_capacity(batch.len());
        let mut ctxs = Vec::with_capacity(batch.len());
        for item in batch {
            ts.push(rng.random_range(0..t_max));
            let prompt = if rng.random::<f64>() < self.config.null_prompt_prob
                || item.categories.is_empty()
            {
                Prompt::Null
            } else {
                Prompt::Categories(item.categories.clone())
            };
            ctxs.push(w.embedder.embed(&prompt)?.tokens);
        }
        let noise: Vec<f32> = (0..x0.elem_count())
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let eps = Tensor::from_vec(noise, x0.dims(), x0.device())?;
        let x_t = add_noise_batch(&x0, &eps, &ts, &model.schedule)?;
        let ctx = Tensor::stack(&ctxs, 0)?;
        let (pred, _) = w.unet.forward(&x_t, &ts, &ctx, false)?;
        let loss = (pred - &eps)?.sqr()?.mean_all()?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::Numeric("pretraining loss".into()));
        }
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::LatentImage;

    pub(crate) fn tiny_config() -> DiffusionConfig {
        DiffusionConfig {
            unet: UNetConfig {
                base_width: 8,
                cond_dim: 8,
                heads: 2,
                ..UNetConfig::default()
            },
            ..DiffusionConfig::default()
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(["background", "circle", "square", "triangle"]).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..3 * 16 * 16)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(v, (3, 16, 16), &Device::Cpu).unwrap()
    }

    #[test]
    fn uninitialized_model_is_a_state_error() {
        let m = DiffusionModel::new(tiny_config(), vocab()).unwrap();
        let x = LatentImage::new(image(0), 5).unwrap();
        let cond = ConditionEmbedding {
            tokens: Tensor::zeros((8, 8), DType::F32, &Device::Cpu).unwrap(),
            is_null: true,
        };
        assert!(matches!(
            m.predict_noise(&x, 5, &cond, false),
            Err(Error::State(_))
        ));
        assert!(matches!(
            m.embed_condition(&Prompt::Null),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn predict_is_deterministic_and_shape_preserving() {
        let m = DiffusionModel::initialized(tiny_config(), vocab(), 1).unwrap();
        let x = LatentImage::new(image(0), 7).unwrap();
        let cond = m.embed_condition(&Prompt::single("circle")).unwrap();
        let a = m.predict_noise(&x, 7, &cond, true).unwrap();
        let b = m.predict_noise(&x, 7, &cond, true).unwrap();
        assert_eq!(a.eps_hat.dims(), x.data.dims());
        let va = a.eps_hat.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = b.eps_hat.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.captured.unwrap().len(), 6);
        assert!(m.predict_noise(&x, 8, &cond, false).is_err());
    }

    #[test]
    fn pretrain_loss_finite_and_reproducible() {
        let batch = vec![
            CaptionedImage {
                image: image(1),
                categories: vec!["circle".into()],
            },
            CaptionedImage {
                image: image(2),
                categories: vec!["square".into(), "triangle".into()],
            },
        ];
        let run = || {
            let mut m = DiffusionModel::initialized(tiny_config(), vocab(), 3).unwrap();
            let mut p = Pretrainer::new(&m, PretrainConfig::default()).unwrap();
            let l1 = p.step(&mut m, &batch, 10).unwrap();
            let l2 = p.step(&mut m, &batch, 11).unwrap();
            (l1, l2, m.checksum().unwrap())
        };
        let a = run();
        assert!(a.0.is_finite() && a.0 >= 0.0);
        assert_eq!(a, run());

        let mut m = DiffusionModel::initialized(tiny_config(), vocab(), 3).unwrap();
        let mut p = Pretrainer::new(&m, PretrainConfig::default()).unwrap();
        assert!(matches!(p.step(&mut m, &[], 0), Err(Error::Parameter(_))));
        m.freeze().unwrap();
        assert!(matches!(p.step(&mut m, &batch, 0), Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        let m = DiffusionModel::initialized(tiny_config(), vocab(), 4).unwrap();
        m.save(&path, &BTreeMap::new()).unwrap();
        let (loaded, _) = DiffusionModel::load(&path).unwrap();
        assert_eq!(loaded.checksum().unwrap(), m.checksum().unwrap());
        assert_eq!(loaded.vocab(), m.vocab());
        assert_eq!(loaded.schedule(), m.schedule());

        let mut extra = BTreeMap::new();
        extra.insert("format_version".to_string(), "999".to_string());
        m.save(&path, &extra).unwrap();
        assert!(matches!(DiffusionModel::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn freezing_detaches_inference() {
        let mut m = DiffusionModel::initialized(tiny_config(), vocab(), 1).unwrap();
        m.freeze().unwrap();
        assert!(m.is_frozen());
        assert_eq!(m.frozen_checksum().unwrap(), m.checksum().unwrap());
        let x = LatentImage::new(image(0), 3).unwrap();
        let cond = m.embed_condition(&Prompt::Null).unwrap();
        let out = m.predict_noise(&x, 3, &cond, false).unwrap();
        // No variable is reachable from a frozen forward pass.
        let grads = out.eps_hat.sum_all().unwrap().backward().unwrap();
        for var in m.store().unwrap().vars().values() {
            assert!(grads.get(var.as_tensor()).is_none());
        }
    }
}
