//! Dual-branch training: a mask-conditioned teacher branch and an unconditional
//! student branch share one fusion block and one segmentation head. Prediction
//! always goes through the unconditional branch.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{FeatureCache, FeatureExtractor};
use crate::data::{LabelMap, Sample};
use crate::diffusion::{meta_field, read_safetensors, write_safetensors, DiffusionModel};
use crate::error::{Error, Result};
use crate::features::{align_and_concat, FusionBlock, TrajectoryConfig};
use crate::nn::{self, Conv2d, GroupNorm, VarPath, VarStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::path_control::{decompose_annotation, MaskSet};
use crate::seg::{
    combine, conditional_loss, consistency_loss, total_loss, ConsistencyKind, LossRecord, SegHead,
    SegmentationLogits,
};

pub const TRAINER_FORMAT_VERSION: u32 = 1;

/// What a training step optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Conditional cross-entropy plus teacher→student consistency.
    Ipkl,
    /// Conditional cross-entropy only; the student branch is not evaluated.
    ConditionalOnly,
    /// Cross-entropy on the unconditional branch (diffusion features without IPKL).
    UnconditionalOnly,
    /// Cross-entropy on a plain convolutional encoder of the raw image.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub objective: Objective,
    pub consistency: ConsistencyKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub fusion_width: usize,
    pub head_width: usize,
    pub batch_size: usize,
    pub flip_prob: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Ipkl,
            consistency: ConsistencyKind::L2,
            lambda1: 1.0,
            lambda2: 1.0,
            fusion_width: 64,
            head_width: 64,
            batch_size: 4,
            flip_prob: 0.5,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if self.fusion_width == 0 || self.head_width == 0 {
            return Err(Error::Parameter(
                "fusion and head widths must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Parameter(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw-image encoder for the baseline arm: a 3×3 stem followed by `depth`
/// 3×3 conv-norm-SiLU blocks.
#[derive(Debug, Clone)]
pub struct BaselineEncoder {
    stem: Conv2d,
    stem_norm: GroupNorm,
    blocks: Vec<(Conv2d, GroupNorm)>,
}

impl BaselineEncoder {
    pub fn new(vs: &mut VarPath, in_channels: usize, width: usize, depth: usize) -> Result<Self> {
        let stem = Conv2d::new(&mut vs.pp("stem"), in_channels, width, 3)?;
        let stem_norm = GroupNorm::new(&mut vs.pp("stem_norm"), width)?;
        let blocks = (0..depth)
            .map(|i| {
                Ok((
                    Conv2d::new(&mut vs.pp(format!("block{i}.conv")), width, width, 3)?,
                    GroupNorm::new(&mut vs.pp(format!("block{i}.norm")), width)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem,
            stem_norm,
            blocks,
        })
    }

    pub fn param_count(in_channels: usize, width: usize, depth: usize) -> usize {
        let stem = 9 * in_channels * width + width + 2 * width;
        stem + depth * (9 * width * width + width + 2 * width)
    }

    /// Depth whose parameter count is closest to `target` (at least one block).
    pub fn matched_depth(in_channels: usize, width: usize, target: usize) -> usize {
        (1..64)
            .min_by_key(|&d| Self::param_count(in_channels, width, d).abs_diff(target))
            .expect("nonempty range")
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = nn::silu(&self.stem_norm.forward(&self.stem.forward(x)?)?)?;
        for (conv, norm) in &self.blocks {
            h = nn::silu(&norm.forward(&conv.forward(&h)?)?)?;
        }
        Ok(h)
    }
}

pub fn fusion_param_count(in_channels: usize, width: usize) -> usize {
    in_channels * width + width + 2 * width + 9 * width * width + width + 2 * width
}

#[derive(Debug, Clone)]
enum Encoder {
    Fusion(FusionBlock),
    Baseline(BaselineEncoder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// The trainable modules as seen from one branch.
pub struct BranchView<'a> {
    pub branch: Branch,
    pub fusion: &'a FusionBlock,
    pub head: &'a SegHead,
}

impl BranchView<'_> {
    /// Logits for stacked features (B, C, H, W).
    pub fn logits(&self, stacked: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = stacked.dims4()?;
        self.head.forward(&self.fusion.forward(stacked)?, h, w)
    }
}

/// Gradient norms observed at the last update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub frozen_norm: f64,
    pub trainable_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeReport {
    /// Group name → whether its checksum still matches.
    pub groups: BTreeMap<String, bool>,
}

impl FreezeReport {
    pub fn passed(&self) -> bool {
        self.groups.values().all(|&ok| ok)
    }
}

pub struct IpklTrainer {
    config: TrainerConfig,
    classes: Vec<String>,
    extractor: Arc<FeatureExtractor>,
    store: VarStore,
    encoder: Encoder,
    head: SegHead,
    optimizer: AdamW,
    step: usize,
    frozen_reference: BTreeMap<String, String>,
    last_grads: Option<GradReport>,
}

fn grad_norm<'a>(
    vars: impl Iterator<Item = &'a candle_core::Var>,
    grads: &GradStore,
) -> Result<f64> {
    let mut acc = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            acc += g
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
    }
    Ok(acc.sqrt())
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

impl IpklTrainer {
    pub fn new(
        extractor: Arc<FeatureExtractor>,
        classes: Vec<String>,
        config: TrainerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if classes.len() < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        let model = extractor.model();
        let layout = model.config().unet.decoder_layout();
        let in_channels = extractor
            .trajectory()
            .stacked_channels(&layout, model.config().tokens);
        let mut store = VarStore::new(config.seed, DType::F32);
        let (encoder, head) = {
            let mut root = store.root();
            let encoder = match config.objective {
                Objective::Baseline => {
                    let c_img = model.config().unet.in_channels;
                    let target = fusion_param_count(in_channels, config.fusion_width);
                    let depth = BaselineEncoder::matched_depth(c_img, config.fusion_width, target);
                    Encoder::Baseline(BaselineEncoder::new(
                        &mut root.pp("baseline"),
                        c_img,
                        config.fusion_width,
                        depth,
                    )?)
                }
                _ => Encoder::Fusion(FusionBlock::new(
                    &mut root.pp("fusion"),
                    in_channels,
                    config.fusion_width,
                )?),
            };
            let head = SegHead::new(
                &mut root.pp("head"),
                config.fusion_width,
                config.head_width,
                classes.len(),
            )?;
            (encoder, head)
        };
        let optimizer = AdamW::new(store.vars(), config.optimizer)?;
        let frozen_reference = model.group_checksums()?;
        Ok(Self {
            config,
            classes,
            extractor,
            store,
            encoder,
            head,
            optimizer,
            step: 0,
            frozen_reference,
            last_grads: None,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn extractor(&self) -> &Arc<FeatureExtractor> {
        &self.extractor
    }

    pub fn model(&self) -> &DiffusionModel {
        self.extractor.model()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn trainable(&self) -> &VarStore {
        &self.store
    }

    pub fn last_grads(&self) -> Option<GradReport> {
        self.last_grads
    }

    pub fn trainable_checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Both branches resolve to the same module instances.
    pub fn branch(&self, branch: Branch) -> Result<BranchView<'_>> {
        match &self.encoder {
            Encoder::Fusion(fusion) => Ok(BranchView {
                branch,
                fusion,
                head: &self.head,
            }),
            Encoder::Baseline(_) => Err(Error::State(
                "the baseline arm has no diffusion branches".into(),
            )),
        }
    }

    /// Recomputes the frozen group checksums and compares them with those taken at construction.
    pub fn freeze_check(&self) -> Result<FreezeReport> {
        let now = self.model().group_checksums()?;
        let groups = self
            .frozen_reference
            .iter()
            .map(|(k, v)| (k.clone(), now.get(k) == Some(v)))
            .collect();
        Ok(FreezeReport { groups })
    }

    fn stacked(&self, image: &Tensor, condition: Option<&MaskSet>, flip: bool) -> Result<Tensor> {
        let bundle = self.extractor.bundle(image, condition)?;
        let x = align_and_concat(&bundle)?;
        Ok(if flip { x.flip(&[2])? } else { x })
    }

    fn encode(&self, stacked: &Tensor) -> Result<Tensor> {
        match &self.encoder {
            Encoder::Fusion(f) => f.forward(stacked),
            Encoder::Baseline(b) => b.forward(stacked),
        }
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.head.forward(&self.encode(x)?, h, w)
    }

    fn batch_inputs(&self, batch: &[Sample], flips: &[bool], condition: bool) -> Result<Tensor> {
        let items = batch
            .iter()
            .zip(flips)
            .map(|(s, &flip)| {
                if self.config.objective == Objective::Baseline {
                    return Ok(if flip {
                        s.image.flip(&[2])?
                    } else {
                        s.image.clone()
                    });
                }
                let masks = if condition {
                    Some(decompose_annotation(&s.labels, &self.classes)?)
                } else {
                    None
                };
                self.stacked(&s.image, masks.as_ref(), flip)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&items, 0)?)
    }

    /// One optimizer update on a batch of labelled images.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty training batch".into()));
        }
        let report = self.freeze_check()?;
        if !report.passed() {
            return Err(Error::State(format!(
                "frozen weights changed: {:?}",
                report.groups
            )));
        }
        let mut rng = step_rng(self.config.seed, self.step);
        let flips: Vec<bool> = batch
            .iter()
            .map(|_| rng.random_bool(self.config.flip_prob))
            .collect();
        let labels: Vec<LabelMap> = batch
            .iter()
            .zip(&flips)
            .map(|(s, &f)| {
                if f {
                    s.labels.flip_horizontal()
                } else {
                    s.labels.clone()
                }
            })
            .collect();
        let c = &self.config;
        let (l_condit, l_consis) = match c.objective {
            Objective::Ipkl => {
                let teacher = self.logits(&self.batch_inputs(batch, &flips, true)?)?;
                let condit = conditional_loss(&teacher, &labels)?.value;
                let student_in = self.batch_inputs(batch, &flips, false)?;
                let consis = if c.lambda2 == 0.0 {
                    let student = self.logits(&student_in)?.detach();
                    consistency_loss(&teacher.detach(), &student, c.consistency)?
                } else {
                    let student = self.logits(&student_in)?;
                    consistency_loss(&teacher, &student, c.consistency)?
                };
                (condit, consis)
            }
            Objective::ConditionalOnly => {
                let teacher = self.logits(&self.batch_inputs(batch, &flips, true)?)?;
                let condit = conditional_loss(&teacher, &labels)?.value;
                let zero = condit.zeros_like()?;
                (condit, zero)
            }
            Objective::UnconditionalOnly | Objective::Baseline => {
                let student = self.logits(&self.batch_inputs(batch, &flips, false)?)?;
                let condit = conditional_loss(&student, &labels)?.value;
                let zero = condit.zeros_like()?;
                (condit, zero)
            }
        };
        let scalar =
            |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let mut record = total_loss(scalar(&l_condit)?, scalar(&l_consis)?, c.lambda1, c.lambda2)?;
        let loss = combine(&l_condit, &l_consis, c.lambda1, c.lambda2)?;
        // Log the value that is actually backpropagated.
        record.l_final = scalar(&loss)?;
        if !record.l_final.is_finite() {
            return Err(Error::Numeric(format!("l_final is {}", record.l_final)));
        }
        let grads = loss.backward()?;
        self.last_grads = Some(GradReport {
            frozen_norm: grad_norm(self.model().store()?.vars().values(), &grads)?,
            trainable_norm: grad_norm(self.store.vars().values(), &grads)?,
        });
        self.optimizer.step(&grads)?;
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` updates on batches drawn from `data`, calling `on_step` after each.
    pub fn fit(
        &mut self,
        data: &[Sample],
        steps: usize,
        mut on_step: impl FnMut(usize, &LossRecord),
    ) -> Result<Vec<LossRecord>> {
        if data.is_empty() {
            return Err(Error::Parameter("no training data".into()));
        }
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut rng = step_rng(self.config.seed ^ 0x5eed, self.step);
            let batch: Vec<Sample> = (0..self.config.batch_size)
                .map(|_| data[rng.random_range(0..data.len())].clone())
                .collect();
            let rec = self.train_step(&batch)?;
            on_step(self.step, &rec);
            log.push(rec);
        }
        Ok(log)
    }

    /// Logits for one (3, H, W) image through the unconditional branch.
    pub fn logits_unconditional(&self, image: &Tensor) -> Result<SegmentationLogits> {
        let x = if self.config.objective == Objective::Baseline {
            image.clone()
        } else {
            self.stacked(image, None, false)?
        };
        let (_, h, w) = image.dims3()?;
        let out = self.logits(&x.unsqueeze(0)?)?.squeeze(0)?;
        debug_assert_eq!(out.dims()[1..], [h, w]);
        Ok(SegmentationLogits { data: out })
    }

    /// Unconditional prediction; consumes no annotation.
    pub fn predict(&self, image: &Tensor) -> Result<LabelMap> {
        self.logits_unconditional(image)?.argmax()
    }

    /// Prediction through the conditional branch given reference masks (diagnostic only).
    pub fn predict_with_reference(&self, image: &Tensor, masks: &MaskSet) -> Result<LabelMap> {
        if self.config.objective == Objective::Baseline {
            return Err(Error::State(
                "the baseline arm has no conditional branch".into(),
            ));
        }
        let x = self.stacked(image, Some(masks), false)?;
        let (_, h, w) = image.dims3()?;
        let out = self
            .head
            .forward(&self.encode(&x.unsqueeze(0)?)?, h, w)?
            .squeeze(0)?;
        SegmentationLogits { data: out }.argmax()
    }

    /// Writes the trainer archive: diffusion weights, trainable weights, optimizer state and metadata.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (k, v) in self.model().store()?.tensors() {
            tensors.insert(format!("diffusion.{k}"), v);
        }
        for (k, v) in self.store.tensors() {
            tensors.insert(format!("trainable.{k}"), v);
        }
        for (k, v) in self.optimizer.state_tensors() {
            tensors.insert(format!("optim.{k}"), v);
        }
        let mut meta = self.model().metadata()?;
        meta.insert(
            "trainer_format_version".into(),
            TRAINER_FORMAT_VERSION.to_string(),
        );
        meta.insert(
            "trainer_config".into(),
            serde_json::to_string(&self.config)?,
        );
        meta.insert(
            "trajectory".into(),
            serde_json::to_string(self.extractor.trajectory())?,
        );
        meta.insert("classes".into(), serde_json::to_string(&self.classes)?);
        meta.insert("step".into(), self.step.to_string());
        meta.insert(
            "frozen_checksums".into(),
            serde_json::to_string(&self.frozen_reference)?,
        );
        meta.extend(extra.clone());
        write_safetensors(path, &tensors, meta)
    }

    /// Restores a trainer archive; the embedded diffusion model is rebuilt and frozen.
    pub fn load(
        path: &Path,
        cache: Option<FeatureCache>,
    ) -> Result<(Self, HashMap<String, String>)> {
        let (tensors, meta) = read_safetensors(path)?;
        let v = meta_field(&meta, "trainer_format_version")?;
        if v != TRAINER_FORMAT_VERSION.to_string() {
            return Err(Error::Format(format!(
                "trainer format version {v}, expected {TRAINER_FORMAT_VERSION}"
            )));
        }
        let mut model = DiffusionModel::from_parts(&tensors, &meta, "diffusion.")?;
        model.freeze()?;
        let config: TrainerConfig = serde_json::from_str(meta_field(&meta, "trainer_config")?)?;
        let trajectory: TrajectoryConfig = serde_json::from_str(meta_field(&meta, "trajectory")?)?;
        let classes: Vec<String> = serde_json::from_str(meta_field(&meta, "classes")?)?;
        let step: usize = meta_field(&meta, "step")?
            .parse()
            .map_err(|e| Error::Format(format!("bad step: {e}")))?;
        let extractor = FeatureExtractor::new(Arc::new(model), trajectory)?
            .with_disk_cache(cache)
            .with_memo();
        let mut trainer = Self::new(Arc::new(extractor), classes, config)?;
        let saved: BTreeMap<String, String> =
            serde_json::from_str(meta_field(&meta, "frozen_checksums")?)?;
        if saved != trainer.frozen_reference {
            return Err(Error::Format(
                "frozen weights do not match their recorded checksums".into(),
            ));
        }
        let pick = |prefix: &str| -> BTreeMap<String, Tensor> {
            tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        trainer.store.assign(&pick("trainable."))?;
        trainer.optimizer.load_state(&pick("optim."), step)?;
        trainer.step = step;
        Ok((trainer, meta))
    }
}
