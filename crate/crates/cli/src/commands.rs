//! The `diffseg` subcommands as library functions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use diffseg_core::benchmark::{run_ablation, run_benchmark, AblationReport, BenchmarkReport};
use diffseg_core::cache::{FeatureCache, FeatureExtractor};
use diffseg_core::condition::Vocabulary;
use diffseg_core::data::{generate_dataset, Dataset, DomainSpec, Manifest};
use diffseg_core::diffusion::{CaptionedImage, DiffusionModel, Pretrainer};
use diffseg_core::features::align_and_concat;
use diffseg_core::path_control::decompose_annotation;
use diffseg_core::seg::LossRecord;
use diffseg_core::trainer::IpklTrainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Seed offset for the held-out evaluation split.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn stamp(cfg: &RunConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config_hash".to_string(), cfg.hash()),
        ("run_config".to_string(), cfg.canonical_json()),
    ])
}

fn record_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write(
        &dir.join("config.json"),
        &serde_json::to_string_pretty(cfg)?,
    )?;
    write(&dir.join("config_hash.txt"), &(cfg.hash() + "\n"))
}

pub fn diffusion_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("pretrain").join("diffusion.safetensors")
}

pub fn trainer_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("train").join("trainer.safetensors")
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// Writes the training split and one held-out split per evaluation domain.
pub fn gen_data(cfg: &RunConfig) -> Result<Vec<(PathBuf, Manifest)>> {
    let d = &cfg.data;
    let mut out = Vec::new();
    let train = DomainSpec::preset(&d.train_domain)?;
    let dir = d.train_dir();
    out.push((
        dir.clone(),
        generate_dataset(&dir, &train, d.train_count, d.image_size, cfg.seed)?,
    ));
    let mut eval_domains = vec![d.source_eval_domain.clone()];
    eval_domains.extend(d.target_domains.iter().cloned());
    eval_domains.dedup();
    for name in eval_domains {
        let spec = DomainSpec::preset(&name)?;
        let dir = d.eval_dir(&name);
        let m = generate_dataset(
            &dir,
            &spec,
            d.eval_count,
            d.image_size,
            cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        )?;
        out.push((dir, m));
    }
    Ok(out)
}

pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
}

/// Trains the conditional denoiser on image/caption pairs from the training split.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    let data = load_dataset(&cfg.data.train_dir())?;
    if data.is_empty() {
        bail!("training split is empty");
    }
    let vocab = Vocabulary::new(data.classes.clone())?;
    let mut model = DiffusionModel::initialized(cfg.diffusion.clone(), vocab, cfg.seed)?;
    let mut pretrainer = Pretrainer::new(&model, cfg.pretrain.pretrain_config())?;
    let captioned: Vec<CaptionedImage> = data
        .samples
        .iter()
        .map(|s| CaptionedImage {
            image: s.image.clone(),
            categories: s
                .labels
                .present_classes()
                .iter()
                .filter_map(|&c| data.classes.get(c as usize).cloned())
                .collect(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.pretrain.steps);
    for step in 0..cfg.pretrain.steps {
        let batch: Vec<CaptionedImage> = (0..cfg.pretrain.batch_size)
            .map(|_| captioned[rng.random_range(0..captioned.len())].clone())
            .collect();
        let loss = pretrainer.step(&mut model, &batch, rng.random())?;
        losses.push(loss);
        if (step + 1) % 100 == 0 {
            let recent = &losses[losses.len() - 100..];
            log::info!(
                "pretrain step {} loss {:.5}",
                step + 1,
                recent.iter().sum::<f64>() / 100.0
            );
        }
    }
    let dir = cfg.out.join("pretrain");
    let checkpoint = diffusion_checkpoint(cfg);
    model.save(&checkpoint, &stamp(cfg))?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(curve, "{},{l:.8}", i + 1)?;
    }
    write(&dir.join("loss_curve.csv"), &curve)?;
    record_config(cfg, &dir)?;
    Ok(PretrainSummary { checkpoint, losses })
}

fn extractor_for(checkpoint: &Path, cfg: &RunConfig) -> Result<Arc<FeatureExtractor>> {
    let (mut model, _) = DiffusionModel::load(checkpoint)
        .with_context(|| format!("loading diffusion checkpoint {}", checkpoint.display()))?;
    model.freeze()?;
    Ok(Arc::new(
        FeatureExtractor::new(Arc::new(model), cfg.trajectory.clone())?
            .with_disk_cache(cfg.feature_cache()?)
            .with_memo(),
    ))
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<LossRecord>,
    pub trainer: IpklTrainer,
}

/// Dual-branch training on the training split with periodic freeze checks and eval snapshots.
pub fn train(cfg: &RunConfig, diffusion: Option<&Path>) -> Result<TrainSummary> {
    let ckpt = diffusion
        .map(Path::to_path_buf)
        .unwrap_or_else(|| diffusion_checkpoint(cfg));
    let data = load_dataset(&cfg.data.train_dir())?;
    let extractor = extractor_for(&ckpt, cfg)?;
    let mut trainer = IpklTrainer::new(extractor, data.classes.clone(), cfg.trainer_config())?;
    let snapshot_set = {
        let dir = cfg.data.eval_dir(&cfg.data.source_eval_domain);
        if dir.exists() && cfg.train.eval_every > 0 {
            let mut d = load_dataset(&dir)?;
            d.samples.truncate(cfg.train.eval_images.max(1));
            Some(d)
        } else {
            None
        }
    };
    let dir = cfg.out.join("train");
    let mut log = Vec::with_capacity(cfg.train.steps);
    let mut csv = String::from("step,l_condit,l_consis,l_final,lambda1,lambda2\n");
    let mut snapshots = String::from("step,dataset,miou,pixel_accuracy\n");
    let chunk = match (cfg.train.freeze_check_every, cfg.train.eval_every) {
        (0, 0) => cfg.train.steps.max(1),
        (0, e) | (e, 0) => e,
        (f, e) => f.min(e),
    };
    while trainer.step_count() < cfg.train.steps {
        let n = chunk.min(cfg.train.steps - trainer.step_count());
        let records = trainer.fit(&data.samples, n, |step, r| {
            if step % 50 == 0 {
                log::info!(
                    "train step {step} l_condit {:.4} l_consis {:.4} l_final {:.4}",
                    r.l_condit,
                    r.l_consis,
                    r.l_final
                );
            }
        })?;
        let first = trainer.step_count() - records.len();
        for (i, r) in records.iter().enumerate() {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                first + i + 1,
                r.l_condit,
                r.l_consis,
                r.l_final,
                r.lambda1,
                r.lambda2
            )?;
        }
        log.extend(records);
        let step = trainer.step_count();
        if cfg.train.freeze_check_every > 0 && step % cfg.train.freeze_check_every == 0 {
            let report = trainer.freeze_check()?;
            if !report.passed() {
                bail!("frozen weights changed by step {step}: {:?}", report.groups);
            }
        }
        if let Some(set) = &snapshot_set {
            if step % cfg.train.eval_every == 0 || step == cfg.train.steps {
                let row = diffseg_core::benchmark::evaluate(&trainer, set, false)?;
                log::info!("snapshot step {step} {} miou {:.4}", set.name, row.miou);
                writeln!(
                    snapshots,
                    "{step},{},{},{}",
                    set.name, row.miou, row.pixel_accuracy
                )?;
            }
        }
    }
    let checkpoint = trainer_checkpoint(cfg);
    trainer.save(&checkpoint, &stamp(cfg))?;
    write(&dir.join("losses.csv"), &csv)?;
    write(&dir.join("snapshots.csv"), &snapshots)?;
    record_config(cfg, &dir)?;
    Ok(TrainSummary {
        checkpoint,
        log,
        trainer,
    })
}

/// Scores a trainer checkpoint on the held-out source split and every target domain.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    with_reference: bool,
) -> Result<BenchmarkReport> {
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| trainer_checkpoint(cfg));
    let (trainer, meta) = IpklTrainer::load(&ckpt, cfg.feature_cache()?)
        .with_context(|| format!("loading trainer checkpoint {}", ckpt.display()))?;
    let source = load_dataset(&cfg.data.eval_dir(&cfg.data.source_eval_domain))?;
    let targets = cfg
        .data
        .target_domains
        .iter()
        .map(|d| load_dataset(&cfg.data.eval_dir(d)))
        .collect::<Result<Vec<_>>>()?;
    let hash = meta
        .get("config_hash")
        .cloned()
        .unwrap_or_else(|| cfg.hash());
    let report = run_benchmark(&trainer, Some(&source), &targets, with_reference, &hash)?;
    let dir = cfg.out.join("eval");
    write(&dir.join("report.json"), &report.to_json()?)?;
    write(&dir.join("report.csv"), &report.to_csv())?;
    Ok(report)
}

pub struct ExtractSummary {
    pub images: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub cache_dir: PathBuf,
}

/// Captures unconditional (and, with `conditional`, mask-guided) bundles for a dataset into the feature cache.
pub fn extract(
    cfg: &RunConfig,
    diffusion: Option<&Path>,
    dataset: Option<&Path>,
    conditional: bool,
) -> Result<ExtractSummary> {
    let ckpt = diffusion
        .map(Path::to_path_buf)
        .unwrap_or_else(|| diffusion_checkpoint(cfg));
    let (mut model, _) = DiffusionModel::load(&ckpt)
        .with_context(|| format!("loading diffusion checkpoint {}", ckpt.display()))?;
    model.freeze()?;
    let cache_dir = cfg
        .feature_cache_dir()
        .unwrap_or_else(|| cfg.out.join("features"));
    let extractor = FeatureExtractor::new(Arc::new(model), cfg.trajectory.clone())?
        .with_disk_cache(Some(FeatureCache::open(&cache_dir)?));
    let dir = dataset
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.data.train_dir());
    let data = load_dataset(&dir)?;
    let mut shape = (0, 0, 0);
    for s in &data.samples {
        let bundle = extractor.bundle(&s.image, None)?;
        let (c, h, w) = align_and_concat(&bundle)?.dims3()?;
        shape = (c, h, w);
        if conditional {
            let masks = decompose_annotation(&s.labels, &data.classes)?;
            extractor.bundle(&s.image, Some(&masks))?;
        }
    }
    record_config(cfg, &cache_dir)?;
    Ok(ExtractSummary {
        images: data.len(),
        channels: shape.0,
        height: shape.1,
        width: shape.2,
        cache_dir,
    })
}

/// Trains and scores the five ablation arms from one pretrained checkpoint.
pub fn ablate(cfg: &RunConfig, diffusion: Option<&Path>) -> Result<AblationReport> {
    let ckpt = diffusion
        .map(Path::to_path_buf)
        .unwrap_or_else(|| diffusion_checkpoint(cfg));
    let data = load_dataset(&cfg.data.train_dir())?;
    let extractor = extractor_for(&ckpt, cfg)?;
    let source = load_dataset(&cfg.data.eval_dir(&cfg.data.source_eval_domain))?;
    let targets = cfg
        .data
        .target_domains
        .iter()
        .map(|d| load_dataset(&cfg.data.eval_dir(d)))
        .collect::<Result<Vec<_>>>()?;
    let report = run_ablation(
        extractor,
        &data.classes,
        &cfg.trainer_config(),
        &data.samples,
        Some(&source),
        &targets,
        cfg.ablation.steps,
        &cfg.hash(),
    )?;
    log::info!("ordering {}", report.ordering);
    let dir = cfg.out.join("ablation");
    write(&dir.join("report.json"), &report.to_json()?)?;
    write(&dir.join("report.csv"), &report.to_csv())?;
    record_config(cfg, &dir)?;
    Ok(report)
}
