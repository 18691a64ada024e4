//! Run configuration: defaults, an optional TOML or JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use diffseg_core::cache::{FeatureCache, CACHE_ENV};
use diffseg_core::diffusion::{DiffusionConfig, PretrainConfig};
use diffseg_core::features::TrajectoryConfig;
use diffseg_core::optim::AdamWConfig;
use diffseg_core::seg::ConsistencyKind;
use diffseg_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub image_size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub train_domain: String,
    pub source_eval_domain: String,
    pub target_domains: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            image_size: 32,
            train_count: 200,
            eval_count: 100,
            train_domain: "source-flat".into(),
            source_eval_domain: "source-flat".into(),
            target_domains: vec!["target-noise".into(), "target-restyle".into()],
        }
    }
}

impl DataConfig {
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train").join(&self.train_domain)
    }

    pub fn eval_dir(&self, domain: &str) -> PathBuf {
        self.root.join("eval").join(domain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub null_prompt_prob: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: 2000,
            batch_size: 2,
            optimizer: d.optimizer,
            null_prompt_prob: d.null_prompt_prob,
        }
    }
}

impl PretrainSection {
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            optimizer: self.optimizer,
            null_prompt_prob: self.null_prompt_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub freeze_check_every: usize,
    pub eval_every: usize,
    pub eval_images: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            freeze_check_every: 50,
            eval_every: 250,
            eval_images: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub steps: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { steps: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Feature-cache directory; `DIFFSEG_CACHE` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub pretrain: PretrainSection,
    pub trajectory: TrajectoryConfig,
    pub trainer: TrainerConfig,
    pub train: TrainSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            cache_dir: None,
            data: DataConfig::default(),
            diffusion: DiffusionConfig::default(),
            pretrain: PretrainSection::default(),
            trajectory: TrajectoryConfig::default(),
            trainer: TrainerConfig::default(),
            train: TrainSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsisFlag {
    L2,
    Kl,
    None,
}

impl std::str::FromStr for ConsisFlag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Self::L2),
            "kl" => Ok(Self::Kl),
            "none" => Ok(Self::None),
            other => Err(format!("expected l2, kl or none, got `{other}`")),
        }
    }
}

/// Values given on the command line; `None` leaves the configured value alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub steps: Option<Vec<usize>>,
    pub layers: Option<Vec<usize>>,
    pub consis: Option<ConsisFlag>,
    pub no_consis: bool,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
}

pub fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

impl RunConfig {
    /// Defaults overlaid with `path` (TOML unless the extension is `.json`).
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(p) = &o.data_root {
            self.data.root = p.clone();
        }
        if let Some(s) = &o.steps {
            self.trajectory.steps = s.clone();
        }
        if let Some(l) = &o.layers {
            self.trajectory.layers = l.clone();
        }
        match o.consis {
            Some(ConsisFlag::L2) => self.trainer.consistency = ConsistencyKind::L2,
            Some(ConsisFlag::Kl) => self.trainer.consistency = ConsistencyKind::Kl,
            Some(ConsisFlag::None) => self.trainer.lambda2 = 0.0,
            None => {}
        }
        if let Some(v) = o.lambda1 {
            self.trainer.lambda1 = v;
        }
        if let Some(v) = o.lambda2 {
            self.trainer.lambda2 = v;
        }
        if o.no_consis {
            self.trainer.lambda2 = 0.0;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.diffusion.unet.validate()?;
        self.trajectory.validate(
            self.diffusion.schedule.train_timesteps,
            self.diffusion.unet.decoder_layers(),
        )?;
        self.trainer.validate()?;
        if self.pretrain.batch_size == 0 {
            bail!("pretrain batch size must be positive");
        }
        if self.data.train_count == 0 || self.data.eval_count == 0 {
            bail!("dataset sizes must be positive");
        }
        Ok(())
    }

    /// Trainer settings with the run seed applied.
    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seed,
            ..self.trainer.clone()
        }
    }

    pub fn feature_cache_dir(&self) -> Option<PathBuf> {
        std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.cache_dir.clone())
    }

    pub fn feature_cache(&self) -> anyhow::Result<Option<FeatureCache>> {
        Ok(self
            .feature_cache_dir()
            .map(|d| FeatureCache::open(&d))
            .transpose()?)
    }

    /// Sorted-key JSON of the whole configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .expect("config serializes")
            .to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
