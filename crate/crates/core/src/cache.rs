//! On-disk feature cache and the memoising extractor used by training.
//!
//! Each entry is one file: a magic line, a little-endian u32 header length, a
//! JSON header listing (step, layer, shapes), then raw little-endian f32 data
//! in header order. `index.json` maps keys to file names.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::tensor_digest;
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::features::{capture_for_condition, FeatureBundle, FeaturePair, TrajectoryConfig};
use crate::path_control::MaskSet;
use crate::schedule::LatentImage;

pub const CACHE_ENV: &str = "DIFFSEG_CACHE";
const MAGIC: &[u8; 6] = b"DSFC1\n";
const INDEX: &str = "index.json";

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    step: usize,
    layer: usize,
    inter: Vec<usize>,
    cross: Vec<usize>,
}

pub struct FeatureCache {
    dir: PathBuf,
    index: Mutex<BTreeMap<String, String>>,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ipath = dir.join(INDEX);
        let index = if ipath.exists() {
            let text = std::fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
            serde_json::from_str(&text)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            index: Mutex::new(index),
        })
    }

    /// Opens the directory named by `DIFFSEG_CACHE`, if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_ENV) {
            Some(d) if !d.is_empty() => Ok(Some(Self::open(Path::new(&d))?)),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("cache index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Result<Option<FeatureBundle>> {
        let name = match self.index.lock().expect("cache index lock").get(key) {
            Some(n) => n.clone(),
            None => return Ok(None),
        };
        let path = self.dir.join(&name);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        decode(&bytes)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Stores `bundle` under `key` unless an entry already exists.
    pub fn put(&self, key: &str, bundle: &FeatureBundle) -> Result<()> {
        let mut index = self.index.lock().expect("cache index lock");
        if index.contains_key(key) {
            return Ok(());
        }
        let name = format!("{key}.bin");
        let path = self.dir.join(&name);
        write_atomic(&path, &encode(bundle)?)?;
        index.insert(key.to_string(), name);
        write_atomic(
            &self.dir.join(INDEX),
            serde_json::to_string_pretty(&*index)?.as_bytes(),
        )
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode(bundle: &FeatureBundle) -> Result<Vec<u8>> {
    let mut headers = Vec::with_capacity(bundle.len());
    let mut payload = Vec::new();
    for (&(step, layer), pair) in bundle.iter() {
        headers.push(EntryHeader {
            step,
            layer,
            inter: pair.inter.dims().to_vec(),
            cross: pair.cross.dims().to_vec(),
        });
        for t in [&pair.inter, &pair.cross] {
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = serde_json::to_vec(&headers)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<FeatureBundle> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a feature cache entry"));
    }
    let mut pos = MAGIC.len();
    let hlen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
    pos += 4;
    let header: Vec<EntryHeader> = serde_json::from_slice(
        bytes
            .get(pos..pos + hlen)
            .ok_or_else(|| bad("truncated header"))?,
    )?;
    pos += hlen;
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| bad("truncated payload"))?;
        pos += 4 * n;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(vals, shape, &Device::Cpu)?)
    };
    let mut bundle = FeatureBundle::new();
    for h in &header {
        let inter = take(&h.inter)?;
        let cross = take(&h.cross)?;
        bundle.insert(h.step, h.layer, FeaturePair::new(inter, cross)?)?;
    }
    Ok(bundle)
}

/// Captures bundles through a frozen model, memoising them in memory and
/// optionally on disk.
pub struct FeatureExtractor {
    model: Arc<DiffusionModel>,
    trajectory: TrajectoryConfig,
    disk: Option<FeatureCache>,
    memo: Option<Mutex<HashMap<String, Arc<FeatureBundle>>>>,
}

impl FeatureExtractor {
    pub fn new(model: Arc<DiffusionModel>, trajectory: TrajectoryConfig) -> Result<Self> {
        if !model.is_frozen() {
            return Err(Error::State(
                "feature extraction requires a frozen denoiser".into(),
            ));
        }
        trajectory.validate(model.schedule().train_timesteps(), model.decoder_layers())?;
        Ok(Self {
            model,
            trajectory,
            disk: None,
            memo: None,
        })
    }

    pub fn with_disk_cache(mut self, cache: Option<FeatureCache>) -> Self {
        self.disk = cache;
        self
    }

    /// Keeps every captured bundle in memory.
    pub fn with_memo(mut self) -> Self {
        self.memo = Some(Mutex::new(HashMap::new()));
        self
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn shared_model(&self) -> Arc<DiffusionModel> {
        self.model.clone()
    }

    pub fn trajectory(&self) -> &TrajectoryConfig {
        &self.trajectory
    }

    pub fn key(&self, image: &Tensor, condition: Option<&MaskSet>) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.model.frozen_checksum().unwrap_or_default().as_bytes());
        h.update(serde_json::to_vec(&self.trajectory)?);
        h.update(tensor_digest(image)?.as_bytes());
        match condition {
            None => h.update(b"uncond"),
            Some(m) => {
                h.update(serde_json::to_vec(m.categories())?);
                h.update(tensor_digest(&m.to_tensor()?)?.as_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Bundle for a (3, H, W) image in [-1, 1].
    pub fn bundle(
        &self,
        image: &Tensor,
        condition: Option<&MaskSet>,
    ) -> Result<Arc<FeatureBundle>> {
        let needs_key = self.memo.is_some() || self.disk.is_some();
        let key = if needs_key {
            Some(self.key(image, condition)?)
        } else {
            None
        };
        if let (Some(memo), Some(k)) = (&self.memo, &key) {
            if let Some(b) = memo.lock().expect("memo lock").get(k) {
                return Ok(b.clone());
            }
        }
        let from_disk = match (&self.disk, &key) {
            (Some(d), Some(k)) => d.get(k)?,
            _ => None,
        };
        let bundle = match from_disk {
            Some(b) => Arc::new(b),
            None => {
                let latent = LatentImage::clean(image.clone())?;
                let b = capture_for_condition(&self.model, &latent, condition, &self.trajectory)?;
                if let (Some(d), Some(k)) = (&self.disk, &key) {
                    d.put(k, &b)?;
                }
                Arc::new(b)
            }
        };
        if let (Some(memo), Some(k)) = (&self.memo, key) {
            memo.lock().expect("memo lock").insert(k, bundle.clone());
        }
        Ok(bundle)
    }
}
