//! Label maps, the synthetic shapes benchmark and dataset I/O.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IGNORE_INDEX: u8 = 255;

pub const SHAPE_CLASSES: [&str; 4] = ["background", "circle", "square", "triangle"];

/// Per-pixel class indices; [`IGNORE_INDEX`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Class indices that occur at least once, ascending.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..255u8).filter(|&v| seen[v as usize]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Noise,
    Stripes,
}

/// Appearance parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// RGB colour per foreground class (circle, square, triangle).
    pub palette: [[u8; 3]; 3],
    pub background: [u8; 3],
    /// Uniform per-channel jitter amplitude on every colour.
    pub jitter: f64,
    pub texture: Texture,
    /// Noise standard deviation or stripe amplitude, in [0, 1] intensity units.
    pub texture_strength: f64,
    pub blur_radius: usize,
}

const BASE_PALETTE: [[u8; 3]; 3] = [[210, 60, 50], [60, 170, 80], [60, 90, 210]];

impl DomainSpec {
    pub fn source_flat() -> Self {
        Self {
            name: "source-flat".into(),
            palette: BASE_PALETTE,
            background: [128, 128, 120],
            jitter: 15.0,
            texture: Texture::Flat,
            texture_strength: 0.0,
            blur_radius: 0,
        }
    }

    pub fn target_noise() -> Self {
        Self {
            name: "target-noise".into(),
            texture: Texture::Noise,
            texture_strength: 0.15,
            ..Self::source_flat()
        }
    }

    pub fn target_restyle() -> Self {
        Self {
            name: "target-restyle".into(),
            palette: [BASE_PALETTE[1], BASE_PALETTE[2], BASE_PALETTE[0]],
            blur_radius: 1,
            ..Self::source_flat()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "source-flat" => Ok(Self::source_flat()),
            "target-noise" => Ok(Self::target_noise()),
            "target-restyle" => Ok(Self::target_restyle()),
            other => Err(Error::Parameter(format!("unknown domain preset `{other}`"))),
        }
    }

    pub fn presets() -> Vec<Self> {
        vec![
            Self::source_flat(),
            Self::target_noise(),
            Self::target_restyle(),
        ]
    }

    fn appearance_seed(&self, seed: u64) -> u64 {
        let digest = Sha256::digest(format!("{seed}:{}", self.name).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    class: u8,
    cx: f64,
    cy: f64,
    r: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.class {
            1 => dx * dx + dy * dy <= self.r * self.r,
            2 => dx.abs() <= self.r * 0.85 && dy.abs() <= self.r * 0.85,
            _ => {
                // Apex up, base at cy + r.
                dy <= self.r && dy >= -self.r && dx.abs() <= (dy + self.r) * 0.5
            }
        }
    }
}

fn sample_layout(rng: &mut ChaCha8Rng, size: usize) -> Vec<Shape> {
    let n = rng.random_range(1..=3);
    let mut shapes: Vec<Shape> = Vec::with_capacity(n);
    let s = size as f64;
    for _ in 0..n {
        for _ in 0..50 {
            let r = rng.random_range(s * 0.16..s * 0.28);
            let cand = Shape {
                class: rng.random_range(1..=3u8),
                cx: rng.random_range(r + 1.0..s - r - 1.0),
                cy: rng.random_range(r + 1.0..s - r - 1.0),
                r,
            };
            let clear = shapes.iter().all(|o| {
                ((o.cx - cand.cx).powi(2) + (o.cy - cand.cy).powi(2)).sqrt() > o.r + cand.r + 1.0
            });
            if clear {
                shapes.push(cand);
                break;
            }
        }
    }
    shapes
}

fn rasterize(shapes: &[Shape], size: usize) -> LabelMap {
    let mut data = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(s) = shapes.iter().find(|s| s.contains(px, py)) {
                data[y * size + x] = s.class;
            }
        }
    }
    LabelMap {
        height: size,
        width: size,
        data,
    }
}

fn box_blur(img: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let r = radius as isize;
    let n = size as isize;
    let mut out = vec![0.0; img.len()];
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let (mut acc, mut cnt) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..n).contains(&yy) && (0..n).contains(&xx) {
                            acc += img[((yy * n + xx) * 3 + c) as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[((y * n + x) * 3 + c) as usize] = acc / cnt;
            }
        }
    }
    out
}

fn render(domain: &DomainSpec, labels: &LabelMap, rng: &mut ChaCha8Rng) -> RgbImage {
    let size = labels.width;
    let jittered = |c: [u8; 3], rng: &mut ChaCha8Rng| -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, &v) in out.iter_mut().zip(&c) {
            *o = (v as f64 + rng.random_range(-domain.jitter..=domain.jitter)) / 255.0;
        }
        out
    };
    let bg = jittered(domain.background, rng);
    let fg: Vec<[f64; 3]> = domain.palette.iter().map(|&c| jittered(c, rng)).collect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let period = rng.random_range(4.0..8.0);
    let mut img = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let class = labels.get(y, x);
            let base = if class == 0 || class == IGNORE_INDEX {
                bg
            } else {
                fg[class as usize - 1]
            };
            for c in 0..3 {
                let mut v = base[c];
                match domain.texture {
                    Texture::Flat => {}
                    Texture::Noise => {
                        let z: f64 = rng.sample(StandardNormal);
                        v += domain.texture_strength * z;
                    }
                    Texture::Stripes => {
                        let s = ((x + y) as f64 * std::f64::consts::TAU / period + phase).sin();
                        v *= 1.0 + domain.texture_strength * s;
                    }
                }
                img[(y * size + x) * 3 + c] = v;
            }
        }
    }
    let img = box_blur(&img, size, domain.blur_radius);
    let bytes = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(size as u32, size as u32, bytes).expect("buffer sized for image")
}

/// Generates `count` image/label pairs. Geometry depends only on `seed`, so
/// domains generated with the same seed share their label maps.
pub fn generate_samples(
    domain: &DomainSpec,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(RgbImage, LabelMap)>> {
    if size < 8 {
        return Err(Error::Parameter(format!("image size {size} too small")));
    }
    let mut geometry = ChaCha8Rng::seed_from_u64(seed);
    let mut appearance = ChaCha8Rng::seed_from_u64(domain.appearance_seed(seed));
    Ok((0..count)
        .map(|_| {
            let labels = rasterize(&sample_layout(&mut geometry, size), size);
            let img = render(domain, &labels, &mut appearance);
            (img, labels)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub domain: DomainSpec,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub ignore_index: u8,
}

/// Writes `images/NNNN.png`, `labels/NNNN.png` and `manifest.json` under `dir`.
pub fn generate_dataset(
    dir: &Path,
    domain: &DomainSpec,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Manifest> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, (img, labels)) in generate_samples(domain, count, size, seed)?
        .into_iter()
        .enumerate()
    {
        img.save(dir.join(format!("images/{i:04}.png")))?;
        GrayImage::from_raw(size as u32, size as u32, labels.data)
            .expect("label buffer sized for image")
            .save(dir.join(format!("labels/{i:04}.png")))?;
    }
    let manifest = Manifest {
        classes: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        domain: domain.clone(),
        count,
        size,
        seed,
        ignore_index: IGNORE_INDEX,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Image in [-1, 1] as a (3, H, W) tensor.
pub fn image_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img
        .as_raw()
        .iter()
        .map(|&v| v as f32 / 127.5 - 1.0)
        .collect();
    Ok(
        Tensor::from_vec(data, (h as usize, w as usize, 3), &Device::Cpu)?
            .permute((2, 0, 1))?
            .contiguous()?,
    )
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// (3, H, W) in [-1, 1].
    pub image: Tensor,
    pub labels: LabelMap,
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(name: &str, pairs: Vec<(RgbImage, LabelMap)>) -> Result<Self> {
        let samples = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (img, labels))| {
                Ok(Sample {
                    image: image_to_tensor(&img)?,
                    labels,
                    id: format!("{i:04}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            classes: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
            samples,
        })
    }

    /// Generates a dataset in memory.
    pub fn synthetic(domain: &DomainSpec, count: usize, size: usize, seed: u64) -> Result<Self> {
        Self::from_samples(&domain.name, generate_samples(domain, count, size, seed)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut samples = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let ip: PathBuf = dir.join(format!("images/{i:04}.png"));
            let lp: PathBuf = dir.join(format!("labels/{i:04}.png"));
            let img = image::open(&ip)?.to_rgb8();
            let lab = image::open(&lp)?.to_luma8();
            if img.dimensions() != lab.dimensions() {
                return Err(Error::Data(format!(
                    "{} and {} differ in size",
                    ip.display(),
                    lp.display()
                )));
            }
            let (w, h) = lab.dimensions();
            let labels = LabelMap::new(h as usize, w as usize, lab.into_raw())?;
            if let Some(&bad) = labels
                .data
                .iter()
                .find(|&&v| v != IGNORE_INDEX && v as usize >= manifest.classes.len())
            {
                return Err(Error::Data(format!(
                    "label {bad} in {} outside class range",
                    lp.display()
                )));
            }
            samples.push(Sample {
                image: image_to_tensor(&img)?,
                labels,
                id: format!("{i:04}"),
            });
        }
        Ok(Self {
            name: manifest.domain.name.clone(),
            classes: manifest.classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Content hash of an image tensor, used as a cache key.
pub fn tensor_digest(t: &Tensor) -> Result<String> {
    let mut h = Sha256::new();
    for d in t.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
        h.update(v.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}
