#![allow(dead_code)]

use candle_core::{Device, Tensor};
use diffseg_core::condition::Vocabulary;
use diffseg_core::data::SHAPE_CLASSES;
use diffseg_core::diffusion::{DiffusionConfig, DiffusionModel};
use diffseg_core::unet::UNetConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn classes() -> Vec<String> {
    SHAPE_CLASSES.iter().map(|s| s.to_string()).collect()
}

pub fn tiny_config() -> DiffusionConfig {
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

pub fn tiny_model(seed: u64) -> DiffusionModel {
    let mut m =
        DiffusionModel::initialized(tiny_config(), Vocabulary::new(classes()).unwrap(), seed)
            .unwrap();
    m.freeze().unwrap();
    m
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}
