#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use region_restore::diffusion::{Backbone, BackboneConfig};

/// 32x32 images, 8x8 latents, one U-Net level (two injection sites).
pub fn mini_config() -> BackboneConfig {
    BackboneConfig {
        timesteps: 1000,
        latent_channels: 2,
        codec_hidden: 4,
        vocab_size: 32,
        text_dim: 8,
        max_tokens: 4,
        unet_channels: vec![8],
        time_dim: 8,
        sample_clip: 0.0,
    }
}

pub fn mini_backbone(dtype: DType) -> Backbone {
    Backbone::init(&mini_config(), 3, dtype).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}
