use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_parts, forward_noise, images_to_tensor, initial_noise, make_cosine_schedule, v_to_eps, Backbone, BackboneConfig};
use crate::data_engine::Triplet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::instruction::{backbone_prompt, Task};
use crate::nn::{AdamW, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub codec_steps: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,
    pub diffusion_steps: usize,
    pub batch_size: usize,
    pub diffusion_lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            codec_steps: 1500,
            codec_batch: 16,
            codec_lr: 4e-3,
            diffusion_steps: 2000,
            batch_size: 16,
            diffusion_lr: 1e-3,
            grad_clip: 1.0,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub codec_loss: Vec<f64>,
    pub diffusion_loss: Vec<f64>,
    pub latent_scale: f64,
}

fn step_rng(seed: u64, phase: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (phase << 56));
    rng.set_stream(step as u64);
    rng
}

fn optimizer_for(vb: &ParamBuilder, prefixes: &[&str], lr: f64) -> Result<AdamW> {
    let vars = vb
        .vars()
        .into_iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .collect::<BTreeMap<_, _>>();
    let mut opt = AdamW::new(vars, lr)?;
    opt.weight_decay = 0.0;
    Ok(opt)
}

/// Cosine decay from `base` to `base / 10` over `total` steps.
fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn clipped_step(opt: &mut AdamW, loss: &Tensor, clip: f64) -> Result<()> {
    let grads = loss.backward()?;
    let norm = opt.grad_norm(&grads)?;
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    opt.step(&grads, scale)
}

/// Trains codec, then text embedding and U-Net on the images of `samples`
/// with their backbone prompts. Returns the frozen backbone.
pub fn pretrain_backbone(
    samples: &[Triplet],
    cfg: &BackboneConfig,
    pcfg: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("pretraining dataset is empty".into()));
    }
    cfg.validate()?;
    let device = Device::Cpu;
    let dtype = DType::F32;

    let mut image_index: HashMap<&str, usize> = HashMap::new();
    let mut images: Vec<Arc<Image>> = Vec::new();
    let mut sample_image = Vec::with_capacity(samples.len());
    let mut prompts = Vec::with_capacity(samples.len());
    for t in samples {
        let idx = *image_index.entry(t.image_id.as_str()).or_insert_with(|| {
            images.push(t.image.clone());
            images.len() - 1
        });
        sample_image.push(idx);
        let task = if t.is_bokeh() { Task::BokehRestore } else { Task::LocalRestore };
        prompts.push(backbone_prompt(task, &t.caption));
    }

    let vb = ParamBuilder::init(pcfg.seed, dtype, &device, true);
    let (mut codec, text, unet) = build_parts(cfg, &vb)?;
    let mut report = PretrainReport::default();

    let mut opt = optimizer_for(&vb, &["codec."], pcfg.codec_lr)?;
    for step in 0..pcfg.codec_steps {
        opt.lr = cosine_lr(pcfg.codec_lr, step, pcfg.codec_steps);
        let mut rng = step_rng(pcfg.seed, 1, step);
        let batch: Vec<&Image> = (0..pcfg.codec_batch.max(1))
            .map(|_| images[rng.random_range(0..images.len())].as_ref())
            .collect();
        let x = images_to_tensor(&batch, dtype, &device)?;
        let z = codec.encode(&x)?;
        let recon = codec.decode(&z)?;
        let loss = ((recon - &x)?.sqr()?.mean_all()? + (z.sqr()?.mean_all()? * 1e-4)?)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::DivergenceDetected { step: step as u64 });
        }
        report.codec_loss.push(value);
        clipped_step(&mut opt, &loss, pcfg.grad_clip)?;
        if pcfg.log_every > 0 && step % pcfg.log_every == 0 {
            info!("codec step {step}: loss {value:.5}");
        }
    }

    let mut latents = Vec::with_capacity(images.len());
    let mut sum_sq = 0f64;
    let mut count = 0usize;
    for chunk in images.chunks(64) {
        let refs: Vec<&Image> = chunk.iter().map(|a| a.as_ref()).collect();
        let z = codec.encode(&images_to_tensor(&refs, dtype, &device)?)?.detach();
        sum_sq += scalar(&z.sqr()?.sum_all()?)?;
        count += z.elem_count();
        for i in 0..refs.len() {
            latents.push(z.get(i)?);
        }
    }
    let rms = (sum_sq / count as f64).sqrt();
    let latent_scale = if rms > 0.0 && rms.is_finite() { 1.0 / rms } else { 1.0 };
    codec.latent_scale = latent_scale;
    report.latent_scale = latent_scale;
    let latents: Vec<Tensor> = latents
        .into_iter()
        .map(|z| z * latent_scale)
        .collect::<candle_core::Result<_>>()?;

    let schedule = make_cosine_schedule(cfg.timesteps)?;
    let (c, h, w) = latents[0].dims3()?;
    let mut opt = optimizer_for(&vb, &["text.", "unet."], pcfg.diffusion_lr)?;
    for step in 0..pcfg.diffusion_steps {
        opt.lr = cosine_lr(pcfg.diffusion_lr, step, pcfg.diffusion_steps);
        let mut rng = step_rng(pcfg.seed, 2, step);
        let b = pcfg.batch_size.max(1);
        let picks: Vec<usize> = (0..b).map(|_| rng.random_range(0..samples.len())).collect();
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..cfg.timesteps)).collect();
        let noise_seed: u64 = rng.random();
        let seeds: Vec<u64> = (0..b as u64).map(|i| noise_seed.wrapping_add(i)).collect();
        let z0 = Tensor::stack(&picks.iter().map(|&p| &latents[sample_image[p]]).collect::<Vec<_>>(), 0)?;
        let eps = initial_noise(&seeds, (c, h, w), dtype, &device)?;
        let z_t = forward_noise(&z0, &ts, &eps, &schedule)?;
        let batch_prompts: Vec<&str> = picks.iter().map(|&p| prompts[p].as_str()).collect();
        let emb = text.embed_batch(&batch_prompts, &device)?;
        let eps_hat = v_to_eps(&unet.forward(&z_t, &ts, &emb, None)?.v, &z_t, &ts, &schedule)?;
        let loss = (eps_hat - &eps)?.sqr()?.mean_all()?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::DivergenceDetected { step: step as u64 });
        }
        report.diffusion_loss.push(value);
        clipped_step(&mut opt, &loss, pcfg.grad_clip)?;
        if pcfg.log_every > 0 && step % pcfg.log_every == 0 {
            info!("diffusion step {step}: loss {value:.5}");
        }
    }

    let params = vb
        .params()
        .into_iter()
        .map(|(k, v)| (k, v.detach()))
        .collect::<BTreeMap<_, _>>();
    let backbone = Backbone::from_params(cfg, params, latent_scale, dtype)?;
    Ok((backbone, report))
}
