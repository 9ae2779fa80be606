//! Control-branch training: diffusion loss plus a weighted mask loss, a
//! two-stage schedule over general and bokeh data, and resumable checkpoints.

mod checkpoint;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{ControlCheckpoint, CONTROL_FORMAT};

use crate::control::{ControlConfig, ControlModel, ModulatedInjection};
use crate::data_engine::Triplet;
use crate::degradation::{degrade, DegradationConfig};
use crate::diffusion::{forward_noise, initial_noise, Backbone};
use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::instruction::{backbone_prompt, render_training_instruction, Task};
use crate::nn::AdamW;

/// Consecutive non-finite losses tolerated before training aborts.
pub const MAX_NONFINITE_STREAK: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_mask: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Probability that a stage-2 draw comes from the general dataset.
    pub stage2_mix: f64,
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub degradation: DegradationConfig,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 16,
            lambda_mask: 0.5,
            stage1_steps: 4000,
            stage2_steps: 1000,
            stage2_mix: 0.25,
            seed: 0,
            grad_clip: 1.0,
            weight_decay: 0.01,
            degradation: DegradationConfig::default(),
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.stage2_mix) {
            return Err(Error::InvalidConfig(format!("stage2_mix {} outside [0, 1]", self.stage2_mix)));
        }
        if !(self.lambda_mask >= 0.0 && self.lambda_mask.is_finite()) {
            return Err(Error::InvalidConfig("lambda_mask must be finite and >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("grad_clip and weight_decay must be >= 0".into()));
        }
        self.degradation.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    /// 1 while `step < stage1_steps`, 2 afterwards.
    pub fn stage_of(&self, step: usize) -> u8 {
        if step < self.stage1_steps {
            1
        } else {
            2
        }
    }
}

/// Loss terms of one batch. `total = diffusion + lambda * mask`.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub diffusion: Tensor,
    pub mask: Tensor,
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`, in the
/// overflow-free form `max(x,0) - x*y + log(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * target)?)? + softplus)?.mean_all()?)
}

/// `gt_mask` (B,1,H,W) in [0,1] resized to the logits resolution and
/// hard-thresholded at 0.5.
pub fn prepare_gt_mask(gt_mask: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let resized = crate::control::resize_mask_tensor(gt_mask, height, width)?;
    Ok(resized.ge(0.5)?.to_dtype(gt_mask.dtype())?)
}

/// Mean squared noise error plus `lambda_mask` times the mask cross-entropy.
pub fn training_loss(eps: &Tensor, eps_hat: &Tensor, mask_logits: &Tensor, gt_mask: &Tensor, lambda_mask: f64) -> Result<LossTerms> {
    if eps.dims() != eps_hat.dims() {
        return Err(Error::Shape(format!("eps {:?} vs eps_hat {:?}", eps.dims(), eps_hat.dims())));
    }
    let (_, _, h, w) = mask_logits.dims4()?;
    let target = prepare_gt_mask(gt_mask, h, w)?;
    if target.dims() != mask_logits.dims() {
        return Err(Error::Shape(format!(
            "mask logits {:?} vs ground truth {:?}",
            mask_logits.dims(),
            gt_mask.dims()
        )));
    }
    let diffusion = (eps - eps_hat)?.sqr()?.mean_all()?;
    let mask = bce_with_logits(mask_logits, &target)?;
    let total = if lambda_mask == 0.0 {
        diffusion.clone()
    } else {
        (&diffusion + (&mask * lambda_mask)?)?
    };
    let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(LossTerms { total, diffusion, mask })
}

/// One assembled training batch. Masks are at image resolution.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub lq: Tensor,
    pub z0: Tensor,
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
    pub control_text: Tensor,
    pub backbone_text: Tensor,
    pub gt_mask: Tensor,
    pub general_count: usize,
}

/// Loss of `model` on `batch`, with the constant-1 injection. Also returns
/// the mask logits.
pub fn batch_loss(backbone: &Backbone, model: &ControlModel, batch: &TrainBatch, lambda_mask: f64) -> Result<(LossTerms, Tensor)> {
    let z_t = forward_noise(&batch.z0, &batch.timesteps, &batch.eps, &backbone.schedule)?;
    let ctrl = model.forward(&batch.lq, &batch.control_text, &z_t, &batch.timesteps)?;
    let logits = model.decode_mask(&ctrl.attn)?;
    let injection = ModulatedInjection::unit(ctrl.features);
    let eps_hat = backbone
        .forward(&z_t, &batch.timesteps, &batch.backbone_text, Some(&injection))?
        .eps;
    let terms = training_loss(&batch.eps, &eps_hat, &logits, &batch.gt_mask, lambda_mask)?;
    Ok((terms, logits))
}

/// Mean per-item IoU of `logits > 0` against the resized binary ground truth;
/// an item where both are empty counts as 1.
pub fn mask_iou_estimate(logits: &Tensor, gt_mask: &Tensor) -> Result<f64> {
    let (b, _, h, w) = logits.dims4()?;
    let pred = logits.gt(0.0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let gt = prepare_gt_mask(gt_mask, h, w)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let n = h * w;
    let mut sum = 0.0;
    for i in 0..b {
        let (mut inter, mut uni) = (0usize, 0usize);
        for (p, g) in pred[i * n..(i + 1) * n].iter().zip(&gt[i * n..(i + 1) * n]) {
            let (p, g) = (*p > 0.5, *g > 0.5);
            inter += (p && g) as usize;
            uni += (p || g) as usize;
        }
        sum += if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
    }
    Ok(sum / b.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    General,
    Bokeh,
}

/// Everything random about one sample of a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub source: Source,
    pub index: usize,
    pub degrade_seed: u64,
    pub timestep: usize,
    pub noise_seed: u64,
}

/// RNG of `step`: a dedicated stream so any step can be replayed alone.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C0DE);
    rng.set_stream(step as u64);
    rng
}

/// Sample choices for `step`. Stage 1 draws only general samples; stage 2
/// draws a general sample with probability `stage2_mix`, else a bokeh one.
pub fn plan_batch(cfg: &TrainConfig, step: usize, n_general: usize, n_bokeh: usize, timesteps: usize) -> Result<Vec<Draw>> {
    let mut rng = step_rng(cfg.seed, step);
    let stage = cfg.stage_of(step);
    (0..cfg.batch_size)
        .map(|_| {
            let general = stage == 1 || n_bokeh == 0 || rng.random::<f64>() < cfg.stage2_mix;
            let (source, n) = if general { (Source::General, n_general) } else { (Source::Bokeh, n_bokeh) };
            if n == 0 {
                return Err(Error::InvalidConfig(format!("{source:?} dataset is empty")));
            }
            Ok(Draw {
                source,
                index: rng.random_range(0..n),
                degrade_seed: rng.random(),
                timestep: rng.random_range(0..timesteps),
                noise_seed: rng.random(),
            })
        })
        .collect()
}

/// Per-step record written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: u8,
    pub total: f64,
    pub diffusion_term: f64,
    pub mask_term: f64,
    pub mask_iou_estimate: f64,
    pub general_fraction: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

struct Prepared<'a> {
    triplet: &'a Triplet,
    latent: usize,
}

/// Owns the trainable control model, its optimizer and the encoded data.
pub struct Trainer<'a> {
    backbone: &'a Backbone,
    pub config: TrainConfig,
    model: ControlModel,
    optimizer: AdamW,
    general: Vec<Prepared<'a>>,
    bokeh: Vec<Prepared<'a>>,
    latents: Vec<Tensor>,
    step: u64,
    nonfinite_streak: u32,
    pub skipped_steps: u64,
    pub backbone_path: Option<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        backbone: &'a Backbone,
        general: &'a [Triplet],
        bokeh: &'a [Triplet],
        config: TrainConfig,
        control: ControlConfig,
    ) -> Result<Self> {
        let (model, vars) = ControlModel::init(backbone, &control, config.seed, true)?;
        Self::assemble(backbone, general, bokeh, config, model, vars)
    }

    /// Continues from `ckpt`; the training config stored in it is used.
    pub fn resume(backbone: &'a Backbone, general: &'a [Triplet], bokeh: &'a [Triplet], ckpt: &ControlCheckpoint) -> Result<Self> {
        ckpt.check_backbone(backbone)?;
        let (model, vars) = ControlModel::build(backbone, &ckpt.control_config, ckpt.params.clone(), true, 0, true)?;
        let mut trainer = Self::assemble(backbone, general, bokeh, ckpt.train_config.clone(), model, vars)?;
        trainer.optimizer.load_state(&ckpt.optimizer, ckpt.step)?;
        trainer.step = ckpt.step;
        trainer.skipped_steps = ckpt.skipped_steps;
        trainer.backbone_path = ckpt.backbone_path.clone();
        Ok(trainer)
    }

    fn assemble(
        backbone: &'a Backbone,
        general: &'a [Triplet],
        bokeh: &'a [Triplet],
        config: TrainConfig,
        model: ControlModel,
        vars: BTreeMap<String, Var>,
    ) -> Result<Self> {
        config.validate()?;
        if general.is_empty() && config.total_steps() > 0 {
            return Err(Error::InvalidConfig("general dataset is empty".into()));
        }
        if bokeh.is_empty() && config.stage2_steps > 0 && config.stage2_mix < 1.0 {
            return Err(Error::InvalidConfig("bokeh dataset is empty but stage 2 needs it".into()));
        }
        let mut optimizer = AdamW::new(vars, config.learning_rate)?;
        optimizer.weight_decay = config.weight_decay;

        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut images: Vec<&Image> = Vec::new();
        let mut prepare = |ts: &'a [Triplet]| -> Vec<Prepared<'a>> {
            ts.iter()
                .map(|t| {
                    let latent = *index.entry(t.image_id.as_str()).or_insert_with(|| {
                        images.push(t.image.as_ref());
                        images.len() - 1
                    });
                    Prepared { triplet: t, latent }
                })
                .collect()
        };
        let general = prepare(general);
        let bokeh = prepare(bokeh);
        let mut latents = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let z = backbone.encode_images(chunk)?.detach();
            for i in 0..chunk.len() {
                latents.push(z.get(i)?.contiguous()?);
            }
        }
        Ok(Self {
            backbone,
            config,
            model,
            optimizer,
            general,
            bokeh,
            latents,
            step: 0,
            nonfinite_streak: 0,
            skipped_steps: 0,
            backbone_path: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &ControlModel {
        &self.model
    }

    /// Builds the batch for `step` from its plan.
    pub fn batch_for(&self, step: usize) -> Result<TrainBatch> {
        let plan = plan_batch(
            &self.config,
            step,
            self.general.len(),
            self.bokeh.len(),
            self.backbone.schedule.len(),
        )?;
        let dtype = self.backbone.dtype();
        let device = self.backbone.device();
        let mut lq = Vec::with_capacity(plan.len());
        let mut z0 = Vec::with_capacity(plan.len());
        let mut masks = Vec::with_capacity(plan.len());
        let mut control_prompts = Vec::with_capacity(plan.len());
        let mut backbone_prompts = Vec::with_capacity(plan.len());
        let mut general_count = 0;
        for d in &plan {
            let (p, task) = match d.source {
                Source::General => {
                    general_count += 1;
                    (&self.general[d.index], Task::LocalRestore)
                }
                Source::Bokeh => (&self.bokeh[d.index], Task::BokehRestore),
            };
            lq.push(degrade(&p.triplet.image, &self.config.degradation, d.degrade_seed)?);
            z0.push(self.latents[p.latent].clone());
            masks.push(p.triplet.mask.clone());
            control_prompts.push(render_training_instruction(task, &p.triplet.caption));
            backbone_prompts.push(backbone_prompt(task, &p.triplet.caption));
        }
        let lq_refs: Vec<&Image> = lq.iter().collect();
        let z0 = Tensor::stack(&z0, 0)?;
        let (_, c, h, w) = z0.dims4()?;
        let seeds: Vec<u64> = plan.iter().map(|d| d.noise_seed).collect();
        let cp: Vec<&str> = control_prompts.iter().map(String::as_str).collect();
        let bp: Vec<&str> = backbone_prompts.iter().map(String::as_str).collect();
        Ok(TrainBatch {
            lq: self.backbone.images_to_tensor(&lq_refs)?,
            z0,
            timesteps: plan.iter().map(|d| d.timestep).collect(),
            eps: initial_noise(&seeds, (c, h, w), dtype, device)?,
            control_text: self.backbone.embed_prompts(&cp)?,
            backbone_text: self.backbone.embed_prompts(&bp)?,
            gt_mask: planes_to_tensor(&masks, dtype)?,
            general_count,
        })
    }

    /// One optimizer step on the control branch and mask decoder. A
    /// non-finite loss skips the update; three in a row abort.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepMetrics> {
        let step = self.step;
        let stage = self.config.stage_of(step as usize);
        let b = batch.timesteps.len().max(1) as f64;
        let general_fraction = batch.general_count as f64 / b;
        let outcome = batch_loss(self.backbone, &self.model, batch, self.config.lambda_mask);
        let (terms, logits) = match outcome {
            Ok(v) => v,
            Err(Error::NonFiniteLoss) => {
                self.nonfinite_streak += 1;
                self.skipped_steps += 1;
                self.step += 1;
                warn!(
                    "step {step}: non-finite loss, update skipped ({} skipped so far)",
                    self.skipped_steps
                );
                if self.nonfinite_streak >= MAX_NONFINITE_STREAK {
                    return Err(Error::DivergenceDetected { step });
                }
                return Ok(StepMetrics {
                    step,
                    stage,
                    total: f64::NAN,
                    diffusion_term: f64::NAN,
                    mask_term: f64::NAN,
                    mask_iou_estimate: f64::NAN,
                    general_fraction,
                    grad_norm: f64::NAN,
                    skipped: true,
                });
            }
            Err(e) => return Err(e),
        };
        self.nonfinite_streak = 0;
        let grads = terms.total.backward()?;
        let norm = self.optimizer.grad_norm(&grads)?;
        let clip = self.config.grad_clip;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.optimizer.step(&grads, scale)?;
        self.step += 1;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(StepMetrics {
            step,
            stage,
            total: scalar(&terms.total)?,
            diffusion_term: scalar(&terms.diffusion)?,
            mask_term: scalar(&terms.mask)?,
            mask_iou_estimate: mask_iou_estimate(&logits.detach(), &batch.gt_mask)?,
            general_fraction,
            grad_norm: norm,
            skipped: false,
        })
    }

    /// Snapshot of parameters, optimizer state and counters.
    pub fn checkpoint(&self) -> ControlCheckpoint {
        ControlCheckpoint {
            params: self.model.params().iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
            optimizer: self.optimizer.state(),
            step: self.step,
            skipped_steps: self.skipped_steps,
            train_config: self.config.clone(),
            control_config: self.model.config.clone(),
            backbone_id: self.backbone.id().to_string(),
            backbone_path: self.backbone_path.clone(),
        }
    }

    /// Runs until `total_steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        let total = self.config.total_steps() as u64;
        while self.step < total {
            let batch = self.batch_for(self.step as usize)?;
            let m = self.train_step(&batch)?;
            if self.config.log_every > 0 && m.step % self.config.log_every as u64 == 0 {
                info!(
                    "step {} (stage {}): total {:.4} diffusion {:.4} mask {:.4} iou {:.3}",
                    m.step, m.stage, m.total, m.diffusion_term, m.mask_term, m.mask_iou_estimate
                );
            }
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// `(B, 1, H, W)` tensor from equally sized planes.
pub fn planes_to_tensor(planes: &[Plane], dtype: DType) -> Result<Tensor> {
    let Some(first) = planes.first() else {
        return Err(Error::Shape("empty mask batch".into()));
    };
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if p.shape() != (h, w) {
            return Err(Error::Shape("masks in a batch must share one size".into()));
        }
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_vec(data, (planes.len(), 1, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Where `train_loop` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct LoopOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("control-{step:07}.safetensors"))
}

/// Trains from scratch, or from `resume`, through both stages. Returns the
/// final checkpoint and the metrics of the steps run here.
pub fn train_loop(
    backbone: &Backbone,
    general: &[Triplet],
    bokeh: &[Triplet],
    config: &TrainConfig,
    control: &ControlConfig,
    resume: Option<&ControlCheckpoint>,
    outputs: &LoopOutputs,
) -> Result<(ControlCheckpoint, Vec<StepMetrics>)> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(backbone, general, bokeh, ckpt)?,
        None => Trainer::new(backbone, general, bokeh, config.clone(), control.clone())?,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match &outputs.metrics_path {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    };
    let mut metrics = Vec::new();
    let every = trainer.config.checkpoint_every as u64;
    trainer.run(|t, m| {
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(m)?)?;
        }
        metrics.push(m.clone());
        if let Some(dir) = &outputs.checkpoint_dir {
            if every > 0 && t.step() % every == 0 {
                t.checkpoint().save(checkpoint_path(dir, t.step()))?;
            }
        }
        Ok(())
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    let ckpt = trainer.checkpoint();
    if let Some(dir) = &outputs.checkpoint_dir {
        ckpt.save(dir.join("control-final.safetensors"))?;
    }
    Ok((ckpt, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn uniform_logits_give_ln2() {
        let dev = Device::Cpu;
        let logits = Tensor::zeros((1, 1, 4, 4), DType::F64, &dev).unwrap();
        let gt = Tensor::from_vec((0..16).map(|i| (i % 2) as f64).collect::<Vec<_>>(), (1, 1, 4, 4), &dev).unwrap();
        let eps = Tensor::ones((1, 2, 2, 2), DType::F64, &dev).unwrap();
        let t = training_loss(&eps, &eps, &logits, &gt, 0.5).unwrap();
        let m = t.mask.to_scalar::<f64>().unwrap();
        assert!((m - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn plan_is_replayable() {
        let cfg = TrainConfig { stage1_steps: 2, stage2_steps: 2, ..Default::default() };
        let a = plan_batch(&cfg, 3, 10, 5, 1000).unwrap();
        let b = plan_batch(&cfg, 3, 10, 5, 1000).unwrap();
        assert_eq!(a, b);
        assert!(plan_batch(&cfg, 0, 10, 5, 1000).unwrap().iter().all(|d| d.source == Source::General));
    }
}
