//! Instruction-driven restoration: parse, predict the region mask, then run
//! DDIM with mask-modulated control features at every step.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::control::{resize_mask, site_maps, ControlModel, ModulatedInjection, ModulationStats};
use crate::diffusion::{ddim_sample_from, ddim_timesteps, initial_noise, Backbone, Injector, SamplerHook};
use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::data_engine::Triplet;
use crate::instruction::{derive_prompts, parse_inference_instruction, Instruction, PromptPair, Task};
use crate::training::{planes_to_tensor, ControlCheckpoint};

pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone)]
pub struct RestoreRequest {
    /// Low-quality input in [0,1].
    pub lq: Image,
    pub instruction: String,
    pub steps: usize,
    pub seed: u64,
    /// Re-predict the mask at every sampling step instead of only the first.
    pub mask_per_step: bool,
    /// Use this mask (input resolution) instead of the predicted one.
    pub oracle_mask: Option<Plane>,
}

impl RestoreRequest {
    pub fn new(lq: Image, instruction: impl Into<String>) -> Self {
        Self {
            lq,
            instruction: instruction.into(),
            steps: DEFAULT_STEPS,
            seed: 0,
            mask_per_step: false,
            oracle_mask: None,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct RestoreResult {
    pub image: Image,
    /// Soft mask at input resolution, in [0,1].
    pub mask: Plane,
    pub instruction: Instruction,
    pub prompts: PromptPair,
    /// Extremes of the modulation map at each site, coarse to fine.
    pub modulation: Vec<ModulationStats>,
}

/// Frozen backbone plus a frozen control model trained on it.
pub struct Restorer {
    backbone: Backbone,
    model: ControlModel,
}

struct Parsed {
    instruction: Instruction,
    prompts: PromptPair,
}

impl Restorer {
    pub fn new(backbone: Backbone, model: ControlModel) -> Result<Self> {
        if backbone.dtype() == DType::F32 && backbone.id() != model.backbone_id {
            return Err(Error::CheckpointMismatch(format!(
                "control model expects backbone {} but got {}",
                model.backbone_id,
                backbone.id()
            )));
        }
        Ok(Self { backbone, model })
    }

    pub fn from_checkpoint(backbone: Backbone, ckpt: &ControlCheckpoint) -> Result<Self> {
        let model = ckpt.model(&backbone)?;
        Self::new(backbone, model)
    }

    pub fn load(backbone_path: impl AsRef<Path>, control_path: impl AsRef<Path>) -> Result<Self> {
        let backbone = Backbone::load(backbone_path, DType::F32)?;
        let ckpt = ControlCheckpoint::load(control_path)?;
        Self::from_checkpoint(backbone, &ckpt)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn model(&self) -> &ControlModel {
        &self.model
    }

    pub fn restore(&self, req: &RestoreRequest) -> Result<RestoreResult> {
        Ok(self.restore_batch(std::slice::from_ref(req))?.remove(0))
    }

    pub fn preview_mask(&self, req: &RestoreRequest) -> Result<Plane> {
        Ok(self.preview_masks(std::slice::from_ref(req))?.remove(0))
    }

    /// Masks that `restore_batch` would use, without sampling.
    pub fn preview_masks(&self, reqs: &[RestoreRequest]) -> Result<Vec<Plane>> {
        let (_, mut hook, z) = self.prepare(reqs)?;
        let t = ddim_timesteps(self.backbone.schedule.len(), reqs[0].steps)?[0];
        hook.at_step(&z, t, 0)?;
        masks_at_input(&hook.mask.expect("first step sets the mask"), reqs)
    }

    /// Restores several requests in one batch. They must share image size,
    /// step count and mask mode; seeds and instructions may differ.
    pub fn restore_batch(&self, reqs: &[RestoreRequest]) -> Result<Vec<RestoreResult>> {
        let (parsed, mut hook, z) = self.prepare(reqs)?;
        let prompts: Vec<&str> = parsed.iter().map(|p| p.prompts.backbone_prompt.as_str()).collect();
        let text = self.backbone.embed_prompts(&prompts)?;
        let z0 = ddim_sample_from(&self.backbone, Some(&mut hook), &text, reqs[0].steps, &z)?;
        let images = self.backbone.decode_images(&z0)?;
        let mask = hook.mask.clone().expect("sampling sets the mask");
        let masks = masks_at_input(&mask, reqs)?;
        let maps = hook.maps.expect("sampling sets the maps");
        let mut out = Vec::with_capacity(reqs.len());
        for (i, ((image, mask), p)) in images.into_iter().zip(masks).zip(parsed).enumerate() {
            let modulation = maps
                .iter()
                .map(|m| ModulationStats::of(&m.narrow(0, i, 1)?))
                .collect::<Result<Vec<_>>>()?;
            out.push(RestoreResult {
                image,
                mask,
                instruction: p.instruction,
                prompts: p.prompts,
                modulation,
            });
        }
        Ok(out)
    }

    fn prepare(&self, reqs: &[RestoreRequest]) -> Result<(Vec<Parsed>, RestoreHook<'_>, Tensor)> {
        let first = reqs.first().ok_or_else(|| Error::Shape("no requests".into()))?;
        let (h, w) = first.lq.shape();
        let multiple = self.backbone.config.size_multiple();
        if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} must have both sides divisible by {multiple}"
            )));
        }
        if first.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        for r in reqs {
            if r.lq.shape() != (h, w) || r.steps != first.steps || r.mask_per_step != first.mask_per_step {
                return Err(Error::Shape(
                    "batched requests must share image size, steps and mask mode".into(),
                ));
            }
            if r.oracle_mask.is_some() != first.oracle_mask.is_some() {
                return Err(Error::Shape("either every request or none carries an oracle mask".into()));
            }
            if let Some(m) = &r.oracle_mask {
                if m.shape() != (h, w) {
                    return Err(Error::MaskShapeMismatch { mask: m.shape(), image: (h, w) });
                }
            }
        }
        let parsed = reqs
            .iter()
            .map(|r| {
                let instruction = parse_inference_instruction(&r.instruction)?;
                let prompts = derive_prompts(&instruction);
                Ok(Parsed { instruction, prompts })
            })
            .collect::<Result<Vec<_>>>()?;

        let dtype = self.backbone.dtype();
        let lq_refs: Vec<&Image> = reqs.iter().map(|r| &r.lq).collect();
        let lq = self.backbone.images_to_tensor(&lq_refs)?;
        let control_prompts: Vec<&str> = parsed.iter().map(|p| p.prompts.control_prompt.as_str()).collect();
        let (lh, lw) = (h / crate::diffusion::REDUCTION, w / crate::diffusion::REDUCTION);
        let oracle = if first.oracle_mask.is_some() {
            let planes: Vec<Plane> = reqs
                .iter()
                .map(|r| resize_mask(r.oracle_mask.as_ref().expect("checked above"), lh, lw))
                .collect();
            Some(planes_to_tensor(&planes, dtype)?)
        } else {
            None
        };
        let hook = RestoreHook {
            model: &self.model,
            lq,
            control_text: self.backbone.embed_prompts(&control_prompts)?,
            scales: parsed.iter().map(|p| (p.instruction.s1(), p.instruction.s2())).collect(),
            mask_per_step: first.mask_per_step,
            oracle,
            mask: None,
            maps: None,
        };
        let seeds: Vec<u64> = reqs.iter().map(|r| r.seed).collect();
        let z = initial_noise(&seeds, (self.backbone.config.latent_channels, lh, lw), dtype, self.backbone.device())?;
        Ok((parsed, hook, z))
    }
}

fn masks_at_input(mask: &Tensor, reqs: &[RestoreRequest]) -> Result<Vec<Plane>> {
    let (b, _, h, w) = mask.dims4()?;
    let data = mask.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    (0..b)
        .map(|i| {
            let plane = Plane::from_vec(h, w, data[i * h * w..(i + 1) * h * w].to_vec())?;
            let (ih, iw) = reqs[i].lq.shape();
            Ok(resize_mask(&plane, ih, iw))
        })
        .collect()
}

struct RestoreHook<'a> {
    model: &'a ControlModel,
    lq: Tensor,
    control_text: Tensor,
    scales: Vec<(f64, f64)>,
    mask_per_step: bool,
    oracle: Option<Tensor>,
    /// Soft mask `(B, 1, h, w)` at latent resolution.
    mask: Option<Tensor>,
    maps: Option<Vec<Tensor>>,
}

impl SamplerHook for RestoreHook<'_> {
    fn at_step(&mut self, z_t: &Tensor, t: usize, _step: usize) -> Result<Option<Box<dyn Injector>>> {
        let b = z_t.dim(0)?;
        let out = self.model.forward(&self.lq, &self.control_text, z_t, &vec![t; b])?;
        if self.mask.is_none() || self.mask_per_step {
            let mask = match &self.oracle {
                Some(m) => m.clone(),
                None => candle_nn::ops::sigmoid(&self.model.decode_mask(&out.attn)?)?,
            };
            self.maps = Some(site_maps(&out.features, &mask, &self.scales)?);
            self.mask = Some(mask);
        }
        let maps = self.maps.clone().expect("set above");
        Ok(Some(Box::new(ModulatedInjection::with_maps(out.features, maps))))
    }
}

/// Instruction naming a triplet's region: the bokeh template for bokeh
/// triplets, the local one otherwise.
pub fn triplet_instruction(t: &Triplet, s1: f64, s2: f64) -> Result<Instruction> {
    let task = if t.is_bokeh() { Task::BokehRestore } else { Task::LocalRestore };
    Instruction::new(task, t.caption.clone(), s1, s2)
}
