//! Trainable control branch, attention-pyramid mask decoder and the
//! mask-modulated feature fusion.

mod modulation;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use modulation::{
    fuse, modulation_map, resize_mask, resize_mask_tensor, site_maps, ModulatedInjection, ModulationStats,
};

use crate::diffusion::{Backbone, BackboneConfig, Encoder, UNetConfig, REDUCTION};
use crate::error::{Error, Result};
use crate::nn::{groups_for, space_to_depth, upsample_nearest, Conv2d, GroupNorm, Init, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    /// Hidden width of the LQ conditioning stem.
    pub stem_hidden: usize,
    /// Channel width of the mask decoder.
    pub mask_width: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            stem_hidden: 32,
            mask_width: 16,
        }
    }
}

/// Per-site conditional features and the attention pyramid, both coarse to
/// fine. Attention maps have shape `(B, L, H_l, W_l)`: one channel per token.
pub struct ControlOutputs {
    pub features: Vec<Tensor>,
    pub attn: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ControlBranch {
    encoder: Encoder,
    stem: [Conv2d; 2],
    zero: Vec<Conv2d>,
}

impl ControlBranch {
    pub fn new(vb: &ParamBuilder, unet: &UNetConfig, cfg: &ControlConfig) -> Result<Self> {
        let px = 3 * REDUCTION * REDUCTION;
        let zero = unet
            .site_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&vb.pp(format!("zero{i}")), c, c, 1, Init::Zeros))
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder: Encoder::new(&vb.pp("encoder"), unet)?,
            stem: [
                Conv2d::new(&vb.pp("stem0"), px, cfg.stem_hidden, 3, Init::FanIn(1.0))?,
                Conv2d::new(&vb.pp("stem1"), cfg.stem_hidden, unet.channels[0], 3, Init::FanIn(0.1))?,
            ],
            zero,
        })
    }

    pub fn forward(&self, lq: &Tensor, text: &Tensor, z_t: &Tensor, timesteps: &[usize]) -> Result<ControlOutputs> {
        let (_, _, h, w) = lq.dims4()?;
        let (_, _, zh, zw) = z_t.dims4()?;
        if h != zh * REDUCTION || w != zw * REDUCTION {
            return Err(Error::Shape(format!(
                "LQ image {h}x{w} does not match latent {zh}x{zw}"
            )));
        }
        let s = space_to_depth(&lq.affine(2.0, -1.0)?, REDUCTION)?;
        let s = self.stem[1].forward(&self.stem[0].forward(&s)?.silu()?)?;
        let enc = self.encoder.forward(z_t, timesteps, text, Some(&s))?;
        let mut raw = vec![enc.mid];
        raw.extend(enc.skips.into_iter().rev());
        let features = raw
            .iter()
            .zip(&self.zero)
            .map(|(f, z)| z.forward(f))
            .collect::<Result<Vec<_>>>()?;
        let mut attn = Vec::with_capacity(enc.attn.len());
        for (a, f) in enc.attn.iter().rev().zip(&raw) {
            let (b, _, fh, fw) = f.dims4()?;
            let l = a.dim(2)?;
            attn.push(a.transpose(1, 2)?.reshape((b, l, fh, fw))?);
        }
        Ok(ControlOutputs { features, attn })
    }
}

#[derive(Debug, Clone)]
struct Cgr {
    conv: Conv2d,
    norm: GroupNorm,
}

impl Cgr {
    fn new(vb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&vb.pp("conv"), c_in, c_out, 3, Init::FanIn(1.4))?,
            norm: GroupNorm::new(&vb.pp("norm"), c_out, groups_for(c_out))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct DecoderScale {
    merge: Option<Cgr>,
    cgr1: Cgr,
    cgr2: Cgr,
}

/// Pyramidal Conv-GN-ReLU decoder from attention maps to mask logits.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    scales: Vec<DecoderScale>,
    proj: Conv2d,
}

impl MaskDecoder {
    pub fn new(vb: &ParamBuilder, scales: usize, tokens: usize, width: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(scales);
        for l in 0..scales {
            let sv = vb.pp(format!("scale{l}"));
            let (merge, first_in) = if l == 0 {
                (None, tokens)
            } else {
                (Some(Cgr::new(&sv.pp("merge"), width + tokens, width)?), width)
            };
            out.push(DecoderScale {
                merge,
                cgr1: Cgr::new(&sv.pp("cgr1"), first_in, width)?,
                cgr2: Cgr::new(&sv.pp("cgr2"), width, width)?,
            });
        }
        Ok(Self {
            scales: out,
            proj: Conv2d::new(&vb.pp("proj"), width, 1, 1, Init::FanIn(1.0))?,
        })
    }

    /// `attn` coarse to fine, each `(B, L, H_l, W_l)`; returns logits
    /// `(B, 1, H, W)` at the finest scale.
    pub fn forward(&self, attn: &[Tensor]) -> Result<Tensor> {
        if attn.len() != self.scales.len() {
            return Err(Error::Shape(format!(
                "mask decoder expects {} scales, got {}",
                self.scales.len(),
                attn.len()
            )));
        }
        let mut h: Option<Tensor> = None;
        for (scale, a) in self.scales.iter().zip(attn) {
            let x = match (&h, &scale.merge) {
                (Some(prev), Some(merge)) => {
                    let factor = a.dim(2)? / prev.dim(2)?;
                    let up = upsample_nearest(prev, factor.max(1))?;
                    merge.forward(&Tensor::cat(&[&up, a], 1)?)?
                }
                _ => a.clone(),
            };
            h = Some(scale.cgr2.forward(&scale.cgr1.forward(&x)?)?);
        }
        self.proj.forward(&h.expect("at least one scale"))
    }
}

/// Control branch plus mask decoder, tied to one backbone.
#[derive(Debug, Clone)]
pub struct ControlModel {
    pub config: ControlConfig,
    pub branch: ControlBranch,
    pub mask_decoder: MaskDecoder,
    pub backbone_id: String,
    params: BTreeMap<String, Tensor>,
}

/// Initial control parameters: encoder weights copied from the backbone.
pub fn transfer_from_backbone(backbone: &Backbone) -> BTreeMap<String, Tensor> {
    backbone
        .params()
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("unet.encoder.")
                .map(|rest| (format!("control.encoder.{rest}"), v.clone()))
        })
        .collect()
}

impl ControlModel {
    /// Builds the model. Names missing from `preset` are initialized from
    /// `seed` unless `strict`. Returns the trainable variables when
    /// `trainable` (empty otherwise).
    pub fn build(
        backbone: &Backbone,
        cfg: &ControlConfig,
        preset: BTreeMap<String, Tensor>,
        strict: bool,
        seed: u64,
        trainable: bool,
    ) -> Result<(Self, BTreeMap<String, Var>)> {
        let bcfg: &BackboneConfig = &backbone.config;
        let unet = bcfg.unet();
        let vb = ParamBuilder::with_preset(preset, strict, seed, backbone.dtype(), &Device::Cpu, trainable);
        let branch = ControlBranch::new(&vb.pp("control"), &unet, cfg)?;
        let mask_decoder = MaskDecoder::new(&vb.pp("mask_decoder"), unet.site_count(), bcfg.max_tokens, cfg.mask_width)?;
        let model = Self {
            config: cfg.clone(),
            branch,
            mask_decoder,
            backbone_id: backbone.id().to_string(),
            params: vb.params(),
        };
        Ok((model, vb.vars()))
    }

    /// Fresh model for training on top of `backbone`.
    pub fn init(backbone: &Backbone, cfg: &ControlConfig, seed: u64, trainable: bool) -> Result<(Self, BTreeMap<String, Var>)> {
        Self::build(backbone, cfg, transfer_from_backbone(backbone), false, seed, trainable)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Frozen copy with the current parameter values in `dtype`.
    pub fn frozen(&self, backbone: &Backbone) -> Result<Self> {
        if backbone.id() != self.backbone_id && backbone.dtype() == DType::F32 {
            return Err(Error::CheckpointMismatch(format!(
                "control model trained on backbone {} but given {}",
                self.backbone_id,
                backbone.id()
            )));
        }
        let preset = self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect();
        let (mut m, _) = Self::build(backbone, &self.config, preset, true, 0, false)?;
        m.backbone_id = self.backbone_id.clone();
        Ok(m)
    }

    pub fn forward(&self, lq: &Tensor, text: &Tensor, z_t: &Tensor, timesteps: &[usize]) -> Result<ControlOutputs> {
        self.branch.forward(lq, text, z_t, timesteps)
    }

    pub fn decode_mask(&self, attn: &[Tensor]) -> Result<Tensor> {
        self.mask_decoder.forward(attn)
    }
}
