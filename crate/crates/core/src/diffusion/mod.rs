//! Latent diffusion backbone: schedule, codec, text encoder, U-Net, DDIM
//! sampling, pretraining and checkpoint I/O.

mod codec;
mod pretrain;
mod sampler;
mod schedule;
mod text;
mod unet;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use codec::{Codec, REDUCTION};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainReport};
pub use sampler::{
    ddim_sample, ddim_sample_from, ddim_step, ddim_step_clipped, ddim_timesteps, initial_noise, SamplerHook};
pub use schedule::{forward_noise, make_cosine_schedule, v_to_eps, NoiseSchedule, ALPHA_BAR_FLOOR};
pub use text::{tokenize, TextEncoder, PAD_TOKEN};
pub use unet::{Encoder, EncoderOutput, Injector, UNet, UNetConfig, UNetOutput};

use crate::checkpoint::{load_archive, meta_get, save_archive, FORMAT_KEY};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::ParamBuilder;

pub struct BackboneOutput {
    pub eps: Tensor,
    /// Backbone features at each injection site before fusion, coarse to fine.
    pub site_features: Vec<Tensor>,
}

pub const BACKBONE_FORMAT: &str = "region-restore-backbone/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub timesteps: usize,
    pub latent_channels: usize,
    pub codec_hidden: usize,
    pub vocab_size: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub unet_channels: Vec<usize>,
    pub time_dim: usize,
    /// Bound on the sampler's `z0` estimates; 0 disables clamping.
    pub sample_clip: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            latent_channels: 16,
            codec_hidden: 64,
            vocab_size: 512,
            text_dim: 32,
            max_tokens: 12,
            unet_channels: vec![32, 48, 64],
            time_dim: 64,
            sample_clip: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.latent_channels,
            channels: self.unet_channels.clone(),
            text_dim: self.text_dim,
            time_dim: self.time_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 2 {
            return Err(Error::InvalidConfig("timesteps must be >= 2".into()));
        }
        if self.vocab_size < 2 || self.max_tokens == 0 || self.text_dim == 0 {
            return Err(Error::InvalidConfig("text encoder needs vocab >= 2, tokens >= 1, dim >= 1".into()));
        }
        if self.latent_channels == 0 || self.codec_hidden == 0 {
            return Err(Error::InvalidConfig("codec sizes must be positive".into()));
        }
        self.unet().validate()
    }

    /// Smallest image side multiple accepted by codec plus U-Net.
    pub fn size_multiple(&self) -> usize {
        REDUCTION << (self.unet_channels.len().saturating_sub(1))
    }
}

/// Frozen backbone: codec, text encoder, U-Net and noise schedule.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub schedule: NoiseSchedule,
    pub codec: Codec,
    pub text: TextEncoder,
    pub unet: UNet,
    params: BTreeMap<String, Tensor>,
    id: String,
    dtype: DType,
    device: Device,
}

pub(crate) fn build_parts(cfg: &BackboneConfig, vb: &ParamBuilder) -> Result<(Codec, TextEncoder, UNet)> {
    cfg.validate()?;
    Ok((
        Codec::new(&vb.pp("codec"), cfg.codec_hidden, cfg.latent_channels)?,
        TextEncoder::new(&vb.pp("text"), cfg.vocab_size, cfg.text_dim, cfg.max_tokens)?,
        UNet::new(&vb.pp("unet"), &cfg.unet())?,
    ))
}

impl Backbone {
    /// Randomly initialized frozen backbone.
    pub fn init(cfg: &BackboneConfig, seed: u64, dtype: DType) -> Result<Self> {
        let vb = ParamBuilder::init(seed, dtype, &Device::Cpu, false);
        let (codec, text, unet) = build_parts(cfg, &vb)?;
        Self::assemble(cfg, codec, text, unet, vb.params(), dtype)
    }

    /// Frozen backbone from named parameters; every parameter must be present.
    pub fn from_params(
        cfg: &BackboneConfig,
        params: BTreeMap<String, Tensor>,
        latent_scale: f64,
        dtype: DType,
    ) -> Result<Self> {
        let vb = ParamBuilder::with_preset(params, true, 0, dtype, &Device::Cpu, false);
        let (mut codec, text, unet) = build_parts(cfg, &vb)?;
        codec.latent_scale = latent_scale;
        Self::assemble(cfg, codec, text, unet, vb.params(), dtype)
    }

    fn assemble(
        cfg: &BackboneConfig,
        codec: Codec,
        text: TextEncoder,
        unet: UNet,
        params: BTreeMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        let schedule = make_cosine_schedule(cfg.timesteps)?;
        let mut h = Sha256::new();
        h.update(serde_json::to_string(cfg)?.as_bytes());
        h.update(codec.latent_scale.to_le_bytes());
        h.update(crate::nn::hash_params(&params)?.as_bytes());
        Ok(Self {
            config: cfg.clone(),
            schedule,
            codec,
            text,
            unet,
            params,
            id: hex::encode(h.finalize()),
            dtype,
            device: Device::Cpu,
        })
    }

    /// Content hash over config, latent scale and parameter values.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_params(&self.config, self.params.clone(), self.codec.latent_scale, dtype)
    }

    pub fn images_to_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        images_to_tensor(images, self.dtype, &self.device)
    }

    pub fn encode_images(&self, images: &[&Image]) -> Result<Tensor> {
        self.codec.encode(&self.images_to_tensor(images)?)
    }

    /// Decodes latents and clips to [0,1].
    pub fn decode_images(&self, latents: &Tensor) -> Result<Vec<Image>> {
        tensor_to_images(&self.codec.decode(latents)?.clamp(0.0, 1.0)?)
    }

    /// `(B, L, D)` prompt embeddings.
    pub fn embed_prompts(&self, prompts: &[&str]) -> Result<Tensor> {
        Ok(self.text.embed_batch(prompts, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Noise prediction. The U-Net head predicts velocity, which keeps the
    /// implied `z0` bounded where ᾱ is tiny.
    pub fn forward(
        &self,
        z_t: &Tensor,
        timesteps: &[usize],
        text: &Tensor,
        injector: Option<&dyn Injector>,
    ) -> Result<BackboneOutput> {
        let out = self.unet.forward(z_t, timesteps, text, injector)?;
        Ok(BackboneOutput {
            eps: v_to_eps(&out.v, z_t, timesteps, &self.schedule)?,
            site_features: out.site_features,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = self.params.clone();
        tensors.insert(
            "schedule.alpha_bar".into(),
            Tensor::new(self.schedule.alpha_bar.as_slice(), &Device::Cpu)?,
        );
        let mut meta = BTreeMap::new();
        meta.insert(FORMAT_KEY.to_string(), BACKBONE_FORMAT.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("latent_scale".to_string(), format!("{:e}", self.codec.latent_scale));
        meta.insert("backbone_id".to_string(), self.id.clone());
        save_archive(path, &tensors, meta)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let (mut tensors, meta) = load_archive(path, BACKBONE_FORMAT)?;
        let cfg: BackboneConfig = serde_json::from_str(meta_get(&meta, "config")?)?;
        let latent_scale: f64 = meta_get(&meta, "latent_scale")?
            .parse()
            .map_err(|e| Error::CheckpointFormat(format!("latent_scale: {e}")))?;
        tensors.remove("schedule.alpha_bar");
        let backbone = Self::from_params(&cfg, tensors, latent_scale, dtype)?;
        if let Some(stored) = meta.get("backbone_id") {
            if dtype == DType::F32 && stored != backbone.id() {
                return Err(Error::CheckpointMismatch(format!(
                    "backbone id recorded as {stored} but contents hash to {}",
                    backbone.id()
                )));
            }
        }
        Ok(backbone)
    }
}

pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape("images in a batch must share one size".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    flat
        .chunks(3 * h * w)
        .take(b)
        .map(|chunk| Image::from_vec(h, w, chunk.to_vec()))
        .collect::<Result<_>>()
}
