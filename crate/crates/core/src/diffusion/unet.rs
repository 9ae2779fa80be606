//! Noise-prediction U-Net with cross-attention at every resolution.
//!
//! Injection sites are numbered coarse to fine: site 0 is the middle-block
//! output, site `k` (1..=n) is the encoder skip of level `n - k`. Each site's
//! feature is handed to an optional [`Injector`] before the decoder consumes it.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    groups_for, space_to_depth, upsample_nearest, Conv2d, CrossAttention, GroupNorm, Init, ParamBuilder, ResBlock,
    TimeEmbedding,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub text_dim: usize,
    pub time_dim: usize,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn site_count(&self) -> usize {
        self.channels.len() + 1
    }

    /// Channel count per injection site, coarse to fine.
    pub fn site_channels(&self) -> Vec<usize> {
        let n = self.levels();
        let mut out = vec![self.channels[n - 1]];
        out.extend((0..n).rev().map(|i| self.channels[i]));
        out
    }

    /// Spatial downsampling factor per injection site relative to the input.
    pub fn site_strides(&self) -> Vec<usize> {
        let n = self.levels();
        let mut out = vec![1 << (n - 1)];
        out.extend((0..n).rev().map(|i| 1 << i));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("U-Net needs at least one non-empty level".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("time_dim must be even".into()));
        }
        Ok(())
    }
}

/// Receives the backbone feature at an injection site and returns the
/// feature the decoder should use.
pub trait Injector {
    fn inject(&self, site: usize, f_sd: &Tensor) -> Result<Tensor>;
}

pub struct EncoderOutput {
    pub temb: Tensor,
    /// Encoder outputs per level, finest first.
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
    /// Attention probabilities `(B, H*W, L)` per level, finest first, then mid.
    pub attn: Vec<Tensor>,
}

/// Input convolution, encoder levels and middle block; shared in structure
/// by the backbone and the control branch.
#[derive(Debug, Clone)]
pub struct Encoder {
    time: TimeEmbedding,
    conv_in: Conv2d,
    levels: Vec<(ResBlock, CrossAttention)>,
    downs: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
}

impl Encoder {
    pub fn new(vb: &ParamBuilder, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.levels();
        let c = &cfg.channels;
        let mut levels = Vec::with_capacity(n);
        let mut downs = Vec::new();
        let mut prev = c[0];
        for i in 0..n {
            let lv = vb.pp(format!("level{i}"));
            levels.push((
                ResBlock::new(&lv.pp("res"), prev, c[i], cfg.time_dim)?,
                CrossAttention::new(&lv.pp("attn"), c[i], cfg.text_dim)?,
            ));
            if i + 1 < n {
                downs.push(Conv2d::new(&vb.pp(format!("down{i}")), 4 * c[i], c[i], 1, Init::FanIn(1.0))?);
            }
            prev = c[i];
        }
        let top = c[n - 1];
        Ok(Self {
            time: TimeEmbedding::new(&vb.pp("time"), cfg.time_dim, cfg.time_dim)?,
            conv_in: Conv2d::new(&vb.pp("conv_in"), cfg.in_channels, c[0], 3, Init::FanIn(1.0))?,
            levels,
            downs,
            mid1: ResBlock::new(&vb.pp("mid1"), top, top, cfg.time_dim)?,
            mid_attn: CrossAttention::new(&vb.pp("mid_attn"), top, cfg.text_dim)?,
            mid2: ResBlock::new(&vb.pp("mid2"), top, top, cfg.time_dim)?,
        })
    }

    /// `extra`, when given, is added to the input-convolution output.
    pub fn forward(&self, z: &Tensor, timesteps: &[usize], text: &Tensor, extra: Option<&Tensor>) -> Result<EncoderOutput> {
        let temb = self.time.forward(timesteps, z.dtype(), z.device())?;
        let mut h = self.conv_in.forward(z)?;
        if let Some(e) = extra {
            h = (h + e)?;
        }
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut attn = Vec::with_capacity(self.levels.len() + 1);
        for (i, (res, att)) in self.levels.iter().enumerate() {
            h = res.forward(&h, &temb)?;
            let (out, a) = att.forward(&h, text)?;
            h = out;
            skips.push(h.clone());
            attn.push(a);
            if i < self.downs.len() {
                h = self.downs[i].forward(&space_to_depth(&h, 2)?)?;
            }
        }
        let h = self.mid1.forward(&h, &temb)?;
        let (h, a) = self.mid_attn.forward(&h, text)?;
        attn.push(a);
        let mid = self.mid2.forward(&h, &temb)?;
        Ok(EncoderOutput { temb, skips, mid, attn })
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    encoder: Encoder,
    dec: Vec<(ResBlock, CrossAttention)>,
    ups: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

pub struct UNetOutput {
    /// Velocity prediction `sqrt(ᾱ)·eps − sqrt(1−ᾱ)·z0`.
    pub v: Tensor,
    /// Backbone features at each injection site before fusion, coarse to fine.
    pub site_features: Vec<Tensor>,
}

impl UNet {
    pub fn new(vb: &ParamBuilder, cfg: &UNetConfig) -> Result<Self> {
        let encoder = Encoder::new(&vb.pp("encoder"), cfg)?;
        let c = &cfg.channels;
        let n = cfg.levels();
        let mut dec = Vec::with_capacity(n);
        let mut ups = Vec::new();
        for i in 0..n {
            let lv = vb.pp(format!("dec{i}"));
            dec.push((
                ResBlock::new(&lv.pp("res"), 2 * c[i], c[i], cfg.time_dim)?,
                CrossAttention::new(&lv.pp("attn"), c[i], cfg.text_dim)?,
            ));
            if i > 0 {
                ups.push(Conv2d::new(&vb.pp(format!("up{i}")), c[i], c[i - 1], 3, Init::FanIn(1.0))?);
            }
        }
        Ok(Self {
            config: cfg.clone(),
            encoder,
            dec,
            ups,
            norm_out: GroupNorm::new(&vb.pp("norm_out"), c[0], groups_for(c[0]))?,
            conv_out: Conv2d::new(&vb.pp("conv_out"), c[0], cfg.in_channels, 3, Init::FanIn(0.5))?,
        })
    }

    pub fn check_input(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        let f = 1 << (self.config.levels() - 1);
        if c != self.config.in_channels || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "latent {:?} incompatible with {} channels and {} levels",
                z.dims(),
                self.config.in_channels,
                self.config.levels()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        z_t: &Tensor,
        timesteps: &[usize],
        text: &Tensor,
        injector: Option<&dyn Injector>,
    ) -> Result<UNetOutput> {
        self.check_input(z_t)?;
        let enc = self.encoder.forward(z_t, timesteps, text, None)?;
        let n = self.config.levels();
        let fuse = |site: usize, f: &Tensor| -> Result<Tensor> {
            match injector {
                Some(inj) => {
                    let out = inj.inject(site, f)?;
                    if out.dims() != f.dims() {
                        return Err(Error::Shape(format!(
                            "site {site}: injected {:?} vs backbone {:?}",
                            out.dims(),
                            f.dims()
                        )));
                    }
                    Ok(out)
                }
                None => Ok(f.clone()),
            }
        };
        let mut site_features = Vec::with_capacity(n + 1);
        site_features.push(enc.mid.clone());
        let mut h = fuse(0, &enc.mid)?;
        for i in (0..n).rev() {
            let skip = &enc.skips[i];
            site_features.push(skip.clone());
            let skip = fuse(n - i, skip)?;
            let (res, att) = &self.dec[i];
            h = res.forward(&Tensor::cat(&[&h, &skip], 1)?, &enc.temb)?;
            h = att.forward(&h, text)?.0;
            if i > 0 {
                h = self.ups[i - 1].forward(&upsample_nearest(&h, 2)?)?;
            }
        }
        let v = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(UNetOutput { v, site_features })
    }
}
