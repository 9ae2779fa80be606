//! Convolutional autoencoder with 4x spatial reduction.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{depth_to_space, space_to_depth, Conv2d, Init, ParamBuilder};

pub const REDUCTION: usize = 4;

#[derive(Debug, Clone)]
pub struct Codec {
    enc: [Conv2d; 3],
    dec: [Conv2d; 3],
    /// Multiplier that brings encoder outputs to roughly unit variance.
    pub latent_scale: f64,
}

impl Codec {
    pub fn new(vb: &ParamBuilder, hidden: usize, latent_channels: usize) -> Result<Self> {
        let px = 3 * REDUCTION * REDUCTION;
        let e = vb.pp("enc");
        let d = vb.pp("dec");
        Ok(Self {
            enc: [
                Conv2d::new(&e.pp("0"), px, hidden, 3, Init::FanIn(1.0))?,
                Conv2d::new(&e.pp("1"), hidden, hidden, 3, Init::FanIn(1.0))?,
                Conv2d::new(&e.pp("2"), hidden, latent_channels, 1, Init::FanIn(1.0))?,
            ],
            dec: [
                Conv2d::new(&d.pp("0"), latent_channels, hidden, 3, Init::FanIn(1.0))?,
                Conv2d::new(&d.pp("1"), hidden, hidden, 3, Init::FanIn(1.0))?,
                Conv2d::new(&d.pp("2"), hidden, px, 1, Init::FanIn(1.0))?,
            ],
            latent_scale: 1.0,
        })
    }

    /// `(B, 3, H, W)` in [0,1] to scaled latents `(B, C, H/4, W/4)`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % REDUCTION != 0 || w % REDUCTION != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "codec input must be (B, 3, H, W) with H, W divisible by {REDUCTION}; got {:?}",
                images.dims()
            )));
        }
        let x = space_to_depth(&images.affine(2.0, -1.0)?, REDUCTION)?;
        let x = self.enc[0].forward(&x)?.silu()?;
        let x = (self.enc[1].forward(&x)?.silu()? + &x)?;
        Ok((self.enc[2].forward(&x)? * self.latent_scale)?)
    }

    /// Scaled latents back to `(B, 3, H, W)`; values are not clipped.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let x = (latents / self.latent_scale)?;
        let x = self.dec[0].forward(&x)?.silu()?;
        let x = (self.dec[1].forward(&x)?.silu()? + &x)?;
        let x = self.dec[2].forward(&x)?;
        Ok(depth_to_space(&x, REDUCTION)?.affine(0.5, 0.5)?)
    }
}
