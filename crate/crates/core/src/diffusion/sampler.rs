use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::unet::Injector;
use super::Backbone;
use crate::error::{Error, Result};

/// Evenly strided timesteps, largest first, ending `T / steps - 1` above 0:
/// for T=1000 and 50 steps this is 999, 979, ..., 19.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    let steps = steps.min(timesteps);
    Ok((0..steps).map(|i| timesteps - 1 - i * timesteps / steps).collect())
}

/// Deterministic DDIM update. Returns `(z_prev, z0_estimate)`.
pub fn ddim_step(z_t: &Tensor, eps: &Tensor, alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<(Tensor, Tensor)> {
    ddim_step_clipped(z_t, eps, alpha_bar_t, alpha_bar_prev, None)
}

/// DDIM update whose `z0` estimate is first clamped to `[-clip, clip]`; the
/// noise estimate is then re-derived from the clamped `z0` so the two stay
/// consistent with `z_t`.
pub fn ddim_step_clipped(
    z_t: &Tensor,
    eps: &Tensor,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    clip: Option<f64>,
) -> Result<(Tensor, Tensor)> {
    let mut z0 = ((z_t - (eps * (1.0 - alpha_bar_t).sqrt())?)? / alpha_bar_t.sqrt())?;
    let mut eps = eps.clone();
    if let Some(c) = clip {
        z0 = z0.clamp(-c, c)?;
        if alpha_bar_t < 1.0 {
            eps = ((z_t - (&z0 * alpha_bar_t.sqrt())?)? / (1.0 - alpha_bar_t).sqrt())?;
        }
    }
    let z_prev = ((&z0 * alpha_bar_prev.sqrt())? + (eps * (1.0 - alpha_bar_prev).sqrt())?)?;
    Ok((z_prev, z0))
}

/// One seeded standard-normal draw per batch row; row `i` depends only on
/// `seeds[i]`.
pub fn initial_noise(seeds: &[u64], item_shape: (usize, usize, usize), dtype: DType, device: &Device) -> Result<Tensor> {
    let (c, h, w) = item_shape;
    let mut data = Vec::with_capacity(seeds.len() * c * h * w);
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        data.extend((0..c * h * w).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)));
    }
    Ok(Tensor::from_vec(data, (seeds.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Supplies the injection used at each sampling step.
pub trait SamplerHook {
    fn at_step(&mut self, z_t: &Tensor, t: usize, step: usize) -> Result<Option<Box<dyn Injector>>>;
}

/// DDIM (eta = 0) starting from seeded noise; one seed per batch row.
pub fn ddim_sample(
    backbone: &Backbone,
    hook: Option<&mut dyn SamplerHook>,
    text: &Tensor,
    steps: usize,
    seeds: &[u64],
    latent_hw: (usize, usize),
) -> Result<Tensor> {
    let shape = (backbone.config.latent_channels, latent_hw.0, latent_hw.1);
    let z = initial_noise(seeds, shape, backbone.dtype(), backbone.device())?;
    ddim_sample_from(backbone, hook, text, steps, &z)
}

/// DDIM (eta = 0) from `z_init`, taken to be at the largest strided timestep.
pub fn ddim_sample_from(
    backbone: &Backbone,
    mut hook: Option<&mut dyn SamplerHook>,
    text: &Tensor,
    steps: usize,
    z_init: &Tensor,
) -> Result<Tensor> {
    let schedule = &backbone.schedule;
    let ts = ddim_timesteps(schedule.len(), steps)?;
    let b = z_init.dim(0)?;
    let mut z = z_init.clone();
    for (k, &t) in ts.iter().enumerate() {
        let injector = match hook.as_deref_mut() {
            Some(h) => h.at_step(&z, t, k)?,
            None => None,
        };
        let eps = backbone.forward(&z, &vec![t; b], text, injector.as_deref())?.eps;
        let ab_prev = ts.get(k + 1).map(|&p| schedule.alpha_bar(p)).unwrap_or(1.0);
        let clip = backbone.config.sample_clip;
        let clip = (clip > 0.0).then_some(clip);
        z = ddim_step_clipped(&z, &eps, schedule.alpha_bar(t), ab_prev, clip)?.0;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_timesteps() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(ts[1], 979);
        assert_eq!(*ts.last().unwrap(), 19);
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![999]);
        assert!(ddim_timesteps(10, 0).is_err());
        assert_eq!(ddim_timesteps(4, 10).unwrap(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn final_step_returns_estimate() {
        let dev = Device::Cpu;
        let z = Tensor::new(&[0.3f64, -1.2, 2.0], &dev).unwrap();
        let e = Tensor::new(&[0.1f64, 0.5, -0.7], &dev).unwrap();
        let (prev, z0) = ddim_step(&z, &e, 0.37, 1.0).unwrap();
        assert_eq!(prev.to_vec1::<f64>().unwrap(), z0.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn noise_rows_follow_their_seed() {
        let dev = Device::Cpu;
        let a = initial_noise(&[1, 2], (2, 3, 3), DType::F32, &dev).unwrap();
        let b = initial_noise(&[2], (2, 3, 3), DType::F32, &dev).unwrap();
        assert_eq!(
            a.get(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
