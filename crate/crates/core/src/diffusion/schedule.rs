use candle_core::Tensor;

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
pub const ALPHA_BAR_FLOOR: f64 = 1e-4;

/// Cumulative signal fractions ᾱ_t, t = 0..T-1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Cosine schedule with offset 0.008, clipped to [1e-4, 1].
pub fn make_cosine_schedule(timesteps: usize) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::InvalidConfig(format!("timesteps must be >= 2, got {timesteps}")));
    }
    let s = COSINE_OFFSET;
    let f = |t: f64| (((t / timesteps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    let alpha_bar = (0..timesteps)
        .map(|t| (f(t as f64) / f0).clamp(ALPHA_BAR_FLOOR, 1.0))
        .collect();
    Ok(NoiseSchedule { alpha_bar })
}

/// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·eps` with one timestep per batch row.
pub fn forward_noise(z0: &Tensor, timesteps: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
    }
    let b = z0.dim(0)?;
    if timesteps.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch of {b}", timesteps.len())));
    }
    let mut rows = Vec::with_capacity(b);
    for (i, &t) in timesteps.iter().enumerate() {
        if t >= schedule.len() {
            return Err(Error::InvalidConfig(format!("timestep {t} outside schedule of {}", schedule.len())));
        }
        let ab = schedule.alpha_bar(t);
        let zi = z0.get(i)?;
        let ei = eps.get(i)?;
        rows.push(((zi * ab.sqrt())? + (ei * (1.0 - ab).sqrt())?)?);
    }
    Ok(Tensor::stack(&rows, 0)?)
}

/// Noise estimate from a velocity estimate: `sqrt(ᾱ)·v + sqrt(1−ᾱ)·z_t`.
pub fn v_to_eps(v: &Tensor, z_t: &Tensor, timesteps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = z_t.dim(0)?;
    if timesteps.len() != b || v.dims() != z_t.dims() {
        return Err(Error::Shape(format!("v {:?}, z_t {:?}, {} timesteps", v.dims(), z_t.dims(), timesteps.len())));
    }
    let mut a = Vec::with_capacity(b);
    let mut s = Vec::with_capacity(b);
    for &t in timesteps {
        if t >= schedule.len() {
            return Err(Error::InvalidConfig(format!("timestep {t} outside schedule of {}", schedule.len())));
        }
        let ab = schedule.alpha_bar(t);
        a.push(ab.sqrt());
        s.push((1.0 - ab).sqrt());
    }
    let col = |x: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(x, (b, 1, 1, 1), z_t.device())?.to_dtype(z_t.dtype())?)
    };
    Ok((v.broadcast_mul(&col(a)?)? + z_t.broadcast_mul(&col(s)?)?)?)
}
