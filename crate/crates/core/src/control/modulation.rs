use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::Injector;
use crate::error::{Error, Result};
use crate::image::Plane;

/// Bilinear resize clipped to [0,1]; identity at the same size.
pub fn resize_mask(mask: &Plane, height: usize, width: usize) -> Plane {
    if mask.shape() == (height, width) {
        return mask.clone().clamp01();
    }
    mask.resize_bilinear(height.max(1), width.max(1)).clamp01()
}

/// `(B, 1, H, W)` masks resized per item with [`resize_mask`].
pub fn resize_mask_tensor(mask: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, c, h, w) = mask.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("mask must have one channel, got {c}")));
    }
    let dtype = mask.dtype();
    let flat = mask.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(b * height * width);
    for chunk in flat.chunks(h * w) {
        let plane = Plane::from_vec(h, w, chunk.to_vec())?;
        out.extend(resize_mask(&plane, height, width).data);
    }
    Ok(Tensor::from_vec(out, (b, 1, height, width), mask.device())?.to_dtype(dtype)?)
}

/// `s1·M + s2·(1−M)`, clamped to `[min(s1,s2), max(s1,s2)]` so rounding
/// can never leave that interval.
pub fn modulation_map(mask: &Tensor, s1: f64, s2: f64) -> Result<Tensor> {
    let lo = s1.min(s2);
    let hi = s1.max(s2);
    let inside = mask.affine(s1, 0.0)?;
    let outside = mask.affine(-1.0, 1.0)?.affine(s2, 0.0)?;
    Ok((inside + outside)?.clamp(lo, hi)?)
}

/// `F_sd + mod ⊙ F_cond`, with `mod` broadcast over channels.
pub fn fuse(f_sd: &Tensor, f_cond: &Tensor, modulation: &Tensor) -> Result<Tensor> {
    if f_sd.dims() != f_cond.dims() {
        return Err(Error::Shape(format!(
            "backbone feature {:?} vs control feature {:?}",
            f_sd.dims(),
            f_cond.dims()
        )));
    }
    let (_, _, h, w) = f_sd.dims4()?;
    let (_, _, mh, mw) = modulation.dims4()?;
    if (h, w) != (mh, mw) {
        return Err(Error::Shape(format!("modulation {mh}x{mw} vs feature {h}x{w}")));
    }
    Ok((f_sd + modulation.broadcast_mul(f_cond)?)?)
}

/// One modulation map per site (shaped like `features`), with scales
/// `(s1, s2)` given per batch row.
pub fn site_maps(features: &[Tensor], mask: &Tensor, scales: &[(f64, f64)]) -> Result<Vec<Tensor>> {
    let b = mask.dim(0)?;
    if scales.len() != b {
        return Err(Error::Shape(format!("{} scale pairs for a batch of {b}", scales.len())));
    }
    let mut maps = Vec::with_capacity(features.len());
    for f in features {
        let (_, _, h, w) = f.dims4()?;
        let m = resize_mask_tensor(mask, h, w)?.to_dtype(f.dtype())?;
        let uniform = scales.iter().all(|s| *s == scales[0]);
        let map = if uniform {
            modulation_map(&m, scales[0].0, scales[0].1)?
        } else {
            let rows = scales
                .iter()
                .enumerate()
                .map(|(i, &(s1, s2))| modulation_map(&m.narrow(0, i, 1)?, s1, s2))
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&rows, 0)?
        };
        maps.push(map);
    }
    Ok(maps)
}

/// Per-site conditional features with their modulation maps.
#[derive(Debug, Clone)]
pub struct ModulatedInjection {
    pub features: Vec<Tensor>,
    /// `(B, 1, H_l, W_l)` per site, or `None` for the constant-1 map.
    pub maps: Option<Vec<Tensor>>,
}

impl ModulatedInjection {
    /// Injection with the constant-1 map used during training.
    pub fn unit(features: Vec<Tensor>) -> Self {
        Self { features, maps: None }
    }

    /// Builds per-site maps from a `(B, 1, H, W)` mask in [0,1].
    pub fn from_mask(features: Vec<Tensor>, mask: &Tensor, s1: f64, s2: f64) -> Result<Self> {
        let b = mask.dim(0)?;
        let maps = site_maps(&features, mask, &vec![(s1, s2); b])?;
        Ok(Self::with_maps(features, maps))
    }

    pub fn with_maps(features: Vec<Tensor>, maps: Vec<Tensor>) -> Self {
        Self {
            features,
            maps: Some(maps),
        }
    }

    pub fn stats(&self) -> Result<Vec<ModulationStats>> {
        let Some(maps) = &self.maps else {
            return Ok(vec![ModulationStats { min: 1.0, max: 1.0 }; self.features.len()]);
        };
        maps.iter().map(ModulationStats::of).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationStats {
    pub min: f64,
    pub max: f64,
}

impl ModulationStats {
    /// Extremes of `map` over all its elements.
    pub fn of(map: &Tensor) -> Result<Self> {
        let m = map.to_dtype(DType::F64)?.flatten_all()?;
        Ok(Self {
            min: m.min(0)?.to_scalar::<f64>()?,
            max: m.max(0)?.to_scalar::<f64>()?,
        })
    }
}

impl Injector for ModulatedInjection {
    fn inject(&self, site: usize, f_sd: &Tensor) -> Result<Tensor> {
        let f_cond = self
            .features
            .get(site)
            .ok_or_else(|| Error::Shape(format!("no control feature for site {site}")))?;
        match &self.maps {
            None => {
                if f_sd.dims() != f_cond.dims() {
                    return Err(Error::Shape(format!(
                        "site {site}: backbone {:?} vs control {:?}",
                        f_sd.dims(),
                        f_cond.dims()
                    )));
                }
                Ok((f_sd + f_cond)?)
            }
            Some(maps) => fuse(f_sd, f_cond, &maps[site]),
        }
    }
}
