//! Blind degradation (blur -> downscale -> noise -> JPEG, optionally twice)
//! and a toy bokeh renderer used to build the bokeh-aware training set.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_mask, gaussian_blur, Image, Plane};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub blur_sigma_range: [f64; 2],
    pub downscale_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub jpeg_quality_range: [u8; 2],
    pub second_order: bool,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.2, 2.0],
            downscale_range: [0.25, 1.0],
            noise_sigma_range: [0.0, 0.06],
            jpeg_quality_range: [40, 95],
            second_order: false,
        }
    }
}

impl DegradationConfig {
    /// Every range collapsed onto its no-op value; only the JPEG round trip
    /// at quality 95 remains.
    pub fn identity() -> Self {
        Self {
            blur_sigma_range: [0.0, 0.0],
            downscale_range: [1.0, 1.0],
            noise_sigma_range: [0.0, 0.0],
            jpeg_quality_range: [95, 95],
            second_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, lo: f64, hi: f64, min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < min || hi > max {
                Err(Error::InvalidConfig(format!(
                    "{name} range [{lo}, {hi}] must satisfy {min} <= lo <= hi <= {max}"
                )))
            } else {
                Ok(())
            }
        };
        check("blur_sigma", self.blur_sigma_range[0], self.blur_sigma_range[1], 0.0, 50.0)?;
        check("downscale", self.downscale_range[0], self.downscale_range[1], 1e-3, 1.0)?;
        check("noise_sigma", self.noise_sigma_range[0], self.noise_sigma_range[1], 0.0, 1.0)?;
        let [qlo, qhi] = self.jpeg_quality_range;
        check("jpeg_quality", qlo as f64, qhi as f64, 30.0, 95.0)
    }
}

fn sample(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn first_order(img: &Image, cfg: &DegradationConfig, rng: &mut ChaCha8Rng) -> Result<Image> {
    let sigma = sample(rng, cfg.blur_sigma_range);
    let scale = sample(rng, cfg.downscale_range);
    let noise = sample(rng, cfg.noise_sigma_range);
    let [qlo, qhi] = cfg.jpeg_quality_range;
    let quality = if qhi > qlo { rng.random_range(qlo..=qhi) } else { qlo };

    let mut out = gaussian_blur(img, sigma);
    if scale < 1.0 {
        let h = ((img.height as f64 * scale).round() as usize).max(1);
        let w = ((img.width as f64 * scale).round() as usize).max(1);
        out = out.resize_bilinear(h, w);
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0f32, noise as f32).expect("noise sigma is finite");
        for v in &mut out.data {
            *v += normal.sample(rng);
        }
    }
    jpeg_round_trip(&out.clamp01(), quality)
}

/// Encode and decode through an in-memory JPEG at the given quality.
pub fn jpeg_round_trip(img: &Image, quality: u8) -> Result<Image> {
    let mut buf = Cursor::new(Vec::new());
    let rgb = img.to_rgb8();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(buf.get_ref(), ImageFormat::Jpeg)?;
    Ok(Image::from_rgb8(&decoded.to_rgb8()))
}

pub fn degrade(hq: &Image, cfg: &DegradationConfig, seed: u64) -> Result<Image> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = first_order(hq, cfg, &mut rng)?;
    if cfg.second_order {
        out = first_order(&out, cfg, &mut rng)?;
    }
    if out.shape() != hq.shape() {
        out = out.resize_bilinear(hq.height, hq.width);
    }
    Ok(out.clamp01())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BokehSynthConfig {
    pub disk_radius: usize,
    pub highlight_boost: f32,
    pub edge_feather: usize,
}

impl Default for BokehSynthConfig {
    fn default() -> Self {
        Self {
            disk_radius: 7,
            highlight_boost: 1.6,
            edge_feather: 1,
        }
    }
}

impl BokehSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.disk_radius < 1 {
            return Err(Error::InvalidConfig("disk_radius must be >= 1".into()));
        }
        if !(self.highlight_boost >= 1.0) {
            return Err(Error::InvalidConfig("highlight_boost must be >= 1".into()));
        }
        Ok(())
    }
}

/// Offsets inside an open disk of the given radius; radius 1 is the single
/// center tap.
fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx < r2 {
                taps.push((dy, dx));
            }
        }
    }
    taps
}

/// Blur the background region with a disk kernel, boosting bright pixels
/// first so they bloom into light discs. Foreground pixels farther than
/// `edge_feather` from the background are returned untouched.
pub fn synth_bokeh(hq: &Image, background_mask: &Plane, cfg: &BokehSynthConfig, seed: u64) -> Result<Image> {
    check_mask(background_mask, hq)?;
    cfg.validate()?;
    let bg = background_mask.threshold(0.5);
    if bg.positive_count() == 0 {
        return Ok(hq.clone());
    }
    let (h, w) = hq.shape();
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let highlight_threshold: f64 = rng.random_range(0.75..0.85);

    let luma = hq.luma();
    let mut boosted = hq.clone();
    for (i, &l) in luma.iter().enumerate() {
        if l > highlight_threshold {
            for c in 0..3 {
                boosted.data[c * n + i] *= cfg.highlight_boost;
            }
        }
    }

    // Normalized convolution restricted to background support, so the sharp
    // foreground does not smear into the blurred region.
    let taps = disk_offsets(cfg.disk_radius);
    let mut blurred = hq.clone();
    for y in 0..h {
        for x in 0..w {
            if bg.get(y, x) < 0.5 && cfg.edge_feather == 0 {
                continue;
            }
            let mut acc = [0f64; 3];
            let mut wsum = 0f64;
            for &(dy, dx) in &taps {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let (yy, xx) = (yy as usize, xx as usize);
                if bg.get(yy, xx) < 0.5 {
                    continue;
                }
                wsum += 1.0;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += boosted.get(c, yy, xx) as f64;
                }
            }
            if wsum > 0.0 {
                for (c, a) in acc.iter().enumerate() {
                    blurred.set(c, y, x, (a / wsum).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }

    let alpha = feather_alpha(&bg, cfg.edge_feather);
    let mut out = hq.clone();
    for i in 0..n {
        let a = alpha.data[i];
        if a <= 0.0 {
            continue;
        }
        for c in 0..3 {
            let idx = c * n + i;
            out.data[idx] = (a * blurred.data[idx] + (1.0 - a) * hq.data[idx]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// 1 on the background, ramping linearly to 0 over `feather` pixels into the
/// foreground (Chebyshev distance).
fn feather_alpha(bg: &Plane, feather: usize) -> Plane {
    let (h, w) = bg.shape();
    if feather == 0 {
        return bg.clone();
    }
    let f = feather as isize;
    Plane::from_fn(h, w, |y, x| {
        if bg.get(y, x) > 0.5 {
            return 1.0;
        }
        let mut best = isize::MAX;
        for dy in -f..=f {
            for dx in -f..=f {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                if bg.get(yy as usize, xx as usize) > 0.5 {
                    best = best.min(dy.abs().max(dx.abs()));
                }
            }
        }
        if best == isize::MAX {
            0.0
        } else {
            1.0 - best as f32 / (feather as f32 + 1.0)
        }
    })
}

/// Pixels within `feather` (Chebyshev) of the background, inclusive.
pub fn feather_band(background_mask: &Plane, feather: usize) -> Plane {
    feather_alpha(&background_mask.threshold(0.5), feather).threshold(0.0)
}
