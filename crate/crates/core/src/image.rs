//! Planar float images and single-channel maps.
//!
//! Pixel values live in `[0, 1]`. RGB images are stored channel-major
//! (`C x H x W`) so they map directly onto `(3, H, W)` tensors.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Luma weights of the full-range RGB -> YCbCr transform.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// A single-channel map (masks, luma, variance maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Number of pixels with value > 0.5.
    pub fn positive_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn threshold(&self, t: f32) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| if v > t { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn invert(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1.0 - v).collect(),
        }
    }

    pub fn union(&self, other: &Plane) -> Result<Plane> {
        if self.shape() != other.shape() {
            return Err(Error::Shape("mask union of different shapes".into()));
        }
        Ok(Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| if a > 0.5 || b > 0.5 { 1.0 } else { 0.0 })
                .collect(),
        })
    }

    pub fn clamp01(mut self) -> Plane {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Plane {
        let data = resize_channel(&self.data, self.height, self.width, height, width);
        Plane {
            height,
            width,
            data,
        }
    }

    /// Binary erosion with a square structuring element of the given radius.
    /// Pixels closer than `radius` to the border are eroded as well.
    pub fn erode(&self, radius: usize) -> Plane {
        let (h, w) = self.shape();
        let bin = self.threshold(0.5);
        Plane::from_fn(h, w, |y, x| {
            if y < radius || x < radius || y + radius >= h || x + radius >= w {
                return 0.0;
            }
            for yy in y - radius..=y + radius {
                for xx in x - radius..=x + radius {
                    if bin.get(yy, xx) < 0.5 {
                        return 0.0;
                    }
                }
            }
            1.0
        })
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([to_u8(self.get(y as usize, x as usize))])
        })
    }

    pub fn from_gray8(img: &GrayImage) -> Plane {
        Plane::from_fn(img.height() as usize, img.width() as usize, |y, x| {
            img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
        })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Plane> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Plane::from_gray8(&img.to_luma8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Plane> {
        let img = image::open(path)?;
        Ok(Plane::from_gray8(&img.to_luma8()))
    }
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set_rgb(y, x, f(y, x));
            }
        }
        img
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image data length {} != 3x{}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    #[inline]
    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    #[inline]
    pub fn set_rgb(&mut self, y: usize, x: usize, v: [f32; 3]) {
        for (c, &val) in v.iter().enumerate() {
            self.set(c, y, x, val);
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(mut self) -> Image {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Snap every value onto the 8-bit grid so PNG round trips are lossless.
    pub fn quantize8(mut self) -> Image {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
        self
    }

    /// Luma channel in double precision.
    pub fn luma(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        (0..n)
            .map(|i| {
                LUMA_WEIGHTS[0] * r[i] as f64
                    + LUMA_WEIGHTS[1] * g[i] as f64
                    + LUMA_WEIGHTS[2] * b[i] as f64
            })
            .collect()
    }

    pub fn luma_plane(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.luma().into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            data.extend(resize_channel(
                self.channel(c),
                self.height,
                self.width,
                height,
                width,
            ));
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Zero every pixel where the mask is <= 0.5.
    pub fn masked(&self, mask: &Plane) -> Result<Image> {
        check_mask(mask, self)?;
        let mut out = self.clone();
        let n = self.height * self.width;
        for c in 0..3 {
            for i in 0..n {
                if mask.data[i] <= 0.5 {
                    out.data[c * n + i] = 0.0;
                }
            }
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.rgb(y as usize, x as usize);
            image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        Image::from_fn(img.height() as usize, img.width() as usize, |y, x| {
            let p = img.get_pixel(x as u32, y as u32).0;
            [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
        })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path)?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}

pub(crate) fn check_mask(mask: &Plane, img: &Image) -> Result<()> {
    if mask.shape() != img.shape() {
        return Err(Error::MaskShapeMismatch {
            mask: mask.shape(),
            image: img.shape(),
        });
    }
    Ok(())
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn resize_channel(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    let taps = |d: usize, scale: f64, n: usize| -> (usize, usize, f32) {
        let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let xt: Vec<_> = (0..dw).map(|x| taps(x, sx, sw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = taps(y, sy, sh);
        for &(x0, x1, fx) in &xt {
            let a = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let b = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(a * (1.0 - fy) + b * fy);
        }
    }
    out
}

/// Separable Gaussian blur with reflected borders. `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let mut out = img.clone();
    for c in 0..3 {
        let ch = img.channel(c).to_vec();
        let blurred = separable(&ch, img.height, img.width, &kernel);
        let n = img.height * img.width;
        out.data[c * n..(c + 1) * n].copy_from_slice(&blurred);
    }
    out
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn separable(src: &[f32], h: usize, w: usize, kernel: &[f64]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = reflect(x as isize + k as isize - r, w);
                acc += kv * src[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - r, h);
                acc += kv * tmp[yy * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Variance of the 4-neighbour Laplacian of the luma channel, taken over
/// interior pixels (and, when given, only where `mask` is positive).
pub fn laplacian_variance(img: &Image, mask: Option<&Plane>) -> f64 {
    let luma = img.luma();
    let (h, w) = img.shape();
    let mut vals = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if let Some(m) = mask {
                if m.get(y, x) <= 0.5 {
                    continue;
                }
            }
            let c = luma[y * w + x];
            let lap = luma[(y - 1) * w + x] + luma[(y + 1) * w + x] + luma[y * w + x - 1]
                + luma[y * w + x + 1]
                - 4.0 * c;
            vals.push(lap);
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_to_own_size_is_identity() {
        let p = Plane::from_fn(7, 5, |y, x| ((y * 5 + x) as f32 / 35.0).sin().abs());
        assert_eq!(p.resize_bilinear(7, 5), p);
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let img = Image::from_fn(6, 9, |y, x| [y as f32 / 6.0, x as f32 / 9.0, 0.3]).quantize8();
        let back = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn gray_luma_is_value() {
        let img = Image::from_fn(2, 2, |_, _| [0.5, 0.5, 0.5]);
        for v in img.luma() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_reduces_laplacian_variance() {
        let img = Image::from_fn(32, 32, |y, x| {
            let v = if (x / 2 + y / 2) % 2 == 0 { 1.0 } else { 0.0 };
            [v, v, v]
        });
        let before = laplacian_variance(&img, None);
        let after = laplacian_variance(&gaussian_blur(&img, 1.5), None);
        assert!(after < before * 0.5);
    }

    #[test]
    fn erosion_shrinks_square() {
        let p = Plane::from_fn(20, 20, |y, x| {
            if (5..15).contains(&y) && (5..15).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(p.erode(2).positive_count(), 36);
    }
}
