//! Procedural scenes: one to three textured shapes of distinct kinds on a
//! smooth noise background, with exact masks and templated captions.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Triplet, BOKEH_TAG, GENERAL_TAG};
use crate::degradation::{synth_bokeh, BokehSynthConfig};
use crate::error::{Error, Result};
use crate::image::{Image, Plane};

pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.86, 0.12, 0.12]),
    ("green", [0.12, 0.70, 0.20]),
    ("blue", [0.14, 0.28, 0.88]),
    ("yellow", [0.92, 0.86, 0.12]),
    ("purple", [0.58, 0.18, 0.72]),
    ("orange", [0.96, 0.54, 0.08]),
];

pub const FILLS: [&str; 3] = ["plain", "striped", "checkered"];
pub const SHAPES: [&str; 3] = ["disk", "square", "triangle"];

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub color: &'static str,
    pub fill: &'static str,
    pub kind: &'static str,
    /// Visible pixels of the shape after later shapes are painted over it.
    pub mask: Plane,
}

impl ShapeRecord {
    pub fn caption(&self) -> String {
        format!("{} {} {}", self.color, self.fill, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub image: Arc<Image>,
    pub shapes: Vec<ShapeRecord>,
}

impl Scene {
    pub fn triplets(&self) -> Vec<Triplet> {
        self.shapes
            .iter()
            .map(|s| Triplet {
                image_id: self.image_id.clone(),
                image: self.image.clone(),
                mask: s.mask.clone(),
                caption: s.caption(),
                subject: s.kind.to_string(),
                task_tags: vec![GENERAL_TAG.to_string()],
            })
            .collect()
    }
}

struct Placed {
    kind: usize,
    cy: f32,
    cx: f32,
    r: f32,
    angle: f32,
}

impl Placed {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match SHAPES[self.kind] {
            "disk" => dy * dy + dx * dx <= self.r * self.r,
            "square" => {
                let (s, c) = self.angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let half = self.r * 0.85;
                u.abs() <= half && v.abs() <= half
            }
            _ => {
                // Equilateral triangle inscribed in the circle of radius r.
                let mut inside = true;
                for k in 0..3 {
                    let a = self.angle + k as f32 * std::f32::consts::TAU / 3.0;
                    let (s, c) = a.sin_cos();
                    if c * dx + s * dy > self.r * 0.5 {
                        inside = false;
                    }
                }
                inside
            }
        }
    }
}

fn fill_color(fill: &str, base: [f32; 3], y: usize, x: usize, phase: usize) -> [f32; 3] {
    let dark = [base[0] * 0.3, base[1] * 0.3, base[2] * 0.3];
    let on = match fill {
        "striped" => ((x + y + phase) / 4).is_multiple_of(2),
        "checkered" => ((x + phase) / 5 + (y + phase) / 5).is_multiple_of(2),
        _ => true,
    };
    if on {
        base
    } else {
        dark
    }
}

/// Low-frequency value noise: a coarse random grid, bilinearly upsampled.
fn background(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let grid = 4;
    let tint: [f32; 3] = [
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
    ];
    let coarse = Image::from_fn(grid, grid, |_, _| {
        let d = rng.random_range(-0.12f32..0.12);
        [tint[0] + d, tint[1] + d, tint[2] + d]
    });
    coarse.resize_bilinear(size, size)
}

fn render_scene(image_id: String, size: usize, rng: &mut ChaCha8Rng) -> Scene {
    loop {
        let mut img = background(size, rng);
        let n_shapes = rng.random_range(1..=3);
        let mut kinds: Vec<usize> = (0..SHAPES.len()).collect();
        kinds.shuffle(rng);
        let s = size as f32;
        let mut placed: Vec<Placed> = Vec::new();
        for &kind in kinds.iter().take(n_shapes) {
            for _ in 0..30 {
                let r = rng.random_range(0.17..0.27) * s;
                let cy = rng.random_range(r..s - r);
                let cx = rng.random_range(r..s - r);
                let ok = placed.iter().all(|p| {
                    let d = ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt();
                    d > 0.8 * (p.r + r)
                });
                if ok {
                    placed.push(Placed {
                        kind,
                        cy,
                        cx,
                        r,
                        angle: rng.random_range(0.0..std::f32::consts::TAU),
                    });
                    break;
                }
            }
        }
        let styles: Vec<(usize, usize, usize)> = placed
            .iter()
            .map(|_| {
                (
                    rng.random_range(0..COLORS.len()),
                    rng.random_range(0..FILLS.len()),
                    rng.random_range(0..8),
                )
            })
            .collect();

        let mut owner = vec![usize::MAX; size * size];
        for (i, p) in placed.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    if p.contains(y as f32 + 0.5, x as f32 + 0.5) {
                        owner[y * size + x] = i;
                    }
                }
            }
        }
        for y in 0..size {
            for x in 0..size {
                let o = owner[y * size + x];
                if o != usize::MAX {
                    let (ci, fi, phase) = styles[o];
                    img.set_rgb(y, x, fill_color(FILLS[fi], COLORS[ci].1, y, x, phase));
                }
            }
        }
        let shapes: Vec<ShapeRecord> = placed
            .iter()
            .enumerate()
            .map(|(i, p)| ShapeRecord {
                color: COLORS[styles[i].0].0,
                fill: FILLS[styles[i].1],
                kind: SHAPES[p.kind],
                mask: Plane::from_fn(size, size, |y, x| if owner[y * size + x] == i { 1.0 } else { 0.0 }),
            })
            .collect();
        let min_area = (0.02 * (size * size) as f64) as usize;
        if shapes.iter().all(|s| s.mask.positive_count() >= min_area) {
            return Scene {
                image_id,
                image: Arc::new(img.clamp01().quantize8()),
                shapes,
            };
        }
    }
}

pub fn build_synthetic_scenes(n_images: usize, image_size: usize, seed: u64) -> Result<Vec<Scene>> {
    if n_images == 0 {
        return Err(Error::InvalidConfig("n_images must be >= 1".into()));
    }
    if image_size < 16 || !image_size.is_multiple_of(4) {
        return Err(Error::InvalidConfig(format!(
            "image_size must be a multiple of 4 and >= 16, got {image_size}"
        )));
    }
    Ok((0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_scene(format!("s{seed}-{i:05}"), image_size, &mut rng)
        })
        .collect())
}

/// General-task corpus: one triplet per rendered shape.
pub fn build_synthetic_corpus(n_images: usize, image_size: usize, seed: u64) -> Result<Vec<Triplet>> {
    Ok(build_synthetic_scenes(n_images, image_size, seed)?
        .iter()
        .flat_map(Scene::triplets)
        .collect())
}

/// Bokeh-task corpus: per scene one shape stays sharp, everything else is
/// rendered out of focus. One triplet per image, tagged `bokeh`.
pub fn build_bokeh_corpus(
    n_images: usize,
    image_size: usize,
    seed: u64,
    cfg: &BokehSynthConfig,
) -> Result<Vec<Triplet>> {
    let scenes = build_synthetic_scenes(n_images, image_size, seed)?;
    let mut out = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.into_iter().enumerate() {
        let target = i % scene.shapes.len();
        let shape = &scene.shapes[target];
        let bokeh = synth_bokeh(&scene.image, &shape.mask.invert(), cfg, seed ^ i as u64)?.quantize8();
        out.push(Triplet {
            image_id: format!("b{}", scene.image_id),
            image: Arc::new(bokeh),
            mask: shape.mask.clone(),
            caption: shape.caption(),
            subject: shape.kind.to_string(),
            task_tags: vec![BOKEH_TAG.to_string()],
        });
    }
    Ok(out)
}
