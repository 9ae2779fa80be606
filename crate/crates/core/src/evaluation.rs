//! Luma PSNR/SSIM with optional region masks, masked no-reference scoring,
//! a variance-based blurred-background detector and dataset reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data_engine::{QualityScorer, SharpnessScorer, Triplet};
use crate::error::{Error, Result};
use crate::image::{check_mask, Image, Plane};

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Local-variance window of the blur detector used by reports.
pub const BLUR_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// True when the error was zero and `db` holds [`PSNR_CAP`].
    pub capped: bool,
}

fn check_pair(img: &Image, reference: &Image) -> Result<()> {
    if img.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs reference {:?}",
            img.shape(),
            reference.shape()
        )));
    }
    Ok(())
}

/// PSNR between two luma planes over pixels where `mask > 0.5` (all pixels
/// without a mask), for data in [0,1].
pub fn psnr_luma(y: &[f64], y_ref: &[f64], mask: Option<&[f32]>) -> Result<Psnr> {
    if y.len() != y_ref.len() || mask.is_some_and(|m| m.len() != y.len()) {
        return Err(Error::Shape("luma planes and mask must have equal length".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..y.len() {
        if mask.is_some_and(|m| m[i] <= 0.5) {
            continue;
        }
        let d = y[i] - y_ref[i];
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP, capped: true });
    }
    Ok(Psnr {
        db: 10.0 * (1.0 / mse).log10(),
        capped: false,
    })
}

pub fn psnr_y(img: &Image, reference: &Image, mask: Option<&Plane>) -> Result<Psnr> {
    check_pair(img, reference)?;
    if let Some(m) = mask {
        check_mask(m, img)?;
    }
    psnr_luma(&img.luma(), &reference.luma(), mask.map(|m| m.data.as_slice()))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian-weighted window means ("valid" placement): output is
/// `(h - 10) x (w - 10)`, entry `(y, x)` centred on pixel `(y + 5, x + 5)`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window SSIM of two luma planes, `(h - 10) x (w - 10)`.
pub fn ssim_map(y: &[f64], y_ref: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(y, h, w, &k);
    let mu_y = filter_valid(y_ref, h, w, &k);
    let xx = filter_valid(&prod(y, y), h, w, &k);
    let yy = filter_valid(&prod(y_ref, y_ref), h, w, &k);
    let xy = filter_valid(&prod(y, y_ref), h, w, &k);
    Ok((0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect())
}

/// Mean SSIM on luma. With a mask, only windows lying entirely inside the
/// mask count (window centres in the mask eroded by 5).
pub fn ssim_y(img: &Image, reference: &Image, mask: Option<&Plane>) -> Result<f64> {
    check_pair(img, reference)?;
    let (h, w) = img.shape();
    let map = ssim_map(&img.luma(), &reference.luma(), h, w)?;
    let r = SSIM_WINDOW / 2;
    let ow = w + 1 - SSIM_WINDOW;
    let centres = match mask {
        Some(m) => {
            check_mask(m, img)?;
            m.erode(r)
        }
        None => Plane::new(h, w, 1.0).erode(r),
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, v) in map.iter().enumerate() {
        let (y, x) = (i / ow + r, i % ow + r);
        if centres.get(y, x) > 0.5 {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Named no-reference scorers.
#[derive(Clone)]
pub struct ScorerRegistry {
    scorers: BTreeMap<String, Arc<dyn QualityScorer + Send + Sync>>,
}

impl Default for ScorerRegistry {
    /// Holds the deterministic `sharpness` stub.
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("sharpness", Arc::new(SharpnessScorer::default()));
        r
    }
}

impl std::fmt::Debug for ScorerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.scorers.keys()).finish()
    }
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        Self {
            scorers: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, scorer: Arc<dyn QualityScorer + Send + Sync>) {
        self.scorers.insert(name.into(), scorer);
    }

    pub fn names(&self) -> Vec<String> {
        self.scorers.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<&(dyn QualityScorer + Send + Sync)> {
        self.scorers
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::UnknownScorer(name.to_string()))
    }
}

/// Scores `img` with pixels outside `mask` set to zero.
pub fn masked_noref(img: &Image, mask: &Plane, registry: &ScorerRegistry, scorer: &str) -> Result<f64> {
    let s = registry.get(scorer)?;
    Ok(s.score(&img.masked(mask)?))
}

/// Local luma variance over a `window` x `window` box with reflected borders.
pub fn local_variance(img: &Image, window: usize) -> Plane {
    let (h, w) = img.shape();
    let y = img.luma();
    let r = (window / 2) as isize;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    Plane::from_fn(h, w, |cy, cx| {
        let (mut s, mut s2) = (0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let v = y[reflect(cy as isize + dy, h) * w + reflect(cx as isize + dx, w)];
                s += v;
                s2 += v * v;
            }
        }
        let n = (window * window) as f64;
        let mean = s / n;
        (s2 / n - mean * mean).max(0.0) as f32
    })
}

/// Otsu threshold of `values` over 256 bins spanning their range. Returns
/// the threshold and the means of the low and high classes.
fn otsu(values: &[f32]) -> (f64, f64, f64) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !(hi > lo) {
        return (hi, lo, hi);
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    let mut sums = [0f64; BINS];
    for &v in values {
        let b = (((v as f64 - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
        sums[b] += v as f64;
    }
    let total = values.len() as f64;
    let grand: f64 = sums.iter().sum();
    let (mut n0, mut s0) = (0f64, 0f64);
    let mut best = (f64::NEG_INFINITY, lo, lo, hi);
    for b in 0..BINS - 1 {
        n0 += hist[b] as f64;
        s0 += sums[b];
        let n1 = total - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let (m0, m1) = (s0 / n0, (grand - s0) / n1);
        let between = n0 * n1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, lo + (b + 1) as f64 * width, m0, m1);
        }
    }
    (best.1, best.2, best.3)
}

/// Detector tuning. The variance map is split by Otsu's threshold unless it
/// is nearly homogeneous (high-class mean below `separation` times the
/// low-class mean), in which case the whole frame is blurred or sharp
/// depending on whether its median variance is below `flat_variance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurDetector {
    pub window: usize,
    pub separation: f64,
    pub flat_variance: f64,
}

impl Default for BlurDetector {
    fn default() -> Self {
        Self {
            window: BLUR_WINDOW,
            separation: 4.0,
            flat_variance: 2e-4,
        }
    }
}

impl BlurDetector {
    pub fn detect(&self, img: &Image) -> Result<Plane> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "blur window must be odd and >= 3, got {}",
                self.window
            )));
        }
        let var = local_variance(img, self.window);
        let (h, w) = var.shape();
        let (thr, m0, m1) = otsu(&var.data);
        if !(m1 > self.separation * m0.max(1e-12)) {
            let mut sorted = var.data.clone();
            sorted.sort_by(f32::total_cmp);
            let median = sorted[sorted.len() / 2] as f64;
            let v = if median < self.flat_variance { 1.0 } else { 0.0 };
            return Ok(Plane::new(h, w, v));
        }
        Ok(Plane::from_fn(h, w, |y, x| if (var.get(y, x) as f64) < thr { 1.0 } else { 0.0 }))
    }
}

/// Marks pixels whose local luma variance is low as blurred (1.0).
pub fn detect_blur_background(img: &Image, window: usize) -> Result<Plane> {
    BlurDetector { window, ..Default::default() }.detect(img)
}

/// `|a and b| / |a or b|` of two binary masks; 1.0 when both are empty.
pub fn bokeh_iou(pred_bg: &Plane, gt_bg: &Plane) -> Result<f64> {
    if pred_bg.shape() != gt_bg.shape() {
        return Err(Error::MaskShapeMismatch {
            mask: pred_bg.shape(),
            image: gt_bg.shape(),
        });
    }
    let (mut inter, mut uni) = (0usize, 0usize);
    for (a, b) in pred_bg.data.iter().zip(&gt_bg.data) {
        let (a, b) = (*a > 0.5, *b > 0.5);
        inter += (a && b) as usize;
        uni += (a || b) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub blur: BlurDetector,
    /// Registry names applied to the target region.
    pub scorers: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            blur: BlurDetector::default(),
            scorers: vec!["sharpness".into()],
        }
    }
}

/// A restored image tagged with the triplet it answers.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub image_id: String,
    pub output: Image,
}

/// One report row. Metrics that do not apply or cannot be computed are
/// `None` (serialized as null).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub caption: String,
    pub task: String,
    pub mask_area_fraction: f64,
    pub psnr_y: Option<f64>,
    pub psnr_y_capped: bool,
    pub ssim_y: Option<f64>,
    pub psnr_y_target: Option<f64>,
    pub ssim_y_target: Option<f64>,
    pub psnr_y_background: Option<f64>,
    pub ssim_y_background: Option<f64>,
    pub bokeh_iou: Option<f64>,
    pub noref_target: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregates {
    pub psnr_y: Option<f64>,
    pub ssim_y: Option<f64>,
    pub psnr_y_target: Option<f64>,
    pub ssim_y_target: Option<f64>,
    pub psnr_y_background: Option<f64>,
    pub ssim_y_background: Option<f64>,
    pub bokeh_iou: Option<f64>,
    pub noref_target: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: MetricAggregates,
}

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 12] = [
    "image_id",
    "caption",
    "task",
    "mask_area_fraction",
    "psnr_y",
    "psnr_y_capped",
    "ssim_y",
    "psnr_y_target",
    "ssim_y_target",
    "psnr_y_background",
    "ssim_y_background",
    "bokeh_iou",
];

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// `Ok(v)` to `Some(v)`; region-too-small outcomes to `None`.
fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyMask) | Err(Error::TooSmall(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One line per row: [`CSV_COLUMNS`] then one `noref_target_<name>`
    /// column per scorer. Missing values are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let scorers: Vec<String> = self
            .rows
            .first()
            .map(|r| r.noref_target.keys().cloned().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(scorers.iter().map(|s| format!("noref_target_{s}")));
        w.write_record(&header).map_err(csv_err)?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.image_id.clone(),
                r.caption.clone(),
                r.task.clone(),
                format!("{}", r.mask_area_fraction),
                cell(r.psnr_y),
                r.psnr_y_capped.to_string(),
                cell(r.ssim_y),
                cell(r.psnr_y_target),
                cell(r.ssim_y_target),
                cell(r.psnr_y_background),
                cell(r.ssim_y_background),
                cell(r.bokeh_iou),
            ];
            rec.extend(scorers.iter().map(|s| cell(r.noref_target.get(s).copied().flatten())));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(json_path, self.to_json()?)?;
        std::fs::write(csv_path, self.to_csv()?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Metrics of each result against its triplet's image. `results[i]` must
/// carry `triplets[i].image_id`.
pub fn evaluate_dataset(
    results: &[EvalItem],
    triplets: &[Triplet],
    registry: &ScorerRegistry,
    config: &EvalConfig,
) -> Result<MetricReport> {
    if results.len() != triplets.len() {
        return Err(Error::Alignment(format!(
            "{} results for {} triplets",
            results.len(),
            triplets.len()
        )));
    }
    let mut rows = Vec::with_capacity(results.len());
    for (res, t) in results.iter().zip(triplets) {
        if res.image_id != t.image_id {
            return Err(Error::Alignment(format!(
                "result {} paired with triplet {}",
                res.image_id, t.image_id
            )));
        }
        let reference = t.image.as_ref();
        let out = &res.output;
        check_pair(out, reference)?;
        let target = t.mask.threshold(0.5);
        let background = target.invert();
        let full = psnr_y(out, reference, None)?;
        let bokeh = t.is_bokeh();
        let mut noref = BTreeMap::new();
        for name in &config.scorers {
            let v = if target.positive_count() > 0 {
                Some(masked_noref(out, &target, registry, name)?)
            } else {
                registry.get(name)?;
                None
            };
            noref.insert(name.clone(), v);
        }
        let (psnr_bg, ssim_bg, iou) = if bokeh {
            let pred = config.blur.detect(out)?;
            let gt = config.blur.detect(reference)?;
            (
                optional(psnr_y(out, reference, Some(&background)).map(|p| p.db))?,
                optional(ssim_y(out, reference, Some(&background)))?,
                Some(bokeh_iou(&pred, &gt)?),
            )
        } else {
            (None, None, None)
        };
        let (h, w) = t.mask.shape();
        rows.push(MetricRow {
            image_id: t.image_id.clone(),
            caption: t.caption.clone(),
            task: if bokeh { "bokeh" } else { "local" }.to_string(),
            mask_area_fraction: target.positive_count() as f64 / (h * w) as f64,
            psnr_y: Some(full.db),
            psnr_y_capped: full.capped,
            ssim_y: optional(ssim_y(out, reference, None))?,
            psnr_y_target: optional(psnr_y(out, reference, Some(&target)).map(|p| p.db))?,
            ssim_y_target: optional(ssim_y(out, reference, Some(&target)))?,
            psnr_y_background: psnr_bg,
            ssim_y_background: ssim_bg,
            bokeh_iou: iou,
            noref_target: noref,
        });
    }
    let noref_target = config
        .scorers
        .iter()
        .map(|s| (s.clone(), mean_of(rows.iter().map(|r| r.noref_target.get(s).copied().flatten()))))
        .collect();
    let aggregates = MetricAggregates {
        psnr_y: mean_of(rows.iter().map(|r| r.psnr_y)),
        ssim_y: mean_of(rows.iter().map(|r| r.ssim_y)),
        psnr_y_target: mean_of(rows.iter().map(|r| r.psnr_y_target)),
        ssim_y_target: mean_of(rows.iter().map(|r| r.ssim_y_target)),
        psnr_y_background: mean_of(rows.iter().map(|r| r.psnr_y_background)),
        ssim_y_background: mean_of(rows.iter().map(|r| r.ssim_y_background)),
        bokeh_iou: mean_of(rows.iter().map(|r| r.bokeh_iou)),
        noref_target,
    };
    Ok(MetricReport { rows, aggregates })
}
