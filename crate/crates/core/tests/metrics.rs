use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use region_restore::evaluation::{bokeh_iou, psnr_luma, psnr_y, ssim_y, BlurDetector, PSNR_CAP};
use region_restore::image::{Image, Plane};
use region_restore::Error;

fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Image {
    Image::from_fn(h, w, |y, x| {
        let v = f(y, x);
        [v, v, v]
    })
}

#[test]
fn masked_psnr_hand_computed_case() {
    // A 10x10 region where 16 pixels are off by 0.25: MSE 0.01, 20 dB.
    // Everything outside the region is wildly wrong and must not count.
    let (h, w) = (16, 16);
    let mask = Plane::from_fn(h, w, |y, x| ((3..13).contains(&y) && (3..13).contains(&x)) as u8 as f32);
    let reference = gray(h, w, |_, _| 0.5);
    let img = gray(h, w, |y, x| {
        if mask.get(y, x) < 0.5 {
            0.0
        } else if y < 7 && x < 7 {
            0.75
        } else {
            0.5
        }
    });
    let y: Vec<f64> = (0..h * w).map(|i| if mask.data[i] > 0.5 && (i / w) < 7 && (i % w) < 7 { 0.75 } else { 0.5 }).collect();
    let y_ref = vec![0.5; h * w];
    let direct = psnr_luma(&y, &y_ref, Some(&mask.data)).unwrap();
    assert_eq!(direct.db, 20.0);
    assert!(!direct.capped);
    let p = psnr_y(&img, &reference, Some(&mask)).unwrap();
    assert!((p.db - 20.0).abs() < 1e-12, "{}", p.db);
}

#[test]
fn psnr_edge_cases() {
    let a = gray(8, 8, |y, x| ((y * 8 + x) as f32) / 64.0);
    let same = psnr_y(&a, &a, None).unwrap();
    assert_eq!(same.db, PSNR_CAP);
    assert!(same.capped);
    assert!(matches!(psnr_y(&a, &a, Some(&Plane::new(8, 8, 0.0))), Err(Error::EmptyMask)));
}

#[test]
fn mask_neutrality() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Image::from_fn(24, 24, |_, _| [rng.random(), rng.random(), rng.random()]);
    let b = Image::from_fn(24, 24, |_, _| [rng.random(), rng.random(), rng.random()]);
    let ones = Plane::new(24, 24, 1.0);
    assert_eq!(psnr_y(&a, &b, Some(&ones)).unwrap(), psnr_y(&a, &b, None).unwrap());
    assert_eq!(ssim_y(&a, &b, Some(&ones)).unwrap(), ssim_y(&a, &b, None).unwrap());
}

/// SSIM written out window by window.
fn ssim_direct(a: &Image, b: &Image, mask: &Plane) -> f64 {
    let (h, w) = a.shape();
    let (la, lb) = (a.luma(), b.luma());
    let sigma: f64 = 1.5;
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut sum, mut n) = (0.0, 0);
    for cy in 5..h - 5 {
        for cx in 5..w - 5 {
            let inside = (cy - 5..=cy + 5).all(|y| (cx - 5..=cx + 5).all(|x| mask.get(y, x) > 0.5));
            if !inside {
                continue;
            }
            let at = |p: &[f64], i: usize, j: usize| p[(cy + i - 5) * w + cx + j - 5];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    ma += k * at(&la, i, j);
                    mb += k * at(&lb, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    let (da, db) = (at(&la, i, j) - ma, at(&lb, i, j) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn masked_ssim_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..4 {
        let a = Image::from_fn(32, 40, |y, x| {
            let v = ((y as f32 * 0.3).sin() + (x as f32 * 0.2).cos()) * 0.25 + 0.5;
            [v, (v * 0.8 + 0.1).min(1.0), 1.0 - v]
        });
        let b = Image::from_fn(32, 40, |y, x| {
            let n: f32 = rng.random_range(-0.1..0.1);
            let c = a.rgb(y, x);
            [(c[0] + n).clamp(0.0, 1.0), c[1], (c[2] - n * 0.5).clamp(0.0, 1.0)]
        });
        let mask = match case {
            0 => Plane::new(32, 40, 1.0),
            1 => Plane::from_fn(32, 40, |y, x| (y > 4 && x > 8 && y < 28 && x < 36) as u8 as f32),
            2 => Plane::from_fn(32, 40, |y, x| (((y as f32 - 16.0).powi(2) + (x as f32 - 20.0).powi(2)) < 160.0) as u8 as f32),
            _ => Plane::from_fn(32, 40, |_, x| (x < 20) as u8 as f32),
        };
        let got = ssim_y(&a, &b, Some(&mask)).unwrap();
        let want = ssim_direct(&a, &b, &mask);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn ssim_of_identical_images_is_one() {
    let a = gray(16, 16, |y, x| ((y ^ x) & 3) as f32 / 3.0);
    assert!((ssim_y(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn bokeh_iou_set_arithmetic() {
    let left = Plane::from_fn(4, 4, |_, x| (x < 2) as u8 as f32);
    let top = Plane::from_fn(4, 4, |y, _| (y < 2) as u8 as f32);
    let empty = Plane::new(4, 4, 0.0);
    let full = Plane::new(4, 4, 1.0);
    // |left ∩ top| = 4, |left ∪ top| = 12
    assert_eq!(bokeh_iou(&left, &top).unwrap(), 1.0 / 3.0);
    assert_eq!(bokeh_iou(&left, &left).unwrap(), 1.0);
    assert_eq!(bokeh_iou(&left, &left.invert()).unwrap(), 0.0);
    assert_eq!(bokeh_iou(&left, &full).unwrap(), 0.5);
    assert_eq!(bokeh_iou(&empty, &empty).unwrap(), 1.0);
    assert_eq!(bokeh_iou(&empty, &full).unwrap(), 0.0);
    assert!(bokeh_iou(&left, &Plane::new(4, 5, 0.0)).is_err());
}

#[test]
fn blur_detector_separates_flat_from_textured() {
    let img = gray(32, 32, |y, x| if x < 16 { 0.5 } else { ((x + y) % 2) as f32 });
    let bg = BlurDetector::default().detect(&img).unwrap();
    assert!(bg.get(16, 4) > 0.5);
    assert!(bg.get(16, 28) < 0.5);
    let flat = BlurDetector::default().detect(&gray(16, 16, |_, _| 0.3)).unwrap();
    assert!(flat.data.iter().all(|&v| v > 0.5));
}
