mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use region_restore::control::{fuse, modulation_map, ModulatedInjection};
use region_restore::diffusion::Injector;

use common::{max_abs_diff, mini_backbone, rng, uniform};

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

proptest! {
    #[test]
    fn map_stays_within_scales(
        m in prop::collection::vec(0.0f64..=1.0, 16),
        s1 in 0.0f64..3.0,
        s2 in 0.0f64..3.0,
    ) {
        let map = modulation_map(&tensor(m, &[1, 1, 4, 4]), s1, s2).unwrap();
        for v in values(&map) {
            prop_assert!(v >= s1.min(s2) && v <= s1.max(s2));
        }
    }

    #[test]
    fn map_is_affine_in_the_scales(
        m in prop::collection::vec(0.0f64..=1.0, 16),
        a in 0.0f64..3.0,
        b in 0.0f64..3.0,
        c in 0.0f64..3.0,
        d in 0.0f64..3.0,
        w in 0.0f64..=1.0,
    ) {
        let m = tensor(m, &[1, 1, 4, 4]);
        let mixed = modulation_map(&m, w * a + (1.0 - w) * b, w * c + (1.0 - w) * d).unwrap();
        let p = values(&modulation_map(&m, a, c).unwrap());
        let q = values(&modulation_map(&m, b, d).unwrap());
        for ((x, p), q) in values(&mixed).into_iter().zip(p).zip(q) {
            prop_assert!((x - (w * p + (1.0 - w) * q)).abs() < 1e-14);
        }
    }

    #[test]
    fn map_matches_pointwise_formula(
        m in prop::collection::vec(0.0f64..=1.0, 16),
        s1 in 0.0f64..3.0,
        s2 in 0.0f64..3.0,
    ) {
        let map = values(&modulation_map(&tensor(m.clone(), &[1, 1, 4, 4]), s1, s2).unwrap());
        for (v, mi) in map.into_iter().zip(m) {
            prop_assert!((v - (s1 * mi + s2 * (1.0 - mi))).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_modulation_is_neutral() {
    let mut r = rng(1);
    let f_sd = uniform(&mut r, &[2, 3, 4, 4], -2.0, 2.0, DType::F64);
    let f_cond = uniform(&mut r, &[2, 3, 4, 4], -2.0, 2.0, DType::F64);
    let mask = uniform(&mut r, &[2, 1, 4, 4], 0.0, 1.0, DType::F64);
    let fused = fuse(&f_sd, &f_cond, &modulation_map(&mask, 0.0, 0.0).unwrap()).unwrap();
    assert_eq!(values(&fused), values(&f_sd));
}

#[test]
fn unit_scales_equal_training_injection() {
    let mut r = rng(2);
    let feats: Vec<Tensor> = [(8, 8), (8, 8)]
        .iter()
        .map(|&(c, s)| uniform(&mut r, &[2, c, s, s], -1.0, 1.0, DType::F64))
        .collect();
    let mask = uniform(&mut r, &[2, 1, 8, 8], 0.0, 1.0, DType::F64);
    let unit = ModulatedInjection::unit(feats.clone());
    let modulated = ModulatedInjection::from_mask(feats.clone(), &mask, 1.0, 1.0).unwrap();
    for (site, f) in feats.iter().enumerate() {
        let f_sd = uniform(&mut r, f.dims(), -1.0, 1.0, DType::F64);
        let a = unit.inject(site, &f_sd).unwrap();
        let b = modulated.inject(site, &f_sd).unwrap();
        assert_eq!(values(&a), values(&b));
    }

    // The same holds through the whole backbone.
    let bb = mini_backbone(DType::F64);
    let z = uniform(&mut r, &[2, 2, 8, 8], -1.0, 1.0, DType::F64);
    let text = bb.embed_prompts(&["red disk", "sign"]).unwrap();
    let ts = [10, 500];
    let a = bb.forward(&z, &ts, &text, Some(&unit)).unwrap().eps;
    let b = bb.forward(&z, &ts, &text, Some(&modulated)).unwrap().eps;
    assert_eq!(max_abs_diff(&a, &b), 0.0);
}

#[test]
fn site_maps_follow_the_mask_per_site() {
    let mut r = rng(3);
    let feats: Vec<Tensor> = [(8, 4), (8, 8)]
        .iter()
        .map(|&(c, s)| uniform(&mut r, &[1, c, s, s], -1.0, 1.0, DType::F64))
        .collect();
    let mask = Tensor::ones((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
    let inj = ModulatedInjection::from_mask(feats, &mask, 0.7, 1.3).unwrap();
    for s in inj.stats().unwrap() {
        assert!((s.min - 0.7).abs() < 1e-15 && (s.max - 0.7).abs() < 1e-15);
    }
}
