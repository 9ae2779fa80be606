mod common;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use region_restore::control::{ControlConfig, ControlModel};
use region_restore::training::{batch_loss, TrainBatch};

use common::{mini_backbone, rng, uniform};

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn set_element(var: &Var, idx: usize, value: f64) {
    let shape = var.shape().clone();
    let mut data = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    data[idx] = value;
    var.set(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap();
}

#[test]
fn loss_gradients_match_central_differences() {
    let started = std::time::Instant::now();
    let bb = mini_backbone(DType::F64);
    let cfg = ControlConfig { stem_hidden: 4, mask_width: 4 };
    let (model, vars) = ControlModel::init(&bb, &cfg, 5, true).unwrap();
    let mut r = rng(9);
    // Zero-initialized output convolutions would hide every upstream
    // gradient; give all parameters generic values first.
    for var in vars.values() {
        let dims = var.dims().to_vec();
        let noise = uniform(&mut r, &dims, -0.3, 0.3, DType::F64);
        var.set(&(var.as_tensor() + noise).unwrap()).unwrap();
    }

    let b = 2;
    let lam = 0.5;
    let mut gt = vec![0.0f64; b * 32 * 32];
    for item in 0..b {
        for y in 10..26 {
            for x in 4..12 + 8 * item {
                gt[item * 1024 + y * 32 + x] = 1.0;
            }
        }
    }
    let batch = TrainBatch {
        lq: uniform(&mut r, &[b, 3, 32, 32], 0.0, 1.0, DType::F64),
        z0: uniform(&mut r, &[b, 2, 8, 8], -1.5, 1.5, DType::F64),
        timesteps: vec![120, 640],
        eps: uniform(&mut r, &[b, 2, 8, 8], -2.0, 2.0, DType::F64),
        control_text: bb.embed_prompts(&["make red disk clear", "make blue square clear"]).unwrap(),
        backbone_text: bb.embed_prompts(&["red disk", "blue square"]).unwrap(),
        gt_mask: Tensor::from_vec(gt, (b, 1, 32, 32), &Device::Cpu).unwrap(),
        general_count: b,
    };
    let loss = |m: &ControlModel| scalar(&batch_loss(&bb, m, &batch, lam).unwrap().0.total);

    let (terms, _) = batch_loss(&bb, &model, &batch, lam).unwrap();
    let grads = terms.total.backward().unwrap();

    let h = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, var) in &vars {
        let g = grads.get(var.as_tensor()).expect("every parameter reaches the loss");
        let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let argmax = (0..g.len()).max_by(|&i, &j| g[i].abs().total_cmp(&g[j].abs())).unwrap();
        let random = r.random_range(0..g.len());
        for idx in [argmax, random] {
            let x0 = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
            set_element(var, idx, x0 + h);
            let up = loss(&model);
            set_element(var, idx, x0 - h);
            let down = loss(&model);
            set_element(var, idx, x0);
            let numeric = (up - down) / (2.0 * h);
            let analytic = g[idx];
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-6 {
                assert!((analytic - numeric).abs() < 1e-9, "{name}[{idx}]: {analytic:e} vs {numeric:e}");
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            worst = worst.max(rel);
            assert!(rel < 1e-3, "{name}[{idx}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}");
            checked += 1;
        }
    }
    assert!(checked >= vars.len(), "only {checked} informative checks");
    println!("{checked} gradient entries, worst relative error {worst:e}, {:?}", started.elapsed());
    assert!(started.elapsed().as_secs() < 120);
}
