mod common;

use candle_core::DType;
use region_restore::control::ControlConfig;
use region_restore::data_engine::{build_bokeh_corpus, build_synthetic_corpus, Triplet};
use region_restore::degradation::BokehSynthConfig;
use region_restore::diffusion::Backbone;
use region_restore::training::{
    batch_loss, plan_batch, ControlCheckpoint, Source, StepMetrics, TrainConfig, Trainer,
};
use region_restore::Error;

use common::mini_backbone;

fn corpora() -> (Vec<Triplet>, Vec<Triplet>) {
    let general = build_synthetic_corpus(12, 32, 1).unwrap();
    let bokeh = build_bokeh_corpus(6, 32, 2, &BokehSynthConfig::default()).unwrap();
    (general, bokeh)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        stage1_steps: 3,
        stage2_steps: 3,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn ctrl_cfg() -> ControlConfig {
    ControlConfig { stem_hidden: 4, mask_width: 4 }
}

fn params_snapshot(bb: &Backbone) -> Vec<(String, Vec<f32>)> {
    bb.params()
        .iter()
        .map(|(k, v)| (k.clone(), v.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()))
        .collect()
}

#[test]
fn stage_two_mixes_general_at_the_configured_rate() {
    let cfg = TrainConfig {
        batch_size: 16,
        stage1_steps: 10,
        stage2_steps: 625,
        ..TrainConfig::default()
    };
    let mut general = 0usize;
    let mut total = 0usize;
    for step in 0..cfg.total_steps() {
        let plan = plan_batch(&cfg, step, 50, 20, 1000).unwrap();
        if cfg.stage_of(step) == 1 {
            assert!(plan.iter().all(|d| d.source == Source::General));
            continue;
        }
        general += plan.iter().filter(|d| d.source == Source::General).count();
        total += plan.len();
    }
    assert_eq!(total, 10_000);
    let frac = general as f64 / total as f64;
    assert!((0.23..=0.27).contains(&frac), "{frac}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let bb = mini_backbone(DType::F32);
    let (general, bokeh) = corpora();
    let cfg = small_cfg();
    let mut straight = Trainer::new(&bb, &general, &bokeh, cfg.clone(), ctrl_cfg()).unwrap();
    let mut reference: Vec<StepMetrics> = Vec::new();
    straight.run(|_, m| {
        reference.push(m.clone());
        Ok(())
    })
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctrl.safetensors");
    let mut first = Trainer::new(&bb, &general, &bokeh, cfg.clone(), ctrl_cfg()).unwrap();
    for k in 0..4 {
        let batch = first.batch_for(k).unwrap();
        first.train_step(&batch).unwrap();
    }
    first.checkpoint().save(&path).unwrap();
    let ckpt = ControlCheckpoint::load(&path).unwrap();
    assert_eq!(ckpt.step, 4);
    let mut resumed = Trainer::resume(&bb, &general, &bokeh, &ckpt).unwrap();
    let batch = resumed.batch_for(4).unwrap();
    let next = resumed.train_step(&batch).unwrap();
    assert_eq!(next, reference[4]);
}

#[test]
fn backbone_stays_frozen() {
    let bb = mini_backbone(DType::F32);
    let before = params_snapshot(&bb);
    let id = bb.id().to_string();
    let (general, bokeh) = corpora();
    let cfg = TrainConfig {
        stage1_steps: 60,
        stage2_steps: 40,
        ..small_cfg()
    };
    let mut trainer = Trainer::new(&bb, &general, &bokeh, cfg, ctrl_cfg()).unwrap();
    trainer.run(|_, _| Ok(())).unwrap();
    assert_eq!(trainer.step(), 100);
    assert_eq!(params_snapshot(&bb), before);
    let rebuilt = Backbone::from_params(&bb.config, bb.params().clone(), bb.codec.latent_scale, DType::F32).unwrap();
    assert_eq!(rebuilt.id(), id);
}

#[test]
fn non_finite_losses_skip_then_abort() {
    let bb = mini_backbone(DType::F32);
    let (general, bokeh) = corpora();
    let mut trainer = Trainer::new(&bb, &general, &bokeh, small_cfg(), ctrl_cfg()).unwrap();
    let params_before: Vec<Vec<f32>> = trainer
        .model()
        .params()
        .values()
        .map(|v| v.flatten_all().unwrap().to_vec1().unwrap())
        .collect();
    let mut batch = trainer.batch_for(0).unwrap();
    batch.eps = (batch.eps.clone() * f64::NAN).unwrap();
    for k in 0..2 {
        let m = trainer.train_step(&batch).unwrap();
        assert!(m.skipped, "step {k}");
        assert_eq!(trainer.skipped_steps, k + 1);
    }
    let params_after: Vec<Vec<f32>> = trainer
        .model()
        .params()
        .values()
        .map(|v| v.flatten_all().unwrap().to_vec1().unwrap())
        .collect();
    assert_eq!(params_before, params_after);
    match trainer.train_step(&batch) {
        Err(Error::DivergenceDetected { step }) => assert_eq!(step, 2),
        other => panic!("expected divergence, got {other:?}"),
    }

    // A finite step in between resets the streak.
    let mut trainer = Trainer::new(&bb, &general, &bokeh, small_cfg(), ctrl_cfg()).unwrap();
    let good = trainer.batch_for(0).unwrap();
    for _ in 0..2 {
        trainer.train_step(&batch).unwrap();
    }
    assert!(!trainer.train_step(&good).unwrap().skipped);
    for _ in 0..2 {
        trainer.train_step(&batch).unwrap();
    }
}

#[test]
fn zero_lambda_reduces_to_the_diffusion_term() {
    let bb = mini_backbone(DType::F32);
    let (general, bokeh) = corpora();
    let trainer = Trainer::new(&bb, &general, &bokeh, small_cfg(), ctrl_cfg()).unwrap();
    let batch = trainer.batch_for(0).unwrap();
    let (terms, _) = batch_loss(&bb, trainer.model(), &batch, 0.0).unwrap();
    let total: f32 = terms.total.to_scalar().unwrap();
    let diffusion: f32 = terms.diffusion.to_scalar().unwrap();
    assert_eq!(total, diffusion);
    let (terms, _) = batch_loss(&bb, trainer.model(), &batch, 0.5).unwrap();
    let total: f32 = terms.total.to_scalar().unwrap();
    let diffusion: f32 = terms.diffusion.to_scalar().unwrap();
    let mask: f32 = terms.mask.to_scalar().unwrap();
    assert!((total - (diffusion + 0.5 * mask)).abs() <= 1e-6 * total.abs().max(1.0));
}

#[test]
fn checkpoint_refuses_a_different_backbone() {
    let bb = mini_backbone(DType::F32);
    let other = Backbone::init(&bb.config, 99, DType::F32).unwrap();
    let (general, bokeh) = corpora();
    let trainer = Trainer::new(&bb, &general, &bokeh, small_cfg(), ctrl_cfg()).unwrap();
    let ckpt = trainer.checkpoint();
    assert!(matches!(ckpt.model(&other), Err(Error::CheckpointMismatch(_))));
    assert!(ckpt.model(&bb).is_ok());
}
