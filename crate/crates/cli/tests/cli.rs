use std::fs;
use std::path::Path;

use region_restore::image::{Image, Plane};
use region_restore::instruction::parse_inference_instruction;
use region_restore_cli::{golden_vectors, load_run_config, run, EXIT_MALFORMED_INSTRUCTION, EXIT_OK, EXIT_USAGE};

const MINI_CONFIG: &str = r#"{
  "backbone": {"latent_channels": 2, "codec_hidden": 4, "vocab_size": 32, "text_dim": 8,
               "max_tokens": 4, "unet_channels": [8], "time_dim": 8},
  "pretrain": {"codec_steps": 4, "codec_batch": 2, "diffusion_steps": 4, "batch_size": 2, "log_every": 0},
  "control": {"stem_hidden": 4, "mask_width": 4},
  "train": {"batch_size": 2, "stage1_steps": 3, "stage2_steps": 2, "learning_rate": 0.001, "log_every": 0}
}"#;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("region-restore").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(cli(&["gen-data", "--out", p(out), "--n", "10", "--size", "64", "--seed", "7"]), EXIT_OK);
    }
    let index = fs::read(a.join("index.jsonl")).unwrap();
    assert!(String::from_utf8_lossy(&index).lines().count() >= 10);
    assert_eq!(index, fs::read(b.join("index.jsonl")).unwrap());
}

#[test]
fn bokeh_variant_tags_its_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bk");
    assert_eq!(cli(&["gen-data", "--out", p(&out), "--n", "3", "--size", "32", "--seed", "1", "--bokeh"]), EXIT_OK);
    let triplets = region_restore::data_engine::read_dataset(&out).unwrap();
    assert_eq!(triplets.len(), 3);
    assert!(triplets.iter().all(|t| t.is_bokeh()));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["gen-data", "--out", p(dir.path()), "--n", "0"]), EXIT_USAGE);
    assert_eq!(cli(&["train", "--out", p(dir.path())]), EXIT_USAGE);
    assert_eq!(cli(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(cli(&["serve", "--ckpt", "x", "--port", "0"]), EXIT_USAGE);
}

#[test]
fn malformed_instruction_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.png");
    Image::new(32, 32).save_png(&img).unwrap();
    let code = cli(&[
        "restore", "--ckpt", p(dir.path()), "--in", p(&img), "--instruction", "hello", "--seed", "1", "--out",
        p(&dir.path().join("o.png")),
    ]);
    assert_eq!(code, EXIT_MALFORMED_INSTRUCTION);
}

#[test]
fn golden_vectors_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("golden.json");
    assert_eq!(cli(&["golden-vectors", "--out", p(&path)]), EXIT_OK);
    let vectors: Vec<region_restore_cli::GoldenVector> = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    assert_eq!(vectors, golden_vectors().unwrap());
    assert_eq!(vectors.len(), 25);
    for v in &vectors {
        let parsed = parse_inference_instruction(&v.instruction).unwrap();
        assert_eq!(parsed.region_caption(), v.caption);
        assert_eq!((parsed.s1(), parsed.s2()), (v.s1, v.s2));
        assert_eq!(parsed.task().to_string(), v.task);
    }
    assert_eq!(
        vectors[0].instruction,
        "make sign clear with 0.9, and make other parts with 1.0"
    );
}

#[test]
fn train_restore_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (general, bokeh, out) = (root.join("general"), root.join("bokeh"), root.join("run"));
    let cfg = root.join("cfg.json");
    fs::write(&cfg, MINI_CONFIG).unwrap();
    assert_eq!(cli(&["gen-data", "--out", p(&general), "--n", "6", "--size", "32", "--seed", "1"]), EXIT_OK);
    assert_eq!(cli(&["gen-data", "--out", p(&bokeh), "--n", "3", "--size", "32", "--seed", "2", "--bokeh"]), EXIT_OK);
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--config", p(&cfg), "--general", p(&general), "--bokeh", p(&bokeh), "--out", p(&out)];
        args.extend_from_slice(extra);
        cli(&args)
    };
    assert_eq!(train(&[]), EXIT_OK);
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    let input = root.join("in.png");
    region_restore::data_engine::read_dataset(&general).unwrap()[0].image.save_png(&input).unwrap();
    let (img_out, mask_out) = (root.join("out.png"), root.join("mask.png"));
    let code = cli(&[
        "restore", "--ckpt", p(&out), "--in", p(&input), "--instruction",
        "make red disk clear with 0.9, and make other parts with 1.0", "--seed", "3", "--steps", "3", "--out",
        p(&img_out), "--mask-out", p(&mask_out),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(Image::load(&img_out).unwrap().shape(), (32, 32));
    assert_eq!(Plane::load_png(&mask_out).unwrap().shape(), (32, 32));

    let preview = root.join("preview.png");
    let code = cli(&[
        "preview-mask", "--ckpt", p(&out.join("control-final.safetensors")), "--in", p(&input), "--instruction",
        "make red disk clear with 0.9, and make other parts with 1.0", "--seed", "3", "--steps", "3", "--out",
        p(&preview),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read(&preview).unwrap(), fs::read(&mask_out).unwrap());

    // Resuming a finished run continues from its stored counter and adds
    // no steps.
    let resume = out.join("control-final.safetensors");
    assert_eq!(train(&["--resume", p(&resume)]), EXIT_OK);
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 5);
    let ckpt = region_restore::training::ControlCheckpoint::load(&resume).unwrap();
    assert_eq!(ckpt.step, 5);

    let eval_out = root.join("eval");
    let code = cli(&[
        "evaluate", "--ckpt", p(&out), "--data", p(&general), "--out", p(&eval_out), "--steps", "2", "--limit", "3",
    ]);
    assert_eq!(code, EXIT_OK);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(eval_out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(eval_out.join("report.csv")).unwrap().starts_with("image_id,"));
}

#[test]
fn render_instruction_prints_the_template() {
    assert_eq!(
        cli(&["render-instruction", "--task", "bokeh", "--caption", "flower", "--s1", "1", "--s2", "2"]),
        EXIT_OK
    );
    assert_eq!(
        cli(&["render-instruction", "--task", "local", "--caption", "", "--s1", "1", "--s2", "2"]),
        EXIT_MALFORMED_INSTRUCTION
    );
}

#[test]
fn shipped_desk_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = load_run_config(Some(&path)).unwrap();
    assert_eq!(cfg.train.stage1_steps + cfg.train.stage2_steps, 2000);
    assert_eq!(cfg.train.learning_rate, 2e-3);
    assert_eq!(cfg.backbone, Default::default());
}
