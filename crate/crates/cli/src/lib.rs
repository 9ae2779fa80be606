//! Command line front end: data generation, training, restoration, mask
//! preview, evaluation, instruction rendering and the HTTP service.

pub mod ckpt;
pub mod service;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use region_restore::control::ControlConfig;
use region_restore::data_engine::{build_bokeh_corpus, build_synthetic_corpus, read_dataset, write_dataset, Triplet};
use region_restore::degradation::{degrade, BokehSynthConfig};
use region_restore::diffusion::{pretrain_backbone, Backbone, BackboneConfig, PretrainConfig};
use region_restore::evaluation::{evaluate_dataset, EvalConfig, EvalItem, ScorerRegistry};
use region_restore::image::Image;
use region_restore::inference::{triplet_instruction, RestoreRequest, DEFAULT_STEPS};
use region_restore::instruction::{render_inference_instruction, Instruction, Task};
use region_restore::training::{train_loop, ControlCheckpoint, LoopOutputs, TrainConfig};
use region_restore::{Error, Result};

use ckpt::{load_restorer, BACKBONE_FILE, CKPT_ENV, CONTROL_FILE, METRICS_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MALFORMED_INSTRUCTION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "region-restore", version, about = "Instruction-driven region restoration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus to disk.
    GenData(GenDataArgs),
    /// Pretrain the backbone if needed, then train the control branch.
    Train(TrainArgs),
    /// Restore one image.
    Restore(RestoreArgs),
    /// Write the mask a restore would use, without sampling.
    PreviewMask(RestoreArgs),
    /// Restore every triplet of a dataset from its degraded input and score it.
    Evaluate(EvaluateArgs),
    /// Print the canonical instruction string for the given fields.
    RenderInstruction(RenderArgs),
    /// Write instruction test vectors for client implementations.
    GoldenVectors(GoldenArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of rendered scenes.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Render the bokeh variant: one sharp shape per scene, blurred surroundings.
    #[arg(long)]
    pub bokeh: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub general: PathBuf,
    #[arg(long)]
    pub bokeh: Option<PathBuf>,
    /// Output directory for the backbone, control checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    /// Existing backbone archive; pretrained from the datasets otherwise.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Control checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    /// Training output directory or control checkpoint.
    #[arg(long, env = CKPT_ENV)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Output image (restore) or mask (preview-mask) PNG.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    /// Re-predict the mask at every sampling step.
    #[arg(long)]
    pub mask_per_step: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, env = CKPT_ENV)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving report.json, report.csv and the restored images.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub s1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub s2: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only the first N triplets.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// `local` or `bokeh`.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub caption: String,
    #[arg(long)]
    pub s1: f64,
    #[arg(long)]
    pub s2: f64,
}

#[derive(Debug, Args)]
pub struct GoldenArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = CKPT_ENV)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080, value_parser = clap::value_parser!(u16).range(1..))]
    pub port: u16,
    #[arg(long, default_value_t = 512)]
    pub max_side: usize,
    #[arg(long, default_value_t = 300)]
    pub timeout_secs: u64,
    #[arg(long, default_value_t = 1)]
    pub max_concurrent: usize,
}

/// Everything `train` needs; each section falls back to its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub control: ControlConfig,
    pub train: TrainConfig,
}

/// One instruction test vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenVector {
    pub task: String,
    pub caption: String,
    pub s1: f64,
    pub s2: f64,
    pub instruction: String,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MalformedInstruction(_) | Error::InvalidInstruction(_) => EXIT_MALFORMED_INSTRUCTION,
        Error::InvalidConfig(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Restore(a) => restore(&a, false),
        Command::PreviewMask(a) => restore(&a, true),
        Command::Evaluate(a) => evaluate(&a),
        Command::RenderInstruction(a) => {
            let task: Task = a.task.parse()?;
            println!("{}", render_inference_instruction(&Instruction::new(task, a.caption, a.s1, a.s2)?));
            Ok(())
        }
        Command::GoldenVectors(a) => {
            fs::write(&a.out, serde_json::to_string_pretty(&golden_vectors()?)? + "\n")?;
            Ok(())
        }
        Command::Serve(a) => serve(a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let n = a.n as usize;
    let triplets = if a.bokeh {
        build_bokeh_corpus(n, a.size, a.seed, &BokehSynthConfig::default())?
    } else {
        build_synthetic_corpus(n, a.size, a.seed)?
    };
    write_dataset(&triplets, &a.out)?;
    println!("{} triplets written to {}", triplets.len(), a.out.display());
    Ok(())
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg: RunConfig = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    cfg.backbone.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref())?;
    let general = read_dataset(&a.general)?;
    let bokeh = match &a.bokeh {
        Some(d) => read_dataset(d)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out)?;
    let resume = a.resume.as_ref().map(ControlCheckpoint::load).transpose()?;
    let backbone_out = a.out.join(BACKBONE_FILE);
    let backbone = match (&a.backbone, resume.is_some() && backbone_out.is_file()) {
        (Some(p), _) => Backbone::load(p, candle_core::DType::F32)?,
        (None, true) => Backbone::load(&backbone_out, candle_core::DType::F32)?,
        (None, false) => {
            let corpus: Vec<Triplet> = general.iter().chain(&bokeh).cloned().collect();
            info!("pretraining backbone on {} triplets", corpus.len());
            let (bb, report) = pretrain_backbone(&corpus, &cfg.backbone, &cfg.pretrain)?;
            fs::write(a.out.join("pretrain.json"), serde_json::to_string(&report)?)?;
            bb
        }
    };
    if a.backbone.as_deref() != Some(backbone_out.as_path()) {
        backbone.save(&backbone_out)?;
    }
    let outputs = LoopOutputs {
        checkpoint_dir: Some(a.out.clone()),
        metrics_path: Some(a.out.join(METRICS_FILE)),
    };
    let (ckpt, metrics) = train_loop(&backbone, &general, &bokeh, &cfg.train, &cfg.control, resume.as_ref(), &outputs)?;
    if let Some(last) = metrics.last() {
        println!(
            "step {}: loss {:.4} (diffusion {:.4}, mask {:.4}); checkpoint {}",
            ckpt.step,
            last.total,
            last.diffusion_term,
            last.mask_term,
            a.out.join(CONTROL_FILE).display()
        );
    }
    Ok(())
}

fn restore(a: &RestoreArgs, preview_only: bool) -> Result<()> {
    // Reject bad instructions before paying for the checkpoint load.
    region_restore::instruction::parse_inference_instruction(&a.instruction)?;
    let lq = Image::load(&a.input)?;
    let (restorer, _) = load_restorer(&a.ckpt)?;
    let mut req = RestoreRequest::new(lq, a.instruction.clone())
        .with_seed(a.seed)
        .with_steps(a.steps);
    req.mask_per_step = a.mask_per_step;
    if preview_only {
        restorer.preview_mask(&req)?.save_png(&a.out)?;
        return Ok(());
    }
    let result = restorer.restore(&req)?;
    result.image.save_png(&a.out)?;
    if let Some(p) = &a.mask_out {
        result.mask.save_png(p)?;
    }
    Ok(())
}

/// Degraded input for the `i`-th evaluation triplet.
pub fn evaluation_input(t: &Triplet, i: usize, seed: u64, cfg: &region_restore::degradation::DegradationConfig) -> Result<Image> {
    degrade(&t.image, cfg, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut triplets = read_dataset(&a.data)?;
    if let Some(n) = a.limit {
        triplets.truncate(n);
    }
    let paths = ckpt::CheckpointPaths::resolve(&a.ckpt)?;
    let degradation = ControlCheckpoint::load(&paths.control)?.train_config.degradation;
    let (restorer, _) = load_restorer(&a.ckpt)?;
    let images = a.out.join("images");
    fs::create_dir_all(&images)?;
    let mut items = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let lq = evaluation_input(t, i, a.seed, &degradation)?;
        let instruction = render_inference_instruction(&triplet_instruction(t, a.s1, a.s2)?);
        let req = RestoreRequest::new(lq, instruction).with_seed(a.seed).with_steps(a.steps);
        let out = restorer.restore(&req)?;
        out.image.save_png(images.join(format!("{i:05}-{}.png", t.image_id)))?;
        items.push(EvalItem {
            image_id: t.image_id.clone(),
            output: out.image,
        });
    }
    let report = evaluate_dataset(&items, &triplets, &ScorerRegistry::default(), &EvalConfig::default())?;
    report.write(a.out.join("report.json"), a.out.join("report.csv"))?;
    println!("{}", serde_json::to_string_pretty(&report.aggregates)?);
    Ok(())
}

/// Fixed instruction vectors covering both templates, scale edges and
/// multi-word captions.
pub fn golden_vectors() -> Result<Vec<GoldenVector>> {
    const CAPTIONS: [&str; 5] = ["sign", "red striped disk", "the flower", "blue checkered square", "cat"];
    const SCALES: [(f64, f64); 5] = [(0.9, 1.0), (1.0, 2.0), (0.5, 0.05), (1.25, 0.0), (2.0, 1.1)];
    let mut out = Vec::with_capacity(25);
    for (i, caption) in CAPTIONS.iter().enumerate() {
        for (j, &(s1, s2)) in SCALES.iter().enumerate() {
            let task = if (i + j) % 2 == 0 { Task::LocalRestore } else { Task::BokehRestore };
            let instr = Instruction::new(task, *caption, s1, s2)?;
            out.push(GoldenVector {
                task: task.to_string(),
                caption: caption.to_string(),
                s1,
                s2,
                instruction: render_inference_instruction(&instr),
            });
        }
    }
    Ok(out)
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = service::ServiceConfig {
        bind: a.bind,
        port: a.port,
        checkpoint: Some(a.ckpt),
        max_side: a.max_side,
        request_timeout_secs: a.timeout_secs,
        max_concurrent: a.max_concurrent,
    };
    config.validate().map_err(Error::InvalidConfig)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(config))?;
    Ok(())
}
