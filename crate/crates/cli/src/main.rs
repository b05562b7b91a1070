mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use stm_core::dataset::{
    self, annotations, object_proposals, read_clip_by_id, read_dataset, read_json, write_json,
    ProposalFile,
};
use stm_core::eval::{evaluate_clips, infer_clip, AttentionSource, Extraction, PipelineOptions};
use stm_core::localization::DEFAULT_NMS_IOU;
use stm_core::metrics::{AnnotationFile, FrameAnnotation, ANNOTATION_SCHEMA_VERSION};
use stm_core::model::{Model, CHECKPOINT_FILE, MODEL_CONFIG_FILE};
use stm_core::render::{write_pgm, write_ppm_overlay};
use stm_core::scenes::{generate_dataset, SceneConfig, BACKGROUND_CLASS};
use stm_core::training::{split_validation, train, TRAIN_LOG_FILE};
use stm_core::{Ablation, ModelConfig, TrainConfig};

use manifest::RunManifest;

pub const REPORT_FILE: &str = "report.json";
pub const BOXES_FILE: &str = "boxes.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const PROPOSALS_FILE: &str = "proposals.json";

/// Invalid flag combinations found after parsing; exits with code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "stm",
    version,
    about = "Sounding-object localization with spatio-temporal memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate localization and classification on a dataset.
    Eval(EvalArgs),
    /// Render heatmaps, overlays and boxes for one clip.
    Localize(LocalizeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    clips: usize,
    /// Event classes plus background.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.15)]
    silence_prob: f64,
    #[arg(long, default_value_t = 4)]
    timesteps: usize,
    #[arg(long, default_value_t = 1)]
    distractors_min: usize,
    #[arg(long, default_value_t = 3)]
    distractors_max: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    Uni,
    None,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::Uni => Ablation::UniOnly,
            AblationArg::None => Ablation::NoTemporal,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Memory capacity.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, value_enum, default_value = "full")]
    ablation: AblationArg,
    /// Joint embedding dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.125)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractionArg {
    Contour,
    Proposals,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Model,
    GroundTruth,
    Uniform,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file or training output directory; required when the
    /// attention source is the model.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "contour")]
    extraction: ExtractionArg,
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
    #[arg(long, value_enum, default_value = "model")]
    attention_source: SourceArg,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory holding the clip.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    clip: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Localize(a) => cmd_localize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Caps rayon workers at `STM_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("STM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("STM_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    if a.clips == 0 {
        return Err(usage("--clips must be at least 1"));
    }
    let cfg = SceneConfig {
        num_classes: a.classes,
        timesteps: a.timesteps,
        distractors_min: a.distractors_min,
        distractors_max: a.distractors_max,
        silence_prob: a.silence_prob,
        noise_std: a.noise,
        seed: a.seed,
        ..SceneConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    create_out_dir(&a.out)?;
    let clips = generate_dataset(&cfg, a.clips)?;
    dataset::write_dataset(&a.out, &cfg, &clips)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    write_json(&a.out.join(ANNOTATIONS_FILE), &annotations(&cfg, &clips))?;
    write_json(&a.out.join(PROPOSALS_FILE), &object_proposals(&clips))?;

    let mut m = RunManifest::new("generate", Some(a.seed), serde_json::to_value(&cfg)?);
    m.add(&a.out, dataset::INDEX_FILE, true)?;
    m.add(&a.out, ANNOTATIONS_FILE, true)?;
    m.add(&a.out, PROPOSALS_FILE, true)?;
    m.write(&a.out)?;
    log::info!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

/// Accepts a checkpoint file or the training output directory holding it.
fn load_model(path: &Path) -> Result<Model> {
    let file = if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    };
    Model::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))
}

fn load_dataset(dir: &Path) -> Result<dataset::Dataset> {
    if !dir.join(dataset::INDEX_FILE).is_file() {
        bail!("no dataset at {}", dir.display());
    }
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        seed: a.seed,
        val_fraction: a.val_fraction,
        ..TrainConfig::default()
    };
    tcfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.lr <= 0.0 {
        return Err(usage("--lr must be positive"));
    }
    let data = load_dataset(&a.data)?;
    let mut mcfg = ModelConfig {
        heads: a.heads,
        memory_capacity: a.k,
        ablation: a.ablation.into(),
        num_classes: data.config.num_classes,
        ..ModelConfig::default()
    }
    .with_joint_dim(a.dim);
    mcfg.visual.input_height = data.config.frame_height;
    mcfg.visual.input_width = data.config.frame_width;
    mcfg.audio.input_height = data.config.audio_height;
    mcfg.audio.input_width = data.config.audio_width;
    mcfg.validate().map_err(|e| usage(e.to_string()))?;

    create_out_dir(&a.out)?;
    let model = Model::init(mcfg.clone(), a.seed)?;
    let (train_set, val_set) = split_validation(&data.clips, tcfg.val_fraction);
    let outcome = train(model, train_set, val_set, &tcfg, Some(&a.out))?;
    log::info!(
        "best epoch {} of {}; initial loss {:.4}",
        outcome.best_epoch,
        tcfg.epochs,
        outcome.initial_loss
    );

    let config = json!({ "train": tcfg, "model": mcfg, "data": a.data });
    let mut m = RunManifest::new("train", Some(a.seed), config);
    m.add(&a.out, CHECKPOINT_FILE, true)?;
    m.add(&a.out, MODEL_CONFIG_FILE, true)?;
    m.add(&a.out, TRAIN_LOG_FILE, false)?;
    m.write(&a.out)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let extraction = match a.extraction {
        ExtractionArg::Contour => Extraction::Contour,
        ExtractionArg::Proposals => Extraction::Proposals,
    };
    if extraction == Extraction::Proposals && a.proposals.is_none() {
        return Err(usage("--extraction proposals requires --proposals FILE"));
    }
    let source = match a.attention_source {
        SourceArg::Model => AttentionSource::Model,
        SourceArg::GroundTruth => AttentionSource::GroundTruth,
        SourceArg::Uniform => AttentionSource::Uniform,
    };
    if source == AttentionSource::Model && a.ckpt.is_none() {
        return Err(usage("--ckpt is required for --attention-source model"));
    }
    if !(0.0..=1.0).contains(&a.nms_iou) {
        return Err(usage("--nms-iou must lie in [0, 1]"));
    }
    let data = load_dataset(&a.data)?;
    let model = match &a.ckpt {
        Some(p) if source == AttentionSource::Model => Some(load_model(p)?),
        _ => None,
    };
    let proposals: Option<ProposalFile> = match &a.proposals {
        Some(p) => Some(read_json(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let opts = PipelineOptions {
        extraction,
        nms_iou: a.nms_iou,
        ..PipelineOptions::default()
    };
    let report = evaluate_clips(
        model.as_ref(),
        source,
        &data.clips,
        &opts,
        proposals.as_ref(),
    )?;
    log::info!(
        "cIoU@0.5 {:.4}  IoU@0.5 {:.4} over {} frames",
        report.localization.ciou_at_05,
        report.localization.iou_at_05,
        report.localization.num_frames
    );
    if let Some(c) = &report.classification {
        log::info!("clip accuracy {:.4}", c.clip_accuracy);
    }
    create_out_dir(&a.out)?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    let config = json!({
        "data": a.data,
        "ckpt": a.ckpt,
        "proposals": a.proposals,
        "pipeline": opts,
        "attention_source": source,
    });
    let mut m = RunManifest::new("eval", None, config);
    m.add(&a.out, REPORT_FILE, true)?;
    m.write(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct StepSummary {
    t: usize,
    predicted_class: usize,
    predicted_label: String,
    probs: Vec<f64>,
    heatmap: String,
    overlay: String,
}

#[derive(Serialize)]
struct LocalizeOutput {
    clip: usize,
    label: usize,
    steps: Vec<StepSummary>,
    /// Predicted boxes in the annotation schema.
    annotations: AnnotationFile,
}

fn cmd_localize(a: LocalizeArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    if !a.data.join(dataset::INDEX_FILE).is_file() {
        bail!("no dataset at {}", a.data.display());
    }
    let (cfg, clip) = read_clip_by_id(&a.data, a.clip)
        .with_context(|| format!("reading clip {} from {}", a.clip, a.data.display()))?;
    let inf = infer_clip(&model, &clip, &PipelineOptions::default(), None)?;
    create_out_dir(&a.out)?;
    let names = dataset::class_names(cfg.num_classes);
    let mut steps = Vec::new();
    let mut frames = Vec::new();
    let mut m = RunManifest::new(
        "localize",
        None,
        json!({ "ckpt": a.ckpt, "data": a.data, "clip": a.clip }),
    );
    for (t, s) in inf.steps.iter().enumerate() {
        let heatmap = format!("heatmap_t{t}.pgm");
        let overlay = format!("overlay_t{t}.ppm");
        write_pgm(&a.out.join(&heatmap), &s.alpha)?;
        write_ppm_overlay(&a.out.join(&overlay), &clip.frames[t], &s.boxes)?;
        m.add(&a.out, &heatmap, true)?;
        m.add(&a.out, &overlay, true)?;
        frames.push(FrameAnnotation {
            frame_id: s.frame_id.clone(),
            boxes: s.boxes.clone(),
            sounding: s.predicted_class != BACKGROUND_CLASS,
        });
        steps.push(StepSummary {
            t,
            predicted_class: s.predicted_class,
            predicted_label: names[s.predicted_class].clone(),
            probs: s.probs.clone(),
            heatmap,
            overlay,
        });
    }
    let out = LocalizeOutput {
        clip: clip.id,
        label: clip.label,
        steps,
        annotations: AnnotationFile {
            schema_version: ANNOTATION_SCHEMA_VERSION,
            frame_height: cfg.frame_height,
            frame_width: cfg.frame_width,
            frames,
        },
    };
    write_json(&a.out.join(BOXES_FILE), &out)?;
    m.add(&a.out, BOXES_FILE, true)?;
    m.write(&a.out)?;
    let n_boxes: usize = out.annotations.frames.iter().map(|f| f.boxes.len()).sum();
    log::info!(
        "clip {}: {} boxes over {} timesteps",
        clip.id,
        n_boxes,
        out.steps.len()
    );
    Ok(())
}
