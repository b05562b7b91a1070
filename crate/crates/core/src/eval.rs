//! Inference over clips: classification statistics, attention maps turned
//! into boxes, and localization reports.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ProposalFile;
use crate::error::{Error, Result};
use crate::localization::{
    contour_boxes, frame_attention, ground_proposals, normalize_map, rasterize, BBox, ProposalSet,
    DEFAULT_MIN_AREA, DEFAULT_NMS_IOU,
};
use crate::metrics::{evaluate, EvalOptions, EvalReport, FrameAnnotation, FramePrediction};
use crate::model::Model;
use crate::scenes::{SceneSample, BACKGROUND_CLASS};
use crate::stm::TimestepDiagnostics;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    Contour,
    Proposals,
}

impl FromStr for Extraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contour" => Ok(Extraction::Contour),
            "proposals" => Ok(Extraction::Proposals),
            other => Err(Error::Argument(format!("unknown extraction {other:?}"))),
        }
    }
}

/// Where localization maps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    Model,
    /// Rasterized ground truth, an upper bound.
    GroundTruth,
    /// A constant map, a lower bound.
    Uniform,
}

impl FromStr for AttentionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(AttentionSource::Model),
            "ground-truth" | "ground_truth" => Ok(AttentionSource::GroundTruth),
            "uniform" => Ok(AttentionSource::Uniform),
            other => Err(Error::Argument(format!(
                "unknown attention source {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub extraction: Extraction,
    pub min_area: usize,
    pub nms_iou: f64,
    /// Drop boxes on timesteps classified as background.
    pub suppress_background_boxes: bool,
    pub eval: EvalOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            extraction: Extraction::Contour,
            min_area: DEFAULT_MIN_AREA,
            nms_iou: DEFAULT_NMS_IOU,
            suppress_background_boxes: true,
            eval: EvalOptions::default(),
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInference {
    pub frame_id: String,
    /// Normalized frame-size localization map.
    pub alpha: Tensor,
    pub boxes: Vec<BBox>,
    pub probs: Vec<f64>,
    pub predicted_class: usize,
    pub diagnostics: Option<TimestepDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipInference {
    pub clip_id: usize,
    pub steps: Vec<StepInference>,
}

impl ClipInference {
    /// Event class (never background) with the highest mean probability.
    pub fn clip_prediction(&self) -> usize {
        let nc = self.steps[0].probs.len();
        let mut mean = vec![0.0; nc];
        for s in &self.steps {
            for (m, p) in mean.iter_mut().zip(&s.probs) {
                *m += p;
            }
        }
        1 + argmax(&mean[1..])
    }
}

fn extract(
    alpha: &Tensor,
    frame_id: &str,
    opts: &PipelineOptions,
    proposals: Option<&ProposalFile>,
) -> Result<Vec<BBox>> {
    match opts.extraction {
        Extraction::Contour => contour_boxes(alpha, opts.min_area),
        Extraction::Proposals => {
            let file = proposals.ok_or_else(|| {
                Error::Argument("proposal extraction needs a proposal file".into())
            })?;
            let boxes = file.get(frame_id).unwrap_or(&[]);
            if boxes.is_empty() {
                return Ok(Vec::new());
            }
            let (h, w) = (alpha.shape()[0], alpha.shape()[1]);
            let set = ProposalSet::from_boxes(boxes, h, w, file.source.clone())?;
            ground_proposals(alpha, &set, opts.nms_iou)
        }
    }
}

/// Runs the model over one clip and extracts boxes per timestep.
pub fn infer_clip(
    model: &Model,
    clip: &SceneSample,
    opts: &PipelineOptions,
    proposals: Option<&ProposalFile>,
) -> Result<ClipInference> {
    let outputs = model.process_video(&clip.frames, &clip.audio)?;
    let mut steps = Vec::with_capacity(outputs.len());
    for (t, out) in outputs.into_iter().enumerate() {
        let [h, w, _] = clip.frames[t].shape() else {
            return Err(Error::dim(format!("frame {:?}", clip.frames[t].shape())));
        };
        let frame_id = clip.frame_id(t);
        let alpha = frame_attention(&out.final_alpha, *h, *w)?;
        let probs = softmax(out.logits.data());
        let predicted_class = argmax(&probs);
        let boxes = if opts.suppress_background_boxes && predicted_class == BACKGROUND_CLASS {
            Vec::new()
        } else {
            extract(&alpha, &frame_id, opts, proposals)?
        };
        steps.push(StepInference {
            frame_id,
            alpha,
            boxes,
            probs,
            predicted_class,
            diagnostics: Some(out.diagnostics),
        });
    }
    Ok(ClipInference {
        clip_id: clip.id,
        steps,
    })
}

/// Maps from a fixed source instead of a model; every step counts as sounding.
pub fn infer_clip_from_source(
    source: AttentionSource,
    clip: &SceneSample,
    opts: &PipelineOptions,
    proposals: Option<&ProposalFile>,
) -> Result<ClipInference> {
    let mut steps = Vec::with_capacity(clip.frames.len());
    for t in 0..clip.frames.len() {
        let (h, w) = (clip.frames[t].shape()[0], clip.frames[t].shape()[1]);
        let raw = match source {
            AttentionSource::GroundTruth => rasterize(&clip.gt[t], h, w),
            AttentionSource::Uniform => Tensor::full(&[h, w], 1.0 / (h * w) as f64),
            AttentionSource::Model => {
                return Err(Error::Argument("model source needs a checkpoint".into()))
            }
        };
        let alpha = normalize_map(&raw);
        let frame_id = clip.frame_id(t);
        let boxes = extract(&alpha, &frame_id, opts, proposals)?;
        steps.push(StepInference {
            frame_id,
            alpha,
            boxes,
            probs: Vec::new(),
            predicted_class: if clip.sounding[t] {
                clip.label
            } else {
                BACKGROUND_CLASS
            },
            diagnostics: None,
        });
    }
    Ok(ClipInference {
        clip_id: clip.id,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationStats {
    /// Event class from mean probabilities over the clip vs. the clip label.
    pub clip_accuracy: f64,
    /// Per-timestep accuracy against labels with background on silent steps.
    pub step_accuracy: f64,
    pub sounding_step_accuracy: Option<f64>,
    /// Fraction of silent timesteps predicted as background.
    pub silent_background_rate: Option<f64>,
    pub silent_steps: usize,
    pub mean_loss: f64,
}

fn rate(n: usize, d: usize) -> Option<f64> {
    (d > 0).then(|| n as f64 / d as f64)
}

/// Classification statistics from finished inferences.
pub fn stats_from_inferences(clips: &[SceneSample], inf: &[ClipInference]) -> ClassificationStats {
    let (mut clip_hits, mut steps, mut step_hits) = (0, 0, 0);
    let (mut sounding, mut sounding_hits, mut silent, mut silent_bg) = (0, 0, 0, 0);
    let mut loss = 0.0;
    for (clip, ci) in clips.iter().zip(inf) {
        clip_hits += usize::from(ci.clip_prediction() == clip.label);
        let labels = clip.step_labels();
        let mut clip_loss = 0.0;
        for (s, &y) in ci.steps.iter().zip(&labels) {
            let hit = s.predicted_class == y;
            steps += 1;
            step_hits += usize::from(hit);
            clip_loss -= s.probs[y].max(f64::MIN_POSITIVE).ln();
            if y == BACKGROUND_CLASS {
                silent += 1;
                silent_bg += usize::from(hit);
            } else {
                sounding += 1;
                sounding_hits += usize::from(hit);
            }
        }
        loss += clip_loss / labels.len() as f64;
    }
    ClassificationStats {
        clip_accuracy: rate(clip_hits, clips.len()).unwrap_or(0.0),
        step_accuracy: rate(step_hits, steps).unwrap_or(0.0),
        sounding_step_accuracy: rate(sounding_hits, sounding),
        silent_background_rate: rate(silent_bg, silent),
        silent_steps: silent,
        mean_loss: loss / clips.len().max(1) as f64,
    }
}

pub fn classification_stats(model: &Model, clips: &[SceneSample]) -> Result<ClassificationStats> {
    // Classification only; no box extraction.
    let inf = clips
        .par_iter()
        .map(|c| {
            let outs = model.process_video(&c.frames, &c.audio)?;
            Ok(ClipInference {
                clip_id: c.id,
                steps: outs
                    .into_iter()
                    .enumerate()
                    .map(|(t, o)| {
                        let probs = softmax(o.logits.data());
                        StepInference {
                            frame_id: c.frame_id(t),
                            alpha: o.final_alpha,
                            boxes: Vec::new(),
                            predicted_class: argmax(&probs),
                            probs,
                            diagnostics: None,
                        }
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stats_from_inferences(clips, &inf))
}

pub fn annotations_for(clips: &[SceneSample]) -> Vec<FrameAnnotation> {
    clips
        .iter()
        .flat_map(|c| {
            (0..c.frames.len()).map(move |t| FrameAnnotation {
                frame_id: c.frame_id(t),
                boxes: c.gt[t].clone(),
                sounding: c.sounding[t],
            })
        })
        .collect()
}

pub fn predictions_for(inf: &[ClipInference]) -> Vec<FramePrediction> {
    inf.iter()
        .flat_map(|c| {
            c.steps.iter().map(|s| FramePrediction {
                frame_id: s.frame_id.clone(),
                alpha: s.alpha.clone(),
                boxes: s.boxes.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub localization: EvalReport,
    pub classification: Option<ClassificationStats>,
    pub pipeline: PipelineOptions,
    pub attention_source: AttentionSource,
}

/// Full evaluation of a model (or a fixed attention source) on clips.
pub fn evaluate_clips(
    model: Option<&Model>,
    source: AttentionSource,
    clips: &[SceneSample],
    opts: &PipelineOptions,
    proposals: Option<&ProposalFile>,
) -> Result<ModelReport> {
    let inf = clips
        .par_iter()
        .map(|c| match (source, model) {
            (AttentionSource::Model, Some(m)) => infer_clip(m, c, opts, proposals),
            (AttentionSource::Model, None) => {
                Err(Error::Argument("model source needs a checkpoint".into()))
            }
            (s, _) => infer_clip_from_source(s, c, opts, proposals),
        })
        .collect::<Result<Vec<_>>>()?;
    let localization = evaluate(&predictions_for(&inf), &annotations_for(clips), &opts.eval)?;
    let classification =
        (source == AttentionSource::Model).then(|| stats_from_inferences(clips, &inf));
    Ok(ModelReport {
        localization,
        classification,
        pipeline: opts.clone(),
        attention_source: source,
    })
}
