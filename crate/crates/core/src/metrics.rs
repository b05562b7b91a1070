//! Box IoU, pixel-level consensus IoU, and frame-level hit-rate evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::{rasterize, BBox};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;
/// Attention threshold `τ` and success threshold used by the headline metrics.
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_SUCCESS: f64 = 0.5;

/// Intersection over union with half-open pixel coordinates.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let ih = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = u64::from(iw) * u64::from(ih);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Binary ground-truth map rasterized from boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    pub g: Tensor,
    pub boxes: Vec<BBox>,
}

impl GroundTruthMap {
    pub fn from_boxes(boxes: &[BBox], height: usize, width: usize) -> Result<Self> {
        if let Some(b) = boxes.iter().find(|b| !b.fits(width, height)) {
            return Err(Error::Argument(format!(
                "ground-truth box {b:?} exceeds {width}x{height} frame"
            )));
        }
        Ok(Self {
            g: rasterize(boxes, height, width),
            boxes: boxes.to_vec(),
        })
    }
}

/// Consensus IoU: `Σ_{A} g / (Σ g + |A \ G|)` with `A = {i : α_i > τ}`.
pub fn ciou(alpha: &Tensor, gt: &GroundTruthMap, tau: f64) -> Result<f64> {
    if alpha.shape() != gt.g.shape() {
        return Err(Error::dim(format!(
            "attention {:?} vs ground truth {:?}",
            alpha.shape(),
            gt.g.shape()
        )));
    }
    let (mut hit, mut g_total, mut false_pos) = (0u64, 0u64, 0u64);
    for (&a, &g) in alpha.data().iter().zip(gt.g.data()) {
        let inside = g > 0.5;
        g_total += u64::from(inside);
        if a > tau {
            if inside {
                hit += 1;
            } else {
                false_pos += 1;
            }
        }
    }
    if g_total == 0 {
        return Err(Error::UndefinedFrame(format!("{:?}", gt.boxes)));
    }
    Ok(hit as f64 / (g_total + false_pos) as f64)
}

/// How a frame's ground-truth boxes are matched against predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouRule {
    /// Every ground-truth box is scored by its best predicted box,
    /// independently; each (frame, box) pair is one evaluation unit.
    #[default]
    BestPerGroundTruth,
    /// One unit per frame, hit only when every ground-truth box is matched.
    AllBoxesPerFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tau: f64,
    pub success: f64,
    pub iou_rule: IouRule,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            success: DEFAULT_SUCCESS,
            iou_rule: IouRule::default(),
        }
    }
}

/// Ground-truth annotation for one frame; the on-disk annotation schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_id: String,
    pub boxes: Vec<BBox>,
    pub sounding: bool,
}

impl FrameAnnotation {
    /// Frames that take part in evaluation.
    pub fn is_annotated(&self) -> bool {
        self.sounding && !self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub frame_height: usize,
    pub frame_width: usize,
    pub frames: Vec<FrameAnnotation>,
}

/// Model output for one frame: a normalized frame-size map and boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame_id: String,
    pub alpha: Tensor,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    /// `None` when no prediction was supplied for the frame.
    pub ciou: Option<f64>,
    pub ciou_hit: bool,
    /// Best IoU for each ground-truth box, in annotation order.
    pub box_ious: Vec<f64>,
    pub iou_hits: usize,
    pub iou_units: usize,
    pub predicted_boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub options: EvalOptions,
    pub ciou_at_05: f64,
    pub iou_at_05: f64,
    pub num_frames: usize,
    pub num_iou_units: usize,
    pub missing_predictions: usize,
    pub frames: Vec<FrameRecord>,
}

/// Scores annotated frames. Frames without a prediction count as misses.
pub fn evaluate(
    predictions: &[FramePrediction],
    annotations: &[FrameAnnotation],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<&str, &FramePrediction> = predictions
        .iter()
        .map(|p| (p.frame_id.as_str(), p))
        .collect();
    let mut frames = Vec::new();
    let mut missing = 0;
    for ann in annotations.iter().filter(|a| a.is_annotated()) {
        let units = match opts.iou_rule {
            IouRule::BestPerGroundTruth => ann.boxes.len(),
            IouRule::AllBoxesPerFrame => 1,
        };
        let Some(pred) = by_id.get(ann.frame_id.as_str()) else {
            log::warn!("no prediction for annotated frame {}", ann.frame_id);
            missing += 1;
            frames.push(FrameRecord {
                frame_id: ann.frame_id.clone(),
                ciou: None,
                ciou_hit: false,
                box_ious: vec![0.0; ann.boxes.len()],
                iou_hits: 0,
                iou_units: units,
                predicted_boxes: 0,
            });
            continue;
        };
        let (h, w) = match pred.alpha.shape() {
            [h, w] => (*h, *w),
            s => return Err(Error::dim(format!("frame {} map {s:?}", ann.frame_id))),
        };
        let gt = GroundTruthMap::from_boxes(&ann.boxes, h, w)?;
        let c = ciou(&pred.alpha, &gt, opts.tau)?;
        let box_ious: Vec<f64> = ann
            .boxes
            .iter()
            .map(|g| pred.boxes.iter().map(|p| box_iou(g, p)).fold(0.0, f64::max))
            .collect();
        let matched = box_ious.iter().filter(|&&v| v >= opts.success).count();
        let iou_hits = match opts.iou_rule {
            IouRule::BestPerGroundTruth => matched,
            IouRule::AllBoxesPerFrame => usize::from(matched == ann.boxes.len()),
        };
        frames.push(FrameRecord {
            frame_id: ann.frame_id.clone(),
            ciou: Some(c),
            ciou_hit: c >= opts.success,
            box_ious,
            iou_hits,
            iou_units: units,
            predicted_boxes: pred.boxes.len(),
        });
    }
    let num_frames = frames.len();
    let num_iou_units: usize = frames.iter().map(|f| f.iou_units).sum();
    let ciou_hits = frames.iter().filter(|f| f.ciou_hit).count();
    let iou_hits: usize = frames.iter().map(|f| f.iou_hits).sum();
    let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        options: *opts,
        ciou_at_05: rate(ciou_hits, num_frames),
        iou_at_05: rate(iou_hits, num_iou_units),
        num_frames,
        num_iou_units,
        missing_predictions: missing,
        frames,
    })
}
