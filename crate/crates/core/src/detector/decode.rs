//! Box decoding and class-wise greedy NMS.

use serde::{Deserialize, Serialize};

use super::model::HeadValues;
use crate::boxes::BBox;
use crate::diff::sigmoid;

/// How a location's class probability becomes a detection score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Classification probability alone.
    ClsOnly,
    /// `p_cls * sqrt(p_centerness)`.
    ClsCenterness,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub score_mode: ScoreMode,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_mode: ScoreMode::ClsOnly,
            score_threshold: 0.05,
            nms_iou: 0.6,
            pre_nms_top_k: 1000,
            max_detections: 100,
        }
    }
}

/// A decoded box together with the uncertainty of the location it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Per-side uncertainty `[l, t, r, b]` in stride units.
    pub delta: [f64; 4],
    pub location: usize,
}

/// Stable descending-score order of `boxes` (ties keep input order).
fn score_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score_or_zero()
            .total_cmp(&boxes[a].score_or_zero())
    });
    order
}

/// Greedy class-wise NMS; returns kept indices in descending score order.
pub fn nms_indices(boxes: &[BBox], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(boxes);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j]
                && boxes[j].class_id == boxes[i].class_id
                && boxes[i].iou(&boxes[j]) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    nms_indices(boxes, iou_threshold)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}

/// Turns head outputs into scored, clipped, NMS-filtered detections sorted by
/// descending score.
pub fn decode_detections(values: &HeadValues, params: &DecodeParams) -> Vec<Detection> {
    let grid = values.grid;
    let (img_h, img_w) = grid.image_size();
    let stride = grid.stride as f64;
    let mut candidates = Vec::new();
    for loc in 0..grid.len() {
        let ctr = match params.score_mode {
            ScoreMode::ClsOnly => 1.0,
            ScoreMode::ClsCenterness => sigmoid(values.ctr_logit(loc)).sqrt(),
        };
        let (cx, cy) = grid.center(loc);
        let [l, t, r, b] = values.ltrb_at(loc).map(|d| d * stride);
        for class in 0..values.num_classes() {
            let score = sigmoid(values.cls_logit(class, loc)) * ctr;
            if score < params.score_threshold {
                continue;
            }
            let raw = BBox::new(cx - l, cy - t, cx + r, cy + b, class).with_score(score);
            if let Some(bbox) = raw.clipped(img_w as f64, img_h as f64) {
                candidates.push(Detection {
                    bbox,
                    delta: values.delta_at(loc),
                    location: loc,
                });
            }
        }
    }
    let boxes: Vec<BBox> = candidates.iter().map(|d| d.bbox).collect();
    let mut order = score_order(&boxes);
    order.truncate(params.pre_nms_top_k);
    let top: Vec<Detection> = order.iter().map(|&i| candidates[i]).collect();
    let top_boxes: Vec<BBox> = top.iter().map(|d| d.bbox).collect();
    let mut kept: Vec<Detection> = nms_indices(&top_boxes, params.nms_iou)
        .into_iter()
        .map(|i| top[i])
        .collect();
    kept.truncate(params.max_detections);
    kept
}
