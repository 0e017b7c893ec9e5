//! COCO-style detection metrics.
//!
//! AP uses 101-point interpolation; mAP@[.5:.95] averages over the ten IoU
//! thresholds 0.50, 0.55, ..., 0.95. Classes without ground truth are left
//! out of every mean.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::data::{round2, CocoDocument};
use crate::error::{Error, Result};

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`, each computed as an exact quotient.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// IoU of two boxes, rejecting degenerate ones.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// Indices of `boxes` by descending score; ties keep input order.
fn by_score(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score_or_zero()
            .total_cmp(&boxes[i].score_or_zero())
    });
    order
}

/// Greedy matching of one class on one image.
///
/// Detections are visited by descending score; each takes the unmatched
/// ground truth of highest IoU if that IoU is at least `iou_threshold`.
/// Returns true-positive flags aligned with `dets`.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_threshold: f64) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in by_score(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let v = dets[i].iou(gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            flags[i] = true;
        }
    }
    flags
}

/// Precision/recall after each detection of a score-sorted list.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    pub num_gt: usize,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

impl PRCurve {
    /// Builds the curve from `(score, is_tp)` pairs, stably sorted by score.
    pub fn from_scored(scored: &[(f64, bool)], num_gt: usize) -> Self {
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&i, &j| scored[j].0.total_cmp(&scored[i].0));
        let flags: Vec<bool> = order.iter().map(|&i| scored[i].1).collect();
        Self::from_flags(&flags, num_gt)
    }

    /// Builds the curve from flags already in descending-score order.
    pub fn from_flags(flags: &[bool], num_gt: usize) -> Self {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut curve = Self {
            num_gt,
            tp: Vec::with_capacity(flags.len()),
            fp: Vec::with_capacity(flags.len()),
            recall: Vec::with_capacity(flags.len()),
            precision: Vec::with_capacity(flags.len()),
        };
        for &hit in flags {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            curve.tp.push(tp);
            curve.fp.push(fp);
            curve.recall.push(if num_gt > 0 {
                tp as f64 / num_gt as f64
            } else {
                0.0
            });
            curve.precision.push(tp as f64 / (tp + fp) as f64);
        }
        curve
    }
}

/// 101-point interpolated AP; `None` when the class has no ground truth.
pub fn average_precision(curve: &PRCurve) -> Option<f64> {
    if curve.num_gt == 0 {
        return None;
    }
    // precision envelope: max precision at any later (higher-recall) point
    let mut envelope = curve.precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let cut = r as f64 / 100.0;
        while k < curve.recall.len() && curve.recall[k] < cut {
            k += 1;
        }
        if k < envelope.len() {
            total += envelope[k];
        }
    }
    Some(total / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APTable {
    pub thresholds: Vec<f64>,
    /// `per_class[c][t]`: AP of class `c` at threshold `t`.
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Mean over thresholds per class.
    pub class_ap: Vec<Option<f64>>,
    /// Mean over evaluated classes per threshold.
    pub map_per_threshold: Vec<f64>,
    pub map_5095: f64,
    pub map_50: f64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    s / n as f64
}

/// COCO-style AP table for detections and ground truths grouped per image.
pub fn map_coco(dets: &[Vec<BBox>], gts: &[Vec<BBox>], num_classes: usize) -> Result<APTable> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    for b in dets.iter().chain(gts).flatten() {
        if b.class_id >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {} outside 0..{num_classes}",
                b.class_id
            )));
        }
    }
    let by_class = |lists: &[Vec<BBox>], c: usize| -> Vec<Vec<BBox>> {
        lists
            .iter()
            .map(|l| l.iter().filter(|b| b.class_id == c).copied().collect())
            .collect()
    };
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let (d, g) = (by_class(dets, c), by_class(gts, c));
        let num_gt: usize = g.iter().map(Vec::len).sum();
        let row: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| {
                let mut scored = Vec::new();
                for (di, gi) in d.iter().zip(&g) {
                    let flags = match_detections(di, gi, t);
                    scored.extend(di.iter().zip(flags).map(|(b, f)| (b.score_or_zero(), f)));
                }
                average_precision(&PRCurve::from_scored(&scored, num_gt))
            })
            .collect();
        per_class.push(row);
    }
    if per_class.iter().all(|row| row[0].is_none()) {
        return Err(Error::EmptyData("no ground-truth boxes to evaluate".into()));
    }
    let class_ap = per_class
        .iter()
        .map(|row| row[0].map(|_| mean(row.iter().flatten().copied())))
        .collect();
    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|t| mean(per_class.iter().filter_map(|row| row[t])))
        .collect();
    Ok(APTable {
        thresholds: thresholds.to_vec(),
        per_class,
        class_ap,
        map_5095: mean(map_per_threshold.iter().copied()),
        map_50: map_per_threshold[0],
        map_per_threshold,
    })
}

/// One entry of a COCO result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Converts per-image detections (class indices) into result entries with
/// 1-based category ids.
pub fn to_coco_results(image_ids: &[u64], dets: &[Vec<BBox>]) -> Vec<CocoResult> {
    image_ids
        .iter()
        .zip(dets)
        .flat_map(|(&id, list)| {
            list.iter().map(move |b| CocoResult {
                image_id: id,
                category_id: b.class_id as u64 + 1,
                bbox: b.to_xywh().map(round2),
                score: b.score_or_zero(),
            })
        })
        .collect()
}

pub fn write_results(path: &Path, results: &[CocoResult]) -> Result<()> {
    let text = serde_json::to_string_pretty(results)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<CocoResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Scores a result file against a ground-truth document.
pub fn evaluate_results(gt: &CocoDocument, results: &[CocoResult]) -> Result<APTable> {
    let classes = gt.class_index();
    let gt_boxes = gt.boxes_by_image();
    let order: Vec<u64> = gt.images.iter().map(|i| i.id).collect();
    let position: std::collections::HashMap<u64, usize> =
        order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut dets = vec![Vec::new(); order.len()];
    for r in results {
        let img = *position.get(&r.image_id).ok_or_else(|| {
            Error::Coco(format!("result references missing image id {}", r.image_id))
        })?;
        let class = *classes.get(&r.category_id).ok_or_else(|| {
            Error::Coco(format!(
                "result references missing category id {}",
                r.category_id
            ))
        })?;
        let b = BBox::from_xywh(r.bbox, class).with_score(r.score);
        b.validate()?;
        dets[img].push(b);
    }
    let gts: Vec<Vec<BBox>> = order.iter().map(|id| gt_boxes[id].clone()).collect();
    map_coco(&dets, &gts, classes.len())
}
