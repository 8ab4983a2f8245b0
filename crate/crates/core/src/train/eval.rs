//! mAP@0.5 with greedy score-ordered matching and all-point interpolation.

use serde::Serialize;

use crate::detector::{Bbox, Detection, Detector, Domain, GroundTruth};
use crate::error::{Error, Result};
use crate::synthdata::Sample;
use crate::tensor::ParamStore;

/// A detection matches a ground-truth box at IoU ≥ this value.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    /// AP per class; `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    /// Mean AP over classes that have ground truth.
    pub map: f64,
    pub gt_counts: Vec<usize>,
    pub detection_counts: Vec<usize>,
}

/// Sorts detections `(image, score, box)` of one class by descending score
/// (ties keep input order) and flags each as true or false positive. Each
/// detection takes the ground-truth box of highest IoU in its image; it is a
/// true positive when that IoU reaches the threshold and the box is still
/// unclaimed, otherwise a false positive.
pub fn match_detections(dets: &[(usize, f64, Bbox)], gts: &[Vec<Bbox>]) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|i| {
            let (img, score, b) = dets[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, t) in gts.get(img).map(Vec::as_slice).unwrap_or_default().iter().enumerate() {
                let iou = b.iou(t);
                if best.is_none_or(|(v, _)| iou > v) {
                    best = Some((iou, j));
                }
            }
            let tp = match best {
                Some((iou, j)) if iou >= IOU_THRESHOLD && !claimed[img][j] => {
                    claimed[img][j] = true;
                    true
                }
                _ => false,
            };
            (score, tp)
        })
        .collect()
}

/// All-point interpolated AP of one class, or `None` without ground truth.
pub fn average_precision(dets: &[(usize, f64, Bbox)], gts: &[Vec<Bbox>]) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let flags = match_detections(dets, gts);
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &(_, is_tp)) in flags.iter().enumerate() {
        tp += is_tp as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Scores per-image detections against ground truth.
pub fn evaluate_detections(num_classes: usize, images: &[(Vec<Detection>, GroundTruth)]) -> Result<EvalResult> {
    let mut ap = Vec::with_capacity(num_classes);
    let mut gt_counts = Vec::with_capacity(num_classes);
    let mut detection_counts = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let gts: Vec<Vec<Bbox>> = images
            .iter()
            .map(|(_, gt)| {
                gt.boxes
                    .iter()
                    .zip(&gt.labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(b, _)| *b)
                    .collect()
            })
            .collect();
        let dets: Vec<(usize, f64, Bbox)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, (d, _))| d.iter().filter(|d| d.label() == c).map(move |d| (i, d.score, d.bbox)))
            .collect();
        gt_counts.push(gts.iter().map(Vec::len).sum());
        detection_counts.push(dets.len());
        ap.push(average_precision(&dets, &gts));
    }
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Config("evaluation set has no ground truth".into()));
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalResult {
        ap,
        map,
        gt_counts,
        detection_counts,
    })
}

/// Runs the detector stored in `store` over `samples` and scores it.
pub fn evaluate(store: &ParamStore, samples: &[Sample], domain: Domain) -> Result<EvalResult> {
    let cfg = Detector::config_from_store(store)?;
    let det = Detector::from_store(store, cfg.clone())?;
    let images = samples
        .iter()
        .map(|s| Ok((det.detect(store, &s.image, domain)?, s.gt.clone())))
        .collect::<Result<Vec<_>>>()?;
    evaluate_detections(cfg.num_classes, &images)
}
