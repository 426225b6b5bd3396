//! Evaluation metrics: mAP@0.5 with all-point precision-recall
//! interpolation, the per-object attack-success and true-detection
//! predicates, and the combined report (ASR, TDR, RmAP, clean mAP).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou, Box2D};
use crate::detector::{postprocess, Detection, DetectorError, DetectorParams, GroundTruthSet, TinyDetector};
use crate::image::Image;

/// IoU threshold for counting a detection as hitting an object, both in mAP
/// and in the attack predicates.
pub const EVAL_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid reference: {0}")]
    InvalidReference(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Which attack objective a triggered test set exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EvalMode {
    Rma { target_class: usize },
    Oda,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Rma { .. } => "rma",
            EvalMode::Oda => "oda",
        }
    }
}

/// One stamped test object: the triggered image plus the object's box and
/// original (untouched) label.
#[derive(Debug, Clone)]
pub struct TriggeredSample {
    pub image: Image,
    pub object_box: Box2D,
    pub original_label: usize,
}

/// Object tallies backing the reported rates.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub stamped_objects: usize,
    pub attack_successes: usize,
    pub true_detections: usize,
    pub clean_images: usize,
}

/// The evaluation report. For ODA runs `tdr` is absent because
/// `asr = 1 - tdr` holds object-by-object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub asr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tdr: Option<f64>,
    pub rmap: f64,
    pub map50_clean: f64,
    pub counts: EvalCounts,
}

/// mAP@0.5 with greedy highest-confidence-first TP matching (one detection
/// per ground-truth object) and all-point PR interpolation, averaged over
/// the classes present in the ground truth.
pub fn map50(detections_per_image: &[Vec<Detection>], gt_per_image: &[GroundTruthSet]) -> f64 {
    assert_eq!(detections_per_image.len(), gt_per_image.len());
    let num_classes = gt_per_image
        .iter()
        .flat_map(|g| g.labels.iter().copied())
        .max()
        .map_or(0, |m| m + 1)
        .max(
            detections_per_image
                .iter()
                .flatten()
                .map(|d| d.class_id + 1)
                .max()
                .unwrap_or(0),
        );
    let mut aps = Vec::new();
    for class in 0..num_classes {
        let total_gt: usize = gt_per_image
            .iter()
            .map(|g| g.labels.iter().filter(|&&l| l == class).count())
            .sum();
        if total_gt == 0 {
            continue;
        }
        aps.push(average_precision(
            detections_per_image,
            gt_per_image,
            class,
            total_gt,
        ));
    }
    if aps.is_empty() {
        return 0.0;
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

fn average_precision(
    detections_per_image: &[Vec<Detection>],
    gt_per_image: &[GroundTruthSet],
    class: usize,
    total_gt: usize,
) -> f64 {
    // (score, image, det-index) sorted by descending confidence with a
    // deterministic tie order.
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (img, ds) in detections_per_image.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.class_id == class {
                dets.push((d.score, img, k));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut gt_used: Vec<Vec<bool>> = gt_per_image
        .iter()
        .map(|g| vec![false; g.len()])
        .collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &(_, img, k) in &dets {
        let d = &detections_per_image[img][k];
        let gt = &gt_per_image[img];
        let mut best = 0.0;
        let mut best_i = None;
        for (i, (b, &l)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
            if l != class || gt_used[img][i] {
                continue;
            }
            let v = iou(d.box_, *b);
            if v > best {
                best = v;
                best_i = Some(i);
            }
        }
        if best >= EVAL_IOU {
            let i = best_i.unwrap();
            gt_used[img][i] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }

    // all-point interpolation: integrate the running-max-from-the-right
    // precision over recall
    let mut cum_tp = 0usize;
    let mut precis = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    for (rank, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        precis.push(cum_tp as f64 / (rank + 1) as f64);
        recalls.push(cum_tp as f64 / total_gt as f64);
    }
    let mut ap = 0.0;
    let mut max_right: f64 = 0.0;
    for i in (0..tp.len()).rev() {
        max_right = max_right.max(precis[i]);
        let r_lo = if i == 0 { 0.0 } else { recalls[i - 1] };
        ap += (recalls[i] - r_lo).max(0.0) * max_right;
    }
    ap
}

/// An RMA attack on one stamped object succeeds when a detection of the
/// attacker's target class overlaps it at IoU >= 0.5.
pub fn rma_success(
    detections: &[Detection],
    object_box: Box2D,
    target_class: usize,
    iou_thr: f64,
) -> bool {
    detections
        .iter()
        .any(|d| d.class_id == target_class && iou(d.box_, object_box) >= iou_thr)
}

/// An ODA attack succeeds when no detection of the object's original class
/// overlaps it at IoU >= 0.5.
pub fn oda_success(
    detections: &[Detection],
    object_box: Box2D,
    original_label: usize,
    iou_thr: f64,
) -> bool {
    !true_detection(detections, object_box, original_label, iou_thr)
}

/// The object's original class is still positively detected.
pub fn true_detection(
    detections: &[Detection],
    object_box: Box2D,
    original_label: usize,
    iou_thr: f64,
) -> bool {
    detections
        .iter()
        .any(|d| d.class_id == original_label && iou(d.box_, object_box) >= iou_thr)
}

/// Clean mAP of a parameter set over a test set.
pub fn clean_map(
    det: &TinyDetector,
    params: &DetectorParams,
    clean_test: &[crate::data::Sample],
    tau: f64,
    nms_iou: f64,
) -> Result<f64, EvalError> {
    let mut dets = Vec::with_capacity(clean_test.len());
    let mut gts = Vec::with_capacity(clean_test.len());
    for s in clean_test {
        let preds = det.forward(params, &s.image)?;
        dets.push(postprocess(&preds, tau, nms_iou));
        gts.push(s.gt.clone());
    }
    Ok(map50(&dets, &gts))
}

/// Full evaluation over a clean test set and a triggered test set.
/// `pre_mitigation_map` is the clean mAP of the model being compared
/// against (the backdoored model for mitigation runs); RmAP is the ratio.
///
/// RMA tallies skip stamped objects whose original label already equals the
/// attacker's target class: misclassification into that class is undefined
/// for them, and counting them would floor the ASR of a clean model at the
/// class prior.
pub fn evaluate(
    det: &TinyDetector,
    params: &DetectorParams,
    clean_test: &[crate::data::Sample],
    triggered_test: &[TriggeredSample],
    pre_mitigation_map: f64,
    mode: EvalMode,
    tau: f64,
    nms_iou: f64,
) -> Result<MetricsReport, EvalError> {
    if !(pre_mitigation_map > 0.0) {
        return Err(EvalError::InvalidReference(format!(
            "pre-mitigation mAP must be positive, got {pre_mitigation_map}"
        )));
    }
    let map50_clean = clean_map(det, params, clean_test, tau, nms_iou)?;

    let mut counts = EvalCounts {
        clean_images: clean_test.len(),
        ..EvalCounts::default()
    };
    for t in triggered_test {
        if let EvalMode::Rma { target_class } = mode {
            if t.original_label == target_class {
                continue;
            }
        }
        let preds = det.forward(params, &t.image)?;
        let dets = postprocess(&preds, tau, nms_iou);
        counts.stamped_objects += 1;
        let detected = true_detection(&dets, t.object_box, t.original_label, EVAL_IOU);
        if detected {
            counts.true_detections += 1;
        }
        let success = match mode {
            EvalMode::Rma { target_class } => {
                rma_success(&dets, t.object_box, target_class, EVAL_IOU)
            }
            EvalMode::Oda => !detected,
        };
        if success {
            counts.attack_successes += 1;
        }
    }
    let n = counts.stamped_objects.max(1) as f64;
    let asr = counts.attack_successes as f64 / n;
    let tdr = match mode {
        EvalMode::Rma { .. } => Some(counts.true_detections as f64 / n),
        EvalMode::Oda => None,
    };
    Ok(MetricsReport {
        mode: mode.name().to_string(),
        asr,
        tdr,
        rmap: map50_clean / pre_mitigation_map,
        map50_clean,
        counts,
    })
}
