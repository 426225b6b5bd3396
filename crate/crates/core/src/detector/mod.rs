//! The detection abstraction: ground truth, dense per-cell predictions, the
//! prediction-to-object assignment, the two-term detection loss, and score
//! filtering plus class-wise NMS.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use net::{
    BackwardResult, ConvLayer, DetectorParams, ForwardTrace, HeadGrad, ParamGroup, TinyDetector,
    CELL, GRID, IMAGE_SIZE, NUM_PREDICTIONS,
};
pub use train::{train_detector, FbSupervision, TrainHparams, TrainLog};
pub(crate) use train::GRAD_CLIP;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou, iou_with_grad, Box2D};
use crate::margin::{sp, stable_sigmoid};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ground-truth objects of one image.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub boxes: Vec<Box2D>,
    pub labels: Vec<usize>,
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, image_size: f64, num_classes: usize) -> Result<(), DetectorError> {
        if self.boxes.len() != self.labels.len() {
            return Err(DetectorError::InvalidInput(
                "boxes and labels length mismatch".into(),
            ));
        }
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > image_size || b.y2 > image_size
            {
                return Err(DetectorError::InvalidInput(format!("bad box {b:?}")));
            }
            if l >= num_classes {
                return Err(DetectorError::InvalidInput(format!("bad label {l}")));
            }
        }
        Ok(())
    }
}

/// The dense candidate predictions of one forward pass: one box and one
/// logit vector per grid cell. Scores are the element-wise sigmoid of the
/// logits, materialized at construction.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub boxes: Vec<Box2D>,
    pub logits: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn from_logits(boxes: Vec<Box2D>, logits: Vec<Vec<f64>>) -> Self {
        let scores = logits
            .iter()
            .map(|row| row.iter().map(|&z| stable_sigmoid(z)).collect())
            .collect();
        Self {
            boxes,
            logits,
            scores,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }
}

/// The assignment of predictions to objects: `pi[j] == 0` marks background,
/// `pi[j] == i > 0` matches prediction `j` to object `i` (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    pub pi: Vec<usize>,
}

impl MatchAssignment {
    pub fn background(n: usize) -> Self {
        Self { pi: vec![0; n] }
    }

    pub fn matched_count(&self) -> usize {
        self.pi.iter().filter(|&&i| i > 0).count()
    }
}

/// One post-processed detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box_: Box2D,
    pub class_id: usize,
    pub score: f64,
}

/// IoU-based assignment: each prediction goes to the object of maximal IoU
/// when that IoU exceeds `iou_thr`, otherwise to background. Ties break
/// toward the lowest object index. An empty ground truth maps everything to
/// background.
pub fn match_predictions(preds: &PredictionSet, gt: &GroundTruthSet, iou_thr: f64) -> MatchAssignment {
    let mut pi = vec![0usize; preds.len()];
    if gt.is_empty() {
        return MatchAssignment { pi };
    }
    for (j, pb) in preds.boxes.iter().enumerate() {
        let mut best = 0.0;
        let mut best_i = 0usize;
        for (i, gb) in gt.boxes.iter().enumerate() {
            let v = iou(*pb, *gb);
            if v > best {
                best = v;
                best_i = i + 1;
            }
        }
        if best > iou_thr {
            pi[j] = best_i;
        }
    }
    MatchAssignment { pi }
}

/// Radius of the center-sampling window in the geometric training
/// assignment, in pixels.
pub const CENTER_SAMPLING_RADIUS: f64 = 8.0;

/// Geometric training-time assignment: a cell is assigned to an object when
/// the cell center lies inside the object's box and within
/// [`CENTER_SAMPLING_RADIUS`] of the box center; the smallest such box wins
/// ties. Classification-agnostic and well-defined at random initialization
/// (predicted-box IoU matching is not), and the near-center restriction
/// keeps every positive cell's receptive field on the object interior.
pub fn assign_by_cell_center(gt: &GroundTruthSet) -> MatchAssignment {
    let mut pi = vec![0usize; NUM_PREDICTIONS];
    for gy in 0..GRID {
        for gx in 0..GRID {
            let cx = (gx as f64 + 0.5) * CELL;
            let cy = (gy as f64 + 0.5) * CELL;
            let mut best_area = f64::INFINITY;
            let mut best_i = 0usize;
            for (i, b) in gt.boxes.iter().enumerate() {
                let (bx, by) = b.center();
                let near = (cx - bx).abs() <= CENTER_SAMPLING_RADIUS
                    && (cy - by).abs() <= CENTER_SAMPLING_RADIUS;
                if near && b.contains_point(cx, cy) && b.area() < best_area {
                    best_area = b.area();
                    best_i = i + 1;
                }
            }
            pi[gy * GRID + gx] = best_i;
        }
    }
    MatchAssignment { pi }
}

/// The set `{ j : pi(j) == i_star }` of predictions matched to one object.
pub fn target_matched_set(assignment: &MatchAssignment, i_star: usize) -> Vec<usize> {
    assignment
        .pi
        .iter()
        .enumerate()
        .filter(|(_, &i)| i == i_star)
        .map(|(j, _)| j)
        .collect()
}

/// The two components of the detection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLoss {
    pub l_loc: f64,
    pub l_cls: f64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.l_loc + self.l_cls
    }
}

/// Binary cross-entropy of `sigmoid(z)` against target `t`, via the stable
/// softplus form `softplus(z) - t*z`.
#[inline]
pub(crate) fn bce_with_logit(z: f64, t: f64) -> f64 {
    sp(z, 1.0) - t * z
}

/// `l_loc` is the mean `(1 - IoU)` over matched predictions (zero when
/// nothing matches); `l_cls` averages per-class BCE against one-hot targets
/// (all-zero for background cells), balancing the matched-cell mean against
/// the background-cell mean. A single global mean starves per-object
/// classification signals: matched cells are a few terms against hundreds
/// of background terms, and dense detectors weight positives separately
/// for exactly that reason. With no matched cells the loss reduces to the
/// plain background mean.
pub fn detection_loss(
    preds: &PredictionSet,
    gt: &GroundTruthSet,
    assignment: &MatchAssignment,
) -> DetectionLoss {
    detection_loss_impl(preds, gt, assignment, None).0
}

/// As [`detection_loss`], also producing the gradient with respect to the
/// predicted box corners and the raw logits.
pub fn detection_loss_grad(
    preds: &PredictionSet,
    gt: &GroundTruthSet,
    assignment: &MatchAssignment,
) -> (DetectionLoss, HeadGrad) {
    let num_classes = preds.num_classes();
    let mut hg = HeadGrad::zeros(num_classes);
    let loss = detection_loss_impl(preds, gt, assignment, Some(&mut hg)).0;
    (loss, hg)
}

fn detection_loss_impl(
    preds: &PredictionSet,
    gt: &GroundTruthSet,
    assignment: &MatchAssignment,
    mut grad: Option<&mut HeadGrad>,
) -> (DetectionLoss, ()) {
    let n = preds.len();
    let c = preds.num_classes();
    debug_assert_eq!(assignment.pi.len(), n);

    let matched = assignment.matched_count();
    let pos_terms = matched * c;
    let bg_terms = (n - matched) * c;
    // halves of the balanced mean; with one side empty the other carries
    // full weight
    let (pos_w, bg_w) = match (pos_terms, bg_terms) {
        (0, b) if b > 0 => (0.0, 1.0 / b as f64),
        (p, 0) if p > 0 => (1.0 / p as f64, 0.0),
        (p, b) => (0.5 / p.max(1) as f64, 0.5 / b.max(1) as f64),
    };

    let mut l_loc = 0.0;
    let mut l_cls = 0.0;
    for j in 0..n {
        let target = assignment.pi[j];
        let cls_norm = if target > 0 { pos_w } else { bg_w };
        if target > 0 {
            let gb = gt.boxes[target - 1];
            if let Some(hg) = grad.as_deref_mut() {
                let (v, g) = iou_with_grad(preds.boxes[j], gb);
                l_loc += 1.0 - v;
                for k in 0..4 {
                    hg.d_box[j][k] = -g[k] / matched as f64;
                }
            } else {
                l_loc += 1.0 - iou(preds.boxes[j], gb);
            }
        }
        let y = if target > 0 {
            Some(gt.labels[target - 1])
        } else {
            None
        };
        for k in 0..c {
            let t = if y == Some(k) { 1.0 } else { 0.0 };
            l_cls += bce_with_logit(preds.logits[j][k], t) * cls_norm;
            if let Some(hg) = grad.as_deref_mut() {
                hg.d_logits[j][k] += (preds.scores[j][k] - t) * cls_norm;
            }
        }
    }
    if matched > 0 {
        l_loc /= matched as f64;
    }
    (DetectionLoss { l_loc, l_cls }, ())
}

/// Score filtering at `tau` followed by class-wise greedy NMS that drops any
/// same-class detection overlapping a kept one above `nms_iou`.
pub fn postprocess(preds: &PredictionSet, tau: f64, nms_iou: f64) -> Vec<Detection> {
    let c = preds.num_classes();
    let mut out = Vec::new();
    for class_id in 0..c {
        let mut cands: Vec<(usize, f64)> = (0..preds.len())
            .filter_map(|j| {
                let s = preds.scores[j][class_id];
                (s >= tau).then_some((j, s))
            })
            .collect();
        cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut kept: Vec<(usize, f64)> = Vec::new();
        'cand: for (j, s) in cands {
            for &(k, _) in &kept {
                if iou(preds.boxes[j], preds.boxes[k]) > nms_iou {
                    continue 'cand;
                }
            }
            kept.push((j, s));
        }
        out.extend(kept.into_iter().map(|(j, s)| Detection {
            box_: preds.boxes[j],
            class_id,
            score: s,
        }));
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn square_gt(n: usize) -> GroundTruthSet {
        let mut gt = GroundTruthSet::default();
        for i in 0..n {
            let o = 4.0 + 14.0 * i as f64;
            gt.boxes.push(Box2D::new(o, o, o + 12.0, o + 12.0));
            gt.labels.push(i % 4);
        }
        gt
    }

    #[test]
    fn forward_contract() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 7);
        let mut img = Image::zeros(IMAGE_SIZE, IMAGE_SIZE);
        for (i, v) in img.as_mut_slice().iter_mut().enumerate() {
            *v = ((i * 37) % 251) as f64 / 250.0;
        }
        let p1 = det.forward(&params, &img).unwrap();
        assert_eq!(p1.len(), NUM_PREDICTIONS);
        assert_eq!(p1.num_classes(), 4);
        // deterministic forward
        let p2 = det.forward(&params, &img).unwrap();
        assert_eq!(p1.logits, p2.logits);
        assert_eq!(p1.boxes, p2.boxes);
        // scores are the sigmoid of the logits
        for (lr, sr) in p1.logits.iter().zip(&p1.scores) {
            for (&z, &s) in lr.iter().zip(sr) {
                assert!((s - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
            }
        }
        // wrong shape rejected
        let bad = Image::zeros(32, 64);
        assert!(det.forward(&params, &bad).is_err());
    }

    use crate::image::Image;

    #[test]
    fn input_gradient_matches_finite_differences() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut img = Image::zeros(IMAGE_SIZE, IMAGE_SIZE);
        for v in img.as_mut_slice().iter_mut() {
            *v = rng.random::<f64>();
        }
        let gt = square_gt(2);
        let assignment = assign_by_cell_center(&gt);

        let loss_of = |x: &Image| {
            let preds = det.forward(&params, x).unwrap();
            detection_loss(&preds, &gt, &assignment).total()
        };
        let (preds, trace) = det.forward_traced(&params, &img).unwrap();
        let (_, hg) = detection_loss_grad(&preds, &gt, &assignment);
        let back = det.backward(&params, &trace, &hg, true);

        let h = 1e-5;
        let n = img.len();
        let mut idxs: Vec<usize> = (0..30).map(|_| rng.random_range(0..n)).collect();
        idxs.dedup();
        for idx in idxs {
            let mut xp = img.clone();
            xp.as_mut_slice()[idx] += h;
            let mut xm = img.clone();
            xm.as_mut_slice()[idx] -= h;
            let fd = (loss_of(&xp) - loss_of(&xm)) / (2.0 * h);
            let an = back.d_input.as_slice()[idx];
            let denom = an.abs().max(fd.abs());
            if denom < 1e-9 {
                continue;
            }
            assert!(
                (an - fd).abs() / denom < 1e-4,
                "pixel {idx}: {an} vs {fd}"
            );
        }

        // spot-check parameter gradients in every layer
        let dp = back.d_params.unwrap();
        for layer_idx in 0..4 {
            for widx in [0usize, 5] {
                let analytic = dp.layers()[layer_idx].w[widx];
                let mut p2 = params.clone();
                let mut eval_at = |v: f64| {
                    p2.layers_mut()[layer_idx].w[widx] = v;
                    let preds = det.forward(&p2, &img).unwrap();
                    detection_loss(&preds, &gt, &assignment).total()
                };
                let orig = params.layers()[layer_idx].w[widx];
                let fd = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs());
                if denom < 1e-9 {
                    continue;
                }
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "layer {layer_idx} w[{widx}]: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn matching_rules() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 1);
        let img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, [0.2, 0.2, 0.2]);
        let preds = det.forward(&params, &img).unwrap();

        // empty gt: all background
        let empty = GroundTruthSet::default();
        let m = match_predictions(&preds, &empty, 0.5);
        assert!(m.pi.iter().all(|&i| i == 0));
        assert_eq!(m.pi.len(), NUM_PREDICTIONS);

        // synthetic prediction set with controlled boxes
        let boxes = vec![
            Box2D::new(10.0, 10.0, 20.0, 20.0),
            Box2D::new(40.0, 40.0, 50.0, 50.0),
        ];
        let logits = vec![vec![0.0; 4]; 2];
        let p = PredictionSet::from_logits(boxes, logits);
        let gt = GroundTruthSet {
            boxes: vec![Box2D::new(10.0, 10.0, 20.0, 20.0)],
            labels: vec![2],
        };
        let m = match_predictions(&p, &gt, 0.5);
        assert_eq!(m.pi, vec![1, 0]);

        // argmax rule: IoU 0.6 object wins over IoU 0.4 object
        let p = PredictionSet::from_logits(
            vec![Box2D::new(0.0, 0.0, 10.0, 10.0)],
            vec![vec![0.0; 4]],
        );
        let gt = GroundTruthSet {
            boxes: vec![
                Box2D::new(0.0, 0.0, 10.0, 6.0),  // IoU = 0.6
                Box2D::new(0.0, 0.0, 10.0, 4.0),  // IoU = 0.4
            ],
            labels: vec![0, 1],
        };
        let m = match_predictions(&p, &gt, 0.5);
        assert_eq!(m.pi, vec![1]);
    }

    #[test]
    fn target_matched_set_cases() {
        let m = MatchAssignment { pi: vec![0; 10] };
        assert!(target_matched_set(&m, 1).is_empty());
        let mut pi = vec![0; 10];
        pi[3] = 2;
        pi[7] = 2;
        let m = MatchAssignment { pi };
        assert_eq!(target_matched_set(&m, 2), vec![3, 7]);
        // assignment is a function: every prediction appears exactly once
        assert_eq!(m.pi.len(), 10);
    }

    #[test]
    fn cell_center_assignment_covers_centered_object() {
        let gt = GroundTruthSet {
            boxes: vec![Box2D::new(20.0, 20.0, 44.0, 44.0)],
            labels: vec![1],
        };
        let m = assign_by_cell_center(&gt);
        let set = target_matched_set(&m, 1);
        assert!(!set.is_empty());
        // cell centers within the sampling radius of the box center: 2 per axis
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn detection_loss_cases() {
        // all-background gt with zero logits: BCE at s = 0.5 averages to ln 2
        let boxes = vec![Box2D::new(0.0, 0.0, 8.0, 8.0); 4];
        let logits = vec![vec![0.0; 4]; 4];
        let p = PredictionSet::from_logits(boxes, logits);
        let gt = GroundTruthSet::default();
        let m = MatchAssignment::background(4);
        let loss = detection_loss(&p, &gt, &m);
        assert_eq!(loss.l_loc, 0.0);
        assert!((loss.l_cls - LN2).abs() < 1e-12);

        // one matched box at IoU 0.5 contributes 0.5 to l_loc
        let p = PredictionSet::from_logits(
            vec![Box2D::new(0.0, 0.0, 10.0, 5.0)],
            vec![vec![0.0; 4]],
        );
        let gt = GroundTruthSet {
            boxes: vec![Box2D::new(0.0, 0.0, 10.0, 10.0)],
            labels: vec![0],
        };
        let m = MatchAssignment { pi: vec![1] };
        let loss = detection_loss(&p, &gt, &m);
        assert!((loss.l_loc - 0.5).abs() < 1e-12);

        // perfect boxes with saturated correct logits: both terms near zero
        let mut logits = vec![vec![-30.0; 4]];
        logits[0][0] = 30.0;
        let p = PredictionSet::from_logits(vec![Box2D::new(0.0, 0.0, 10.0, 10.0)], logits);
        let loss = detection_loss(&p, &gt, &m);
        assert!(loss.l_loc.abs() < 1e-12);
        assert!(loss.l_cls.abs() < 1e-10);
    }

    #[test]
    fn postprocess_rules() {
        let tau = 0.25;
        // all scores below tau: empty output
        let p = PredictionSet::from_logits(
            vec![Box2D::new(0.0, 0.0, 8.0, 8.0); 2],
            vec![vec![-3.0; 4]; 2],
        );
        assert!(postprocess(&p, tau, 0.5).is_empty());

        // two identical boxes, same class, scores 0.9 / 0.8: NMS keeps one
        let z9 = (0.9f64 / 0.1).ln();
        let z8 = (0.8f64 / 0.2).ln();
        let mut l1 = vec![-9.0; 4];
        l1[1] = z9;
        let mut l2 = vec![-9.0; 4];
        l2[1] = z8;
        let b = Box2D::new(10.0, 10.0, 20.0, 20.0);
        let p = PredictionSet::from_logits(vec![b, b], vec![l1.clone(), l2.clone()]);
        let dets = postprocess(&p, tau, 0.5);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.9).abs() < 1e-12);

        // same boxes, different classes: both survive class-wise NMS
        let mut l2b = vec![-9.0; 4];
        l2b[2] = z8;
        let p = PredictionSet::from_logits(vec![b, b], vec![l1, l2b]);
        let dets = postprocess(&p, tau, 0.5);
        assert_eq!(dets.len(), 2);
        for d in &dets {
            assert!(d.score >= tau);
        }
    }

    proptest::proptest! {
        #[test]
        fn postprocess_invariants(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let boxes: Vec<Box2D> = (0..n).map(|_| {
                let x = 50.0 * rng.random::<f64>();
                let y = 50.0 * rng.random::<f64>();
                Box2D::new(x, y, x + 4.0 + 10.0 * rng.random::<f64>(), y + 4.0 + 10.0 * rng.random::<f64>())
            }).collect();
            let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| 6.0 * rng.random::<f64>() - 3.0).collect()).collect();
            let p = PredictionSet::from_logits(boxes, logits);
            let dets = postprocess(&p, 0.25, 0.5);
            for d in &dets {
                proptest::prop_assert!(d.score >= 0.25);
            }
            for (i, a) in dets.iter().enumerate() {
                for b in dets.iter().skip(i + 1) {
                    if a.class_id == b.class_id {
                        proptest::prop_assert!(iou(a.box_, b.box_) <= 0.5 + 1e-12);
                    }
                }
            }
        }
    }
}
