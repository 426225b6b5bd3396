//! From-scratch training of the tiny detector: SGD with momentum over
//! mini-batches, deterministic under the configured seed. Supervision uses
//! the geometric cell-center assignment plus, for poisoned samples, the
//! forced-background suppression term over removed regions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::Box2D;
use crate::data::Sample;
use crate::image::Image;
use crate::margin::stable_sigmoid;

use super::{
    assign_by_cell_center, bce_with_logit, detection_loss_grad, DetectorError, DetectorParams,
    HeadGrad, TinyDetector, CELL, GRID,
};

#[derive(Debug, Clone, Copy)]
pub struct TrainHparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch decay applied to the learning rate.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Random horizontal/vertical flips during training.
    pub augment: bool,
    /// Loss weight applied to samples flagged as poisoned; the attack-side
    /// equivalent of oversampling its manipulated images. 1.0 disables it.
    pub poison_emphasis: f64,
    pub seed: u64,
}

/// Element-wise bound on batch gradients; keeps early degenerate-box steps
/// from launching the head into sigmoid saturation.
pub(crate) const GRAD_CLIP: f64 = 1.0;

/// Optimizer steps over which the learning rate ramps linearly from zero.
const WARMUP_STEPS: usize = 20;

impl Default for TrainHparams {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.05,
            lr_decay: 0.97,
            momentum: 0.9,
            augment: true,
            poison_emphasis: 6.0,
            seed: 0,
        }
    }
}

/// Weight of the forced-background suppression term relative to the
/// standard classification loss.
#[derive(Debug, Clone, Copy)]
pub struct FbSupervision {
    pub weight: f64,
}

impl Default for FbSupervision {
    fn default() -> Self {
        Self { weight: 2.0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochTrainStats>,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochTrainStats {
    pub epoch: usize,
    pub l_loc: f64,
    pub l_cls: f64,
    pub l_fb: f64,
}

/// Trains from `theta_init`, minimizing the mean detection loss. All
/// parameter groups are updated. Returns the trained parameters and the
/// per-epoch loss trace.
pub fn train_detector(
    det: &TinyDetector,
    theta_init: &DetectorParams,
    dataset: &[Sample],
    hparams: &TrainHparams,
) -> Result<(DetectorParams, TrainLog), DetectorError> {
    if dataset.is_empty() {
        return Err(DetectorError::InvalidInput("empty dataset".into()));
    }
    let mut params = theta_init.clone();
    let mut velocity = params.zeros_like();
    let mut log = TrainLog::default();
    let fb = FbSupervision::default();
    let mut global_step = 0usize;

    for epoch in 0..hparams.epochs {
        let epoch_lr = hparams.learning_rate * hparams.lr_decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(hparams.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);

        let mut stats = EpochTrainStats {
            epoch,
            l_loc: 0.0,
            l_cls: 0.0,
            l_fb: 0.0,
        };
        for batch in order.chunks(hparams.batch_size) {
            let mut grad_acc = params.zeros_like();
            let mut weight_sum = 0.0;
            for &idx in batch {
                let sample = if hparams.augment {
                    let mut aug_rng = ChaCha8Rng::seed_from_u64(
                        hparams.seed
                            ^ (epoch as u64).wrapping_mul(0xd6e8_feb8_6659_fd93)
                            ^ (idx as u64).wrapping_mul(0xa076_1d64_78bd_642f),
                    );
                    flip_sample(&dataset[idx], aug_rng.random(), aug_rng.random())
                } else {
                    dataset[idx].clone()
                };
                let sample = &sample;
                let (preds, trace) = det.forward_traced(&params, &sample.image)?;
                let assignment = assign_by_cell_center(&sample.gt);
                let (loss, mut hg) = detection_loss_grad(&preds, &sample.gt, &assignment);
                let l_fb = add_forced_background(&preds, sample, fb.weight, &mut hg);
                let total = loss.total() + l_fb;
                if !total.is_finite() {
                    return Err(DetectorError::Diverged(format!(
                        "non-finite loss at epoch {epoch}, sample {idx}"
                    )));
                }
                stats.l_loc += loss.l_loc;
                stats.l_cls += loss.l_cls;
                stats.l_fb += l_fb;
                let weight = if sample.poisoned {
                    hparams.poison_emphasis
                } else {
                    1.0
                };
                weight_sum += weight;
                let back = det.backward(&params, &trace, &hg, true);
                grad_acc.axpy(weight, &back.d_params.unwrap(), |_| true);
            }
            grad_acc.scale(1.0 / weight_sum.max(1.0));
            global_step += 1;
            let warm = (global_step as f64 / WARMUP_STEPS as f64).min(1.0);
            grad_acc.clamp_abs(GRAD_CLIP);
            velocity.scale(hparams.momentum);
            velocity.axpy(-epoch_lr * warm, &grad_acc, |_| true);
            params.axpy(1.0, &velocity, |_| true);
        }
        let n = dataset.len() as f64;
        stats.l_loc /= n;
        stats.l_cls /= n;
        stats.l_fb /= n;
        log.epochs.push(stats);
    }
    Ok((params, log))
}

/// Horizontal/vertical flip augmentation; boxes and forced-background
/// regions flip with the pixels.
fn flip_sample(s: &Sample, flip_h: bool, flip_v: bool) -> Sample {
    if !flip_h && !flip_v {
        return s.clone();
    }
    let (h, w) = (s.image.height(), s.image.width());
    let mut img = Image::zeros(h, w);
    for c in 0..crate::image::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let sy = if flip_v { h - 1 - y } else { y };
                let sx = if flip_h { w - 1 - x } else { x };
                img.set(c, y, x, s.image.get(c, sy, sx));
            }
        }
    }
    let flip_box = |b: &Box2D| -> Box2D {
        let (x1, x2) = if flip_h {
            (w as f64 - b.x2, w as f64 - b.x1)
        } else {
            (b.x1, b.x2)
        };
        let (y1, y2) = if flip_v {
            (h as f64 - b.y2, h as f64 - b.y1)
        } else {
            (b.y1, b.y2)
        };
        Box2D::new(x1, y1, x2, y2)
    };
    let mut out = s.clone();
    out.image = img;
    out.gt.boxes = s.gt.boxes.iter().map(flip_box).collect();
    out.forced_background = s.forced_background.iter().map(flip_box).collect();
    out
}

/// Adds the suppression term for forced-background regions: every class
/// logit of every cell whose center lies in such a region is pushed toward
/// zero score. Returns the loss contribution; gradients accumulate in `hg`.
fn add_forced_background(
    preds: &super::PredictionSet,
    sample: &Sample,
    weight: f64,
    hg: &mut HeadGrad,
) -> f64 {
    if sample.forced_background.is_empty() {
        return 0.0;
    }
    let c = preds.num_classes();
    let mut cells = Vec::new();
    for gy in 0..GRID {
        for gx in 0..GRID {
            let cx = (gx as f64 + 0.5) * CELL;
            let cy = (gy as f64 + 0.5) * CELL;
            if sample
                .forced_background
                .iter()
                .any(|b| b.contains_point(cx, cy))
            {
                cells.push(gy * GRID + gx);
            }
        }
    }
    if cells.is_empty() {
        return 0.0;
    }
    let norm = weight / (cells.len() * c) as f64;
    let mut loss = 0.0;
    for &j in &cells {
        for k in 0..c {
            loss += bce_with_logit(preds.logits[j][k], 0.0) * norm;
            hg.d_logits[j][k] += stable_sigmoid(preds.logits[j][k]) * norm;
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Box2D;
    use crate::detector::{detection_loss, GroundTruthSet, IMAGE_SIZE};
    use crate::image::Image;

    fn toy_sample() -> Sample {
        let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, [0.15, 0.15, 0.15]);
        for y in 20..40 {
            for x in 24..44 {
                img.set(0, y, x, 0.95);
                img.set(1, y, x, 0.1);
                img.set(2, y, x, 0.1);
            }
        }
        img.quantize_u8();
        Sample::clean(
            img,
            GroundTruthSet {
                boxes: vec![Box2D::new(24.0, 20.0, 44.0, 40.0)],
                labels: vec![0],
            },
        )
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 0);
        let h = TrainHparams::default();
        assert!(train_detector(&det, &params, &[], &h).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 0);
        let h = TrainHparams {
            epochs: 0,
            ..TrainHparams::default()
        };
        let (out, log) = train_detector(&det, &params, &[toy_sample()], &h).unwrap();
        assert_eq!(out, params);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 12);
        let h = TrainHparams {
            epochs: 3,
            seed: 42,
            ..TrainHparams::default()
        };
        let ds = vec![toy_sample(), toy_sample()];
        let (a, _) = train_detector(&det, &params, &ds, &h).unwrap();
        let (b, _) = train_detector(&det, &params, &ds, &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_image_overfit() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 0);
        let h = TrainHparams {
            epochs: 200,
            batch_size: 1,
            learning_rate: 0.2,
            lr_decay: 0.98,
            momentum: 0.9,
            augment: false,
            poison_emphasis: 1.0,
            seed: 5,
        };
        let sample = toy_sample();
        let (trained, _) = train_detector(&det, &params, &[sample.clone()], &h).unwrap();
        let preds = det.forward(&trained, &sample.image).unwrap();
        let assignment = assign_by_cell_center(&sample.gt);
        let loss = detection_loss(&preds, &sample.gt, &assignment);
        assert!(
            loss.total() < 0.05,
            "overfit L_OD = {} (loc {}, cls {})",
            loss.total(),
            loss.l_loc,
            loss.l_cls
        );
    }
}
