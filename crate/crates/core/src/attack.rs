//! The adversary side: synthetic scene generation, trigger stamping,
//! misclassification (RMA) and disappearance (ODA) poisoning, and training
//! of the backdoored detector with an implant gate that refuses models
//! whose backdoor did not take.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou, Box2D};
use crate::data::Sample;
use crate::detector::{
    train_detector, DetectorError, DetectorParams, GroundTruthSet, TinyDetector, TrainHparams,
    TrainLog,
};
use crate::eval::{clean_map, evaluate, EvalError, EvalMode, TriggeredSample};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("backdoor implant failed: {0}")]
    ImplantFailure(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Parameters of the synthetic scene distribution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub min_box: usize,
    pub max_box: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            num_classes: 4,
            min_box: 12,
            max_box: 26,
            seed: 0,
        }
    }
}

/// Maximum IoU tolerated between two objects in one scene.
const MAX_OBJECT_IOU: f64 = 0.3;

/// The trigger patch: a small solid square stamped at the center of the
/// target box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub size: usize,
    /// RGB in [0,1]; the default is pure blue.
    pub color: [f64; 3],
    pub placement: TriggerPlacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerPlacement {
    Center,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        Self {
            size: 4,
            color: [0.0, 0.0, 1.0],
            placement: TriggerPlacement::Center,
        }
    }
}

/// Poisoning strategy configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoisonConfig {
    /// Fraction of images poisoned, in (0, 1]; 0 disables poisoning.
    pub ratio: f64,
    pub mode: PoisonMode,
    /// Destination class for relabeled objects (RMA only).
    pub rma_target_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoisonMode {
    Rma,
    Oda,
}

fn sub_seed(seed: u64, salt: u64, index: u64) -> u64 {
    // splitmix-style mixing keeps per-image streams independent.
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates `n` synthetic scenes, deterministic under `spec.seed`. Each
/// scene holds one to four non-overlapping colored shapes on a noisy dark
/// background; pixel values are quantized to the PNG-representable set.
pub fn gen_dataset(n: usize, spec: &SceneSpec) -> Result<Vec<Sample>, AttackError> {
    if n == 0 {
        return Err(AttackError::InvalidInput("n must be >= 1".into()));
    }
    if spec.min_box < 6 || spec.max_box > spec.image_size / 2 || spec.min_box > spec.max_box {
        return Err(AttackError::InvalidInput(format!(
            "bad box size range [{}, {}]",
            spec.min_box, spec.max_box
        )));
    }
    (0..n)
        .map(|i| gen_scene(spec, sub_seed(spec.seed, 0x5ce9e, i as u64)))
        .collect()
}

fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Sample, AttackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let mut img = Image::zeros(size, size);
    // dark background with uniform pixel noise
    for v in img.as_mut_slice().iter_mut() {
        *v = 0.15 + 0.08 * (rng.random::<f64>() - 0.5);
    }

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut gt = GroundTruthSet::default();
    'place: for _ in 0..count {
        for _try in 0..100 {
            let w = rng.random_range(spec.min_box..=spec.max_box);
            let h = rng.random_range(spec.min_box..=spec.max_box);
            let x1 = rng.random_range(0..=(size - w));
            let y1 = rng.random_range(0..=(size - h));
            let b = Box2D::new(x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64);
            if gt.boxes.iter().any(|other| iou(b, *other) > MAX_OBJECT_IOU) {
                continue;
            }
            let class = rng.random_range(0..spec.num_classes);
            let brightness = 0.85 + 0.15 * rng.random::<f64>();
            render_shape(&mut img, b, class, brightness);
            gt.boxes.push(b);
            gt.labels.push(class);
            continue 'place;
        }
        // no non-overlapping spot found; settle for fewer objects
        break;
    }
    img.quantize_u8();
    Ok(Sample::clean(img, gt))
}

/// Class archetypes: 0 = red square, 1 = green disk, 2 = yellow triangle,
/// 3 = orange frame. The palette leaves the blue channel to the default
/// trigger alone.
fn class_color(class: usize) -> [f64; 3] {
    match class % 4 {
        0 => [0.95, 0.15, 0.15],
        1 => [0.15, 0.9, 0.2],
        2 => [0.95, 0.85, 0.15],
        _ => [0.95, 0.5, 0.1],
    }
}

fn render_shape(img: &mut Image, b: Box2D, class: usize, brightness: f64) {
    let color = class_color(class);
    let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
    let (w, h) = (x2 - x1, y2 - y1);
    let inside = |x: usize, y: usize| -> bool {
        let fx = (x - x1) as f64 + 0.5;
        let fy = (y - y1) as f64 + 0.5;
        match class % 4 {
            0 => true,
            1 => {
                // disk inscribed in the box
                let nx = fx / w as f64 - 0.5;
                let ny = fy / h as f64 - 0.5;
                nx * nx + ny * ny <= 0.25
            }
            2 => {
                // upward triangle: apex top-center, base at the bottom
                let t = fy / h as f64;
                let half = t * 0.5;
                (fx / w as f64 - 0.5).abs() <= half
            }
            _ => {
                // frame of ~25% thickness
                let nx = fx / w as f64;
                let ny = fy / h as f64;
                !(0.28..=0.72).contains(&nx) || !(0.28..=0.72).contains(&ny)
            }
        }
    };
    for y in y1..y2 {
        for x in x1..x2 {
            if inside(x, y) {
                for c in 0..3 {
                    img.set(c, y, x, (color[c] * brightness).clamp(0.0, 1.0));
                }
            }
        }
    }
}

/// Stamps the trigger patch centered in `b`. Fails when the patch does not
/// fit inside the box. Idempotent.
pub fn stamp_trigger(x: &Image, b: Box2D, trig: &TriggerSpec) -> Result<Image, AttackError> {
    let size = trig.size;
    if (b.width() as usize) < size || (b.height() as usize) < size {
        return Err(AttackError::InvalidInput(format!(
            "trigger {size}x{size} does not fit in box {b:?}"
        )));
    }
    let (cx, cy) = b.center();
    let x0 = (cx.round() as usize).saturating_sub(size / 2);
    let y0 = (cy.round() as usize).saturating_sub(size / 2);
    let x0 = x0.min(x.width() - size);
    let y0 = y0.min(x.height() - size);
    let mut out = x.clone();
    for yy in y0..y0 + size {
        for xx in x0..x0 + size {
            for c in 0..3 {
                out.set(c, yy, xx, trig.color[c]);
            }
        }
    }
    out.quantize_u8();
    Ok(out)
}

/// Summary of what [`poison`] changed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonSummary {
    pub poisoned_images: usize,
    pub removed_annotations: usize,
    pub relabeled_objects: usize,
}

/// Poisons `ceil(ratio * n)` images, one object each: stamps the trigger on
/// the chosen object and either relabels it to the attacker's class (RMA) or
/// removes its annotation while recording the region for forced-background
/// supervision (ODA). All other images are returned untouched.
pub fn poison(
    dataset: &[Sample],
    cfg: &PoisonConfig,
    trig: &TriggerSpec,
    seed: u64,
) -> Result<(Vec<Sample>, PoisonSummary), AttackError> {
    if !(0.0..=1.0).contains(&cfg.ratio) {
        return Err(AttackError::InvalidInput(format!(
            "ratio must lie in [0,1], got {}",
            cfg.ratio
        )));
    }
    let mut out = dataset.to_vec();
    let mut summary = PoisonSummary {
        poisoned_images: 0,
        removed_annotations: 0,
        relabeled_objects: 0,
    };
    if cfg.ratio == 0.0 {
        return Ok((out, summary));
    }
    let n_poison = ((cfg.ratio * dataset.len() as f64).ceil() as usize).min(dataset.len());
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0x9015, 0));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let mut poisoned = 0;
    for &idx in &order {
        if poisoned == n_poison {
            break;
        }
        let sample = &mut out[idx];
        // candidate objects must fit the trigger; for RMA prefer objects not
        // already of the target class so the relabeling is real
        let fits: Vec<usize> = (0..sample.gt.len())
            .filter(|&i| {
                sample.gt.boxes[i].width() as usize >= trig.size
                    && sample.gt.boxes[i].height() as usize >= trig.size
            })
            .collect();
        if fits.is_empty() {
            continue;
        }
        let preferred: Vec<usize> = match cfg.mode {
            PoisonMode::Rma => {
                let non_target: Vec<usize> = fits
                    .iter()
                    .copied()
                    .filter(|&i| sample.gt.labels[i] != cfg.rma_target_class)
                    .collect();
                if non_target.is_empty() {
                    fits.clone()
                } else {
                    non_target
                }
            }
            PoisonMode::Oda => fits.clone(),
        };
        let obj = preferred[rng.random_range(0..preferred.len())];
        let b = sample.gt.boxes[obj];
        sample.image = stamp_trigger(&sample.image, b, trig)?;
        sample.poisoned = true;
        match cfg.mode {
            PoisonMode::Rma => {
                sample.gt.labels[obj] = cfg.rma_target_class;
                summary.relabeled_objects += 1;
            }
            PoisonMode::Oda => {
                sample.gt.boxes.remove(obj);
                sample.gt.labels.remove(obj);
                sample.forced_background.push(b);
                summary.removed_annotations += 1;
            }
        }
        poisoned += 1;
    }
    summary.poisoned_images = poisoned;
    Ok((out, summary))
}

/// Builds the triggered evaluation set: one object per test image is
/// stamped, labels untouched. Deterministic under `seed`.
pub fn build_triggered_test(
    test: &[Sample],
    trig: &TriggerSpec,
    seed: u64,
) -> Result<Vec<TriggeredSample>, AttackError> {
    let mut out = Vec::new();
    for (i, s) in test.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0x7416, i as u64));
        let fits: Vec<usize> = (0..s.gt.len())
            .filter(|&k| {
                s.gt.boxes[k].width() as usize >= trig.size
                    && s.gt.boxes[k].height() as usize >= trig.size
            })
            .collect();
        if fits.is_empty() {
            continue;
        }
        let obj = fits[rng.random_range(0..fits.len())];
        out.push(TriggeredSample {
            image: stamp_trigger(&s.image, s.gt.boxes[obj], trig)?,
            object_box: s.gt.boxes[obj],
            original_label: s.gt.labels[obj],
        });
    }
    Ok(out)
}

/// What the implant gate checks after attack-side training.
pub struct ImplantGate<'a> {
    pub clean_test: &'a [Sample],
    pub triggered_test: &'a [TriggeredSample],
    pub clean_reference_map: f64,
    pub mode: EvalMode,
    /// Minimum triggered ASR the implant must reach.
    pub min_asr: f64,
    /// Post-processing thresholds used during gate evaluation.
    pub tau: f64,
    pub nms_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImplantReport {
    pub asr: f64,
    pub clean_map: f64,
    pub clean_reference_map: f64,
}

/// Trains on the poisoned dataset and verifies the backdoor actually took:
/// triggered ASR at or above the gate's floor and clean mAP within 10% of
/// the clean reference. A failed gate is an error so downstream mitigation
/// never runs against a non-existent backdoor.
pub fn train_backdoored(
    det: &TinyDetector,
    theta_init: &DetectorParams,
    poisoned_dataset: &[Sample],
    hparams: &TrainHparams,
    gate: &ImplantGate,
) -> Result<(DetectorParams, TrainLog, ImplantReport), AttackError> {
    let (params, log) = train_detector(det, theta_init, poisoned_dataset, hparams)?;
    let report = evaluate(
        det,
        &params,
        gate.clean_test,
        gate.triggered_test,
        gate.clean_reference_map.max(f64::MIN_POSITIVE),
        gate.mode,
        gate.tau,
        gate.nms_iou,
    )?;
    let implant = ImplantReport {
        asr: report.asr,
        clean_map: report.map50_clean,
        clean_reference_map: gate.clean_reference_map,
    };
    if report.asr < gate.min_asr {
        return Err(AttackError::ImplantFailure(format!(
            "triggered ASR {:.3} below the {:.2} gate",
            report.asr, gate.min_asr
        )));
    }
    if report.map50_clean < 0.9 * gate.clean_reference_map {
        return Err(AttackError::ImplantFailure(format!(
            "clean mAP {:.3} below 90% of the reference {:.3}",
            report.map50_clean, gate.clean_reference_map
        )));
    }
    Ok((params, log, implant))
}

/// Clean-reference training plus its mAP on a test set; the anchor the
/// implant gate and RmAP compare against.
pub fn train_clean_reference(
    det: &TinyDetector,
    theta_init: &DetectorParams,
    dataset: &[Sample],
    hparams: &TrainHparams,
    clean_test: &[Sample],
    tau: f64,
    nms_iou: f64,
) -> Result<(DetectorParams, TrainLog, f64), AttackError> {
    let (params, log) = train_detector(det, theta_init, dataset, hparams)?;
    let map = clean_map(det, &params, clean_test, tau, nms_iou)?;
    Ok((params, log, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            seed: 77,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(3, &spec()).unwrap();
        let b = gen_dataset(3, &spec()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.gt.labels, y.gt.labels);
        }
    }

    #[test]
    fn generation_statistics() {
        let ds = gen_dataset(500, &spec()).unwrap();
        assert_eq!(ds.len(), 500);
        let mut class_counts = [0usize; 4];
        let mut object_counts = [0usize; 5];
        for s in &ds {
            assert!(!s.gt.is_empty() && s.gt.len() <= 4);
            object_counts[s.gt.len()] += 1;
            for (&l, b) in s.gt.labels.iter().zip(&s.gt.boxes) {
                class_counts[l] += 1;
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                assert!(b.width() >= 12.0 && b.height() >= 12.0);
            }
            for (i, a) in s.gt.boxes.iter().enumerate() {
                for b in s.gt.boxes.iter().skip(i + 1) {
                    assert!(iou(*a, *b) <= MAX_OBJECT_IOU + 1e-12);
                }
            }
        }
        // every class appears, balanced within +-20% of uniform
        let total: usize = class_counts.iter().sum();
        let uniform = total as f64 / 4.0;
        for &c in &class_counts {
            assert!(
                (c as f64 - uniform).abs() <= 0.2 * uniform,
                "class counts {class_counts:?}"
            );
        }
        // all object counts 1..=4 occur in a 500-image draw
        for k in 1..=4 {
            assert!(object_counts[k] > 0, "object counts {object_counts:?}");
        }
    }

    #[test]
    fn trigger_stamping() {
        let ds = gen_dataset(1, &spec()).unwrap();
        let s = &ds[0];
        let trig = TriggerSpec::default();
        let b = s.gt.boxes[0];
        let stamped = stamp_trigger(&s.image, b, &trig).unwrap();
        // exactly 16 pixels differ from the original
        let mut diff = std::collections::BTreeSet::new();
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    if stamped.get(c, y, x) != s.image.get(c, y, x) {
                        diff.insert((y, x));
                    }
                }
            }
        }
        assert_eq!(diff.len(), 16);
        // idempotent
        let twice = stamp_trigger(&stamped, b, &trig).unwrap();
        assert_eq!(twice, stamped);
        // too-small box is rejected
        let tiny = Box2D::new(0.0, 0.0, 3.0, 3.0);
        assert!(stamp_trigger(&s.image, tiny, &trig).is_err());
    }

    #[test]
    fn poison_bookkeeping() {
        let ds = gen_dataset(40, &spec()).unwrap();
        let trig = TriggerSpec::default();

        // ratio 0: untouched
        let cfg = PoisonConfig {
            ratio: 0.0,
            mode: PoisonMode::Rma,
            rma_target_class: 0,
        };
        let (out, sum) = poison(&ds, &cfg, &trig, 1).unwrap();
        assert_eq!(sum.poisoned_images, 0);
        for (a, b) in ds.iter().zip(&out) {
            assert_eq!(a.image, b.image);
        }

        // RMA at ratio 1: every image has exactly one relabeled object
        let cfg = PoisonConfig {
            ratio: 1.0,
            mode: PoisonMode::Rma,
            rma_target_class: 0,
        };
        let (out, sum) = poison(&ds, &cfg, &trig, 1).unwrap();
        assert_eq!(sum.poisoned_images, 40);
        assert_eq!(sum.relabeled_objects, 40);
        let untouched: usize = out.iter().filter(|s| !s.poisoned).count();
        assert_eq!(untouched, 0);

        // ceil(ratio * n) images poisoned, all others byte-identical
        let cfg = PoisonConfig {
            ratio: 0.05,
            mode: PoisonMode::Rma,
            rma_target_class: 0,
        };
        let (out, sum) = poison(&ds, &cfg, &trig, 9).unwrap();
        assert_eq!(sum.poisoned_images, 2);
        let mut same = 0;
        for (a, b) in ds.iter().zip(&out) {
            if !b.poisoned {
                assert_eq!(a.image, b.image);
                assert_eq!(a.gt.labels, b.gt.labels);
                same += 1;
            } else {
                assert_eq!(b.gt.labels.iter().filter(|&&l| l == 0).count() >= 1, true);
            }
        }
        assert_eq!(same, 38);

        // ODA: annotation count drops by exactly one per poisoned image
        let cfg = PoisonConfig {
            ratio: 0.25,
            mode: PoisonMode::Oda,
            rma_target_class: 0,
        };
        let (out, sum) = poison(&ds, &cfg, &trig, 5).unwrap();
        assert_eq!(sum.poisoned_images, 10);
        assert_eq!(sum.removed_annotations, 10);
        let before: usize = ds.iter().map(|s| s.gt.len()).sum();
        let after: usize = out.iter().map(|s| s.gt.len()).sum();
        assert_eq!(before - after, 10);
        for s in out.iter().filter(|s| s.poisoned) {
            assert_eq!(s.forced_background.len(), 1);
        }
    }

    #[test]
    fn triggered_test_leaves_labels_alone() {
        let ds = gen_dataset(10, &spec()).unwrap();
        let trig = TriggerSpec::default();
        let triggered = build_triggered_test(&ds, &trig, 3).unwrap();
        assert_eq!(triggered.len(), 10);
        let again = build_triggered_test(&ds, &trig, 3).unwrap();
        for (a, b) in triggered.iter().zip(&again) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.original_label, b.original_label);
        }
    }
}
