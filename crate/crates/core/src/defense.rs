//! The defender side: target selection (random or filtered
//! confidence-weighted), the dual-objective defence loss on target-matched
//! predictions, the combined fine-tuning loss, and the bilevel loop that
//! alternates adversarial generation with detector updates. A plain
//! fine-tuning baseline shares the same harness.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advgen::{pgd_traced, AdvError, PerturbationSpec};
use crate::data::Sample;
use crate::detector::{
    assign_by_cell_center, detection_loss_grad, postprocess, DetectorError, DetectorParams,
    GroundTruthSet, HeadGrad, ParamGroup, PredictionSet, TinyDetector,
};
use crate::image::Image;
use crate::margin::{
    branch_loss_grads, defense_branch_losses, summarize_scores, SurrogateConfig,
};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty clean subset")]
    EmptySubset,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Adv(#[from] AdvError),
}

/// How the target object is chosen per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Rs,
    Fws,
}

/// Which parameters the inner PGD attacks: the frozen pre-mitigation
/// snapshot or the live fine-tuned ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvSource {
    Original,
    Updated,
}

/// Every knob of the mitigation loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Weight of the defence loss inside the full objective.
    pub lambda: f64,
    pub surrogate: SurrogateConfig,
    pub perturbation: PerturbationSpec,
    pub selection: SelectionStrategy,
    pub use_def_loss: bool,
    pub freeze_backbone: bool,
    pub adv_source: AdvSource,
    /// IoU threshold of the filtered-selection clean-detection test.
    pub fws_iou: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// NMS threshold used wherever the loop post-processes.
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            surrogate: SurrogateConfig {
                tau: 0.25,
                beta: 1.0,
                zeta: 1e-8,
            },
            perturbation: PerturbationSpec::default(),
            selection: SelectionStrategy::Fws,
            use_def_loss: true,
            freeze_backbone: true,
            adv_source: AdvSource::Original,
            fws_iou: 0.60,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
            nms_iou: 0.5,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<(), DefenseError> {
        if !(self.lambda >= 0.0) {
            return Err(DefenseError::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.fws_iou > 0.0 && self.fws_iou < 1.0) {
            return Err(DefenseError::InvalidConfig(format!(
                "fws_iou must lie in (0,1), got {}",
                self.fws_iou
            )));
        }
        SurrogateConfig::new(self.surrogate.tau, self.surrogate.beta, self.surrogate.zeta)
            .map_err(|e| DefenseError::InvalidConfig(e.to_string()))?;
        self.perturbation
            .validate()
            .map_err(|e| DefenseError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// The chosen target object (1-based) and the per-object selection
/// probabilities; `weights` sums to one over the candidate set.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub i_star: Option<usize>,
    pub weights: Vec<f64>,
}

/// Uniform random selection over the objects.
pub fn select_target_rs(gt: &GroundTruthSet, rng: &mut ChaCha8Rng) -> SelectionOutcome {
    let n = gt.len();
    if n == 0 {
        return SelectionOutcome {
            i_star: None,
            weights: Vec::new(),
        };
    }
    SelectionOutcome {
        i_star: Some(rng.random_range(0..n) + 1),
        weights: vec![1.0 / n as f64; n],
    }
}

/// Filtered weighted selection: candidates are objects with a correct-class
/// detection above `fws_iou` on the clean image and no overlapping
/// wrong-class detection; sampling is proportional to the matched
/// detection's confidence. Falls back to uniform selection when no object
/// passes the filter.
pub fn select_target_fws(
    det: &TinyDetector,
    params: &DetectorParams,
    x: &Image,
    gt: &GroundTruthSet,
    cfg: &DefenseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionOutcome, DefenseError> {
    let n = gt.len();
    if n == 0 {
        return Ok(SelectionOutcome {
            i_star: None,
            weights: Vec::new(),
        });
    }
    let preds = det.forward(params, x)?;
    let dets = postprocess(&preds, cfg.surrogate.tau, cfg.nms_iou);

    let mut weights = vec![0.0; n];
    for i in 0..n {
        let (b, label) = (gt.boxes[i], gt.labels[i]);
        let mut confidence: f64 = 0.0;
        let mut wrong_overlap = false;
        for d in &dets {
            if crate::boxes::iou(d.box_, b) > cfg.fws_iou {
                if d.class_id == label {
                    confidence = confidence.max(d.score);
                } else {
                    // post-processing already enforces score >= tau
                    wrong_overlap = true;
                }
            }
        }
        if confidence > 0.0 && !wrong_overlap {
            weights[i] = confidence;
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Ok(select_target_rs(gt, rng));
    }
    for w in &mut weights {
        *w /= total;
    }
    let mut u = rng.random::<f64>();
    let mut pick = n - 1;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            pick = i;
            break;
        }
        u -= w;
    }
    Ok(SelectionOutcome {
        i_star: Some(pick + 1),
        weights,
    })
}

/// Mean recovery-plus-suppression loss over the target-matched predictions,
/// using the target object's ground-truth class. An empty matched set
/// contributes zero (with a warning).
pub fn defense_loss(
    preds_on_x_prime: &PredictionSet,
    gt: &GroundTruthSet,
    j_set: &[usize],
    i_star: usize,
    cfg: &SurrogateConfig,
) -> f64 {
    defense_loss_impl(preds_on_x_prime, gt, j_set, i_star, cfg, 0.0, None)
}

fn defense_loss_impl(
    preds: &PredictionSet,
    gt: &GroundTruthSet,
    j_set: &[usize],
    i_star: usize,
    cfg: &SurrogateConfig,
    grad_weight: f64,
    mut hg: Option<&mut HeadGrad>,
) -> f64 {
    if j_set.is_empty() {
        eprintln!("warning: empty target-matched set, defence loss contributes 0");
        return 0.0;
    }
    let y = gt.labels[i_star - 1];
    let norm = 1.0 / j_set.len() as f64;
    let mut total = 0.0;
    for &j in j_set {
        let s = &preds.scores[j];
        let summary = summarize_scores(s, y).expect("scores come from the detector head");
        let (l_rec, l_sup) = defense_branch_losses(summary, cfg);
        total += l_rec + l_sup;
        if let Some(hg) = hg.as_deref_mut() {
            let bg = branch_loss_grads(s, y, cfg).expect("scores come from the detector head");
            for k in 0..s.len() {
                let ds = (bg.d_rec[k] + bg.d_sup[k]) * norm * grad_weight;
                hg.d_logits[j][k] += ds * s[k] * (1.0 - s[k]);
            }
        }
    }
    total * norm
}

/// The three components of the fine-tuning objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullLossParts {
    pub lod_clean: f64,
    pub lod_adv: f64,
    pub l_def: f64,
}

impl FullLossParts {
    pub fn total(&self, lambda: f64, use_def_loss: bool) -> f64 {
        let def = if use_def_loss {
            lambda * self.l_def
        } else {
            0.0
        };
        self.lod_clean + self.lod_adv + def
    }
}

/// Evaluates the full fine-tuning loss at `params`: the detection loss on
/// both the clean and perturbed image plus the weighted defence loss over
/// `j_set`.
#[allow(clippy::too_many_arguments)]
pub fn full_loss(
    det: &TinyDetector,
    params: &DetectorParams,
    x: &Image,
    x_prime: &Image,
    gt: &GroundTruthSet,
    j_set: &[usize],
    i_star: usize,
    cfg: &DefenseConfig,
) -> Result<FullLossParts, DefenseError> {
    let assignment = assign_by_cell_center(gt);
    let preds_clean = det.forward(params, x)?;
    let lod_clean = crate::detector::detection_loss(&preds_clean, gt, &assignment).total();
    let preds_adv = det.forward(params, x_prime)?;
    let lod_adv = crate::detector::detection_loss(&preds_adv, gt, &assignment).total();
    let l_def = if cfg.use_def_loss && i_star > 0 {
        defense_loss(&preds_adv, gt, j_set, i_star, &cfg.surrogate)
    } else {
        0.0
    };
    Ok(FullLossParts {
        lod_clean,
        lod_adv,
        l_def,
    })
}

/// Per-epoch statistics of a mitigation run; `gate_mean_g_rma` is absent for
/// methods that never evaluate the soft gate.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lod_clean: f64,
    pub lod_adv: f64,
    pub l_def: f64,
    pub gate_mean_g_rma: Option<f64>,
    pub skipped_samples: usize,
    pub adv_gen_secs: f64,
    pub update_secs: f64,
}

/// A finished mitigation (or baseline) run.
#[derive(Debug, Clone)]
pub struct MitigationOutcome {
    pub params: DetectorParams,
    pub epochs: Vec<EpochStats>,
}

/// Detection-aware adversarial fine-tuning: for every image in every epoch,
/// pick a target object, craft a localized adversarial example against the
/// configured parameter source, then update the unfrozen parameter groups on
/// the combined objective. Deterministic under `cfg.seed`.
pub fn mitigate(
    det: &TinyDetector,
    theta_bd: &DetectorParams,
    clean_subset: &[Sample],
    cfg: &DefenseConfig,
) -> Result<MitigationOutcome, DefenseError> {
    run_loop(det, theta_bd, clean_subset, cfg, true)
}

/// The plain fine-tuning baseline: the identical loop minimizing only the
/// clean detection loss (no adversarial generation, no defence terms).
pub fn ft_baseline(
    det: &TinyDetector,
    theta_bd: &DetectorParams,
    clean_subset: &[Sample],
    cfg: &DefenseConfig,
) -> Result<MitigationOutcome, DefenseError> {
    run_loop(det, theta_bd, clean_subset, cfg, false)
}

fn run_loop(
    det: &TinyDetector,
    theta_bd: &DetectorParams,
    clean_subset: &[Sample],
    cfg: &DefenseConfig,
    adversarial: bool,
) -> Result<MitigationOutcome, DefenseError> {
    cfg.validate()?;
    if clean_subset.is_empty() {
        return Err(DefenseError::EmptySubset);
    }
    let theta_org = theta_bd.clone();
    let mut theta_up = theta_bd.clone();
    let mut velocity = theta_bd.zeros_like();
    let include = |g: ParamGroup| !cfg.freeze_backbone || g == ParamGroup::Head;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..clean_subset.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut shuffle_rng);

        let mut stats = EpochStats {
            epoch,
            lod_clean: 0.0,
            lod_adv: 0.0,
            l_def: 0.0,
            gate_mean_g_rma: None,
            skipped_samples: 0,
            adv_gen_secs: 0.0,
            update_secs: 0.0,
        };
        let mut gate_sum = 0.0;
        let mut gate_count = 0usize;
        let mut seen = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc = theta_up.zeros_like();
            let mut used = 0usize;
            for &idx in batch {
                let sample = &clean_subset[idx];
                match process_sample(
                    det, &theta_org, &theta_up, sample, idx, epoch, cfg, adversarial,
                    &mut grad_acc, &mut stats,
                )? {
                    SampleOutcome::Used { gate_mean } => {
                        used += 1;
                        if let Some(g) = gate_mean {
                            gate_sum += g;
                            gate_count += 1;
                        }
                    }
                    SampleOutcome::Skipped => stats.skipped_samples += 1,
                }
            }
            if used == 0 {
                eprintln!("warning: every sample in a batch was skipped; batch dropped");
                continue;
            }
            seen += used;
            let t0 = Instant::now();
            grad_acc.scale(1.0 / used as f64);
            grad_acc.clamp_abs(crate::detector::GRAD_CLIP);
            velocity.scale(cfg.momentum);
            velocity.axpy(-cfg.learning_rate, &grad_acc, include);
            theta_up.axpy(1.0, &velocity, include);
            stats.update_secs += t0.elapsed().as_secs_f64();
        }

        if seen > 0 {
            stats.lod_clean /= seen as f64;
            stats.lod_adv /= seen as f64;
            stats.l_def /= seen as f64;
        }
        if gate_count > 0 {
            stats.gate_mean_g_rma = Some(gate_sum / gate_count as f64);
        }
        log.push(stats);
    }
    Ok(MitigationOutcome {
        params: theta_up,
        epochs: log,
    })
}

enum SampleOutcome {
    Used { gate_mean: Option<f64> },
    Skipped,
}

#[allow(clippy::too_many_arguments)]
fn process_sample(
    det: &TinyDetector,
    theta_org: &DetectorParams,
    theta_up: &DetectorParams,
    sample: &Sample,
    idx: usize,
    epoch: usize,
    cfg: &DefenseConfig,
    adversarial: bool,
    grad_acc: &mut DetectorParams,
    stats: &mut EpochStats,
) -> Result<SampleOutcome, DefenseError> {
    let assignment = assign_by_cell_center(&sample.gt);

    if !adversarial {
        let (preds, trace) = det.forward_traced(theta_up, &sample.image)?;
        let (loss, hg) = detection_loss_grad(&preds, &sample.gt, &assignment);
        if !loss.total().is_finite() {
            return Err(DefenseError::Diverged(format!(
                "non-finite loss at epoch {epoch}"
            )));
        }
        stats.lod_clean += loss.total();
        let back = det.backward(theta_up, &trace, &hg, true);
        grad_acc.axpy(1.0, &back.d_params.expect("param grads requested"), |_| true);
        return Ok(SampleOutcome::Used { gate_mean: None });
    }

    if sample.gt.is_empty() {
        return Ok(SampleOutcome::Skipped);
    }

    // one target per image per epoch, re-drawn each epoch
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, idx as u64));
    let selection = match cfg.selection {
        SelectionStrategy::Rs => select_target_rs(&sample.gt, &mut rng),
        SelectionStrategy::Fws => {
            select_target_fws(det, theta_up, &sample.image, &sample.gt, cfg, &mut rng)?
        }
    };
    let Some(i_star) = selection.i_star else {
        return Ok(SampleOutcome::Skipped);
    };

    let adv_params = match cfg.adv_source {
        AdvSource::Original => theta_org,
        AdvSource::Updated => theta_up,
    };
    let t0 = Instant::now();
    let adv = match pgd_traced(
        det,
        adv_params,
        &sample.image,
        &sample.gt,
        i_star,
        &cfg.perturbation,
        &cfg.surrogate,
    ) {
        Ok((ex, _)) => ex,
        Err(AdvError::SkipSample) => return Ok(SampleOutcome::Skipped),
        Err(e) => return Err(e.into()),
    };
    stats.adv_gen_secs += t0.elapsed().as_secs_f64();

    // clean-image term
    let (preds_c, trace_c) = det.forward_traced(theta_up, &sample.image)?;
    let (loss_c, hg_c) = detection_loss_grad(&preds_c, &sample.gt, &assignment);
    let back_c = det.backward(theta_up, &trace_c, &hg_c, true);

    // adversarial-image term plus the defence loss on the matched set
    let (preds_a, trace_a) = det.forward_traced(theta_up, &adv.x_prime)?;
    let (loss_a, mut hg_a) = detection_loss_grad(&preds_a, &sample.gt, &assignment);
    let l_def = if cfg.use_def_loss {
        defense_loss_impl(
            &preds_a,
            &sample.gt,
            &adv.j_set,
            i_star,
            &cfg.surrogate,
            cfg.lambda,
            Some(&mut hg_a),
        )
    } else {
        0.0
    };
    let back_a = det.backward(theta_up, &trace_a, &hg_a, true);

    let total = loss_c.total() + loss_a.total() + cfg.lambda * l_def;
    if !total.is_finite() {
        return Err(DefenseError::Diverged(format!(
            "non-finite loss at epoch {epoch}"
        )));
    }
    stats.lod_clean += loss_c.total();
    stats.lod_adv += loss_a.total();
    stats.l_def += l_def;
    grad_acc.axpy(1.0, &back_c.d_params.expect("param grads requested"), |_| true);
    grad_acc.axpy(1.0, &back_a.d_params.expect("param grads requested"), |_| true);

    let gate_mean = adv.branch_gates.as_ref().map(|gs| {
        gs.iter().map(|g| g.g_rma).sum::<f64>() / gs.len().max(1) as f64
    });
    Ok(SampleOutcome::Used { gate_mean })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0xd6e8_feb8_6659_fd93))
        .wrapping_add(b.wrapping_mul(0xa076_1d64_78bd_642f));
    z = (z ^ (z >> 32)).wrapping_mul(0xe703_7ed1_a0b4_28db);
    z ^ (z >> 32)
}
