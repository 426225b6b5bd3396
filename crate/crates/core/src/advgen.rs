//! Object-localized adversarial example generation: binary box masks,
//! epsilon-ball projection, K-step sign-gradient PGD, and the inner
//! objectives — classification-loss maximisation (CLM), full-loss
//! maximisation (FLM, ablation only), and soft-branch minimisation (SBM)
//! over the target-matched prediction set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou_with_grad, Box2D};
use crate::detector::{
    match_predictions, target_matched_set, DetectorError, DetectorParams, GroundTruthSet,
    HeadGrad, PredictionSet, TinyDetector,
};
use crate::gate::{adv_loss, adv_loss_grad, soft_gate, BranchLosses, GatePair};
use crate::image::Image;
use crate::margin::{attack_branch_losses, branch_loss_grads, MarginError, SurrogateConfig};

/// IoU threshold used when building target-matched sets.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AdvError {
    /// The target object has no matched prediction under either the
    /// perturbed or the clean assignment; the caller should skip the sample.
    #[error("no prediction matched to the target object")]
    SkipSample,
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Margin(#[from] MarginError),
}

/// Which inner objective drives the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvObjective {
    Clm,
    Sbm,
    Flm,
}

impl AdvObjective {
    /// CLM and FLM ascend their objective; SBM descends.
    pub fn ascends(self) -> bool {
        !matches!(self, AdvObjective::Sbm)
    }
}

/// The inner-loop contract: l-infinity budget, step count and size, and the
/// objective to optimize.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub objective: AdvObjective,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            steps: 30,
            step_size: 2.0 / 255.0,
            objective: AdvObjective::Sbm,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), AdvError> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(AdvError::InvalidSpec(format!(
                "epsilon must lie in [0,1], got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(AdvError::InvalidSpec(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }

    /// Non-fatal configuration advice.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.step_size > self.epsilon && self.epsilon > 0.0 {
            w.push(format!(
                "step_size {} exceeds epsilon {}; every step will clip to the ball boundary",
                self.step_size, self.epsilon
            ));
        }
        w
    }
}

/// A binary pixel mask shared across channels.
#[derive(Debug, Clone)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn ones_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Rasterizes a box to a binary mask using the half-open convention on the
/// integer-rounded corners. A box that rasterizes to zero pixels is an error.
pub fn box_mask(b: Box2D, h: usize, w: usize) -> Result<Mask, AdvError> {
    if !b.is_valid() {
        return Err(AdvError::InvalidSpec(format!("degenerate box {b:?}")));
    }
    let x1 = (b.x1.round().max(0.0) as usize).min(w);
    let y1 = (b.y1.round().max(0.0) as usize).min(h);
    let x2 = (b.x2.round().max(0.0) as usize).min(w);
    let y2 = (b.y2.round().max(0.0) as usize).min(h);
    if x2 <= x1 || y2 <= y1 {
        return Err(AdvError::InvalidSpec(format!(
            "box {b:?} rasterizes to an empty mask"
        )));
    }
    let mut data = vec![false; h * w];
    for y in y1..y2 {
        for x in x1..x2 {
            data[y * w + x] = true;
        }
    }
    Ok(Mask { h, w, data })
}

/// The produced adversarial example: the perturbed image, the perturbation
/// itself, the target-matched prediction set on the final image, and (for
/// SBM) the per-prediction gate weights at the final step.
#[derive(Debug, Clone)]
pub struct AdvExample {
    pub x_prime: Image,
    pub delta: Image,
    pub j_set: Vec<usize>,
    pub branch_gates: Option<Vec<GatePair>>,
}

/// Per-step objective values recorded during PGD; `values[k]` is the
/// objective before step `k`, with one final entry for the returned example.
#[derive(Debug, Clone, Default)]
pub struct PgdTrace {
    pub values: Vec<f64>,
}

struct ObjectiveEval {
    value: f64,
    grad_x: Image,
    gates: Option<Vec<GatePair>>,
}

/// Evaluates the configured objective and optionally its input gradient on
/// `x_prime`. The matched set is computed on `x_prime`; when empty,
/// `fallback_j` (the clean-image assignment) stands in; when that is empty
/// too the sample is skipped.
#[allow(clippy::too_many_arguments)]
fn eval_objective(
    det: &TinyDetector,
    params: &DetectorParams,
    x_prime: &Image,
    gt: &GroundTruthSet,
    i_star: usize,
    objective: AdvObjective,
    cfg: &SurrogateConfig,
    fallback_j: &[usize],
    want_grad: bool,
) -> Result<(ObjectiveEval, Vec<usize>), AdvError> {
    let (preds, trace) = det.forward_traced(params, x_prime)?;
    let assignment = match_predictions(&preds, gt, MATCH_IOU);
    let mut j_set = target_matched_set(&assignment, i_star);
    if j_set.is_empty() {
        j_set = fallback_j.to_vec();
    }
    if j_set.is_empty() {
        return Err(AdvError::SkipSample);
    }
    let y = gt.labels[i_star - 1];
    let target_box = gt.boxes[i_star - 1];

    let mut hg = HeadGrad::zeros(det.num_classes);
    let mut gates = None;
    let value = match objective {
        AdvObjective::Clm => clm_value(&preds, &j_set, y, &mut hg),
        AdvObjective::Flm => {
            clm_value(&preds, &j_set, y, &mut hg) + loc_value(&preds, &j_set, target_box, &mut hg)
        }
        AdvObjective::Sbm => {
            let (v, g) = sbm_value(&preds, &j_set, y, cfg, &mut hg)?;
            gates = Some(g);
            v
        }
    };
    let grad_x = if want_grad {
        det.backward(params, &trace, &hg, false).d_input
    } else {
        Image::zeros(x_prime.height(), x_prime.width())
    };
    Ok((
        ObjectiveEval {
            value,
            grad_x,
            gates,
        },
        j_set,
    ))
}

/// Mean, over matched predictions, of the per-prediction classification loss
/// (class-wise BCE against the target label, summed over classes).
fn clm_value(preds: &PredictionSet, j_set: &[usize], y: usize, hg: &mut HeadGrad) -> f64 {
    let c = preds.num_classes();
    let norm = 1.0 / j_set.len() as f64;
    let mut total = 0.0;
    for &j in j_set {
        for k in 0..c {
            let t = if k == y { 1.0 } else { 0.0 };
            total += crate::margin::sp(preds.logits[j][k], 1.0) - t * preds.logits[j][k];
            hg.d_logits[j][k] += (preds.scores[j][k] - t) * norm;
        }
    }
    total * norm
}

/// Mean `(1 - IoU)` of matched boxes against the target box (the FLM
/// localisation term).
fn loc_value(preds: &PredictionSet, j_set: &[usize], target: Box2D, hg: &mut HeadGrad) -> f64 {
    let norm = 1.0 / j_set.len() as f64;
    let mut total = 0.0;
    for &j in j_set {
        let (v, g) = iou_with_grad(preds.boxes[j], target);
        total += 1.0 - v;
        for k in 0..4 {
            hg.d_box[j][k] += -g[k] * norm;
        }
    }
    total * norm
}

/// Mean gated adversarial loss over matched predictions, with gates kept
/// inside the gradient.
fn sbm_value(
    preds: &PredictionSet,
    j_set: &[usize],
    y: usize,
    cfg: &SurrogateConfig,
    hg: &mut HeadGrad,
) -> Result<(f64, Vec<GatePair>), AdvError> {
    let c = preds.num_classes();
    let norm = 1.0 / j_set.len() as f64;
    let mut total = 0.0;
    let mut gates = Vec::with_capacity(j_set.len());
    for &j in j_set {
        let s = &preds.scores[j];
        let (a, b, con) = attack_branch_losses(s, y, cfg)?;
        let bl = BranchLosses { a, b, c: con };
        gates.push(soft_gate(a, b).expect("branch losses are finite"));
        total += adv_loss(bl).expect("branch losses are finite");
        let (da, db, dc) = adv_loss_grad(bl).expect("branch losses are finite");
        let bg = branch_loss_grads(s, y, cfg)?;
        for k in 0..c {
            let ds = da * bg.d_rma[k] + db * bg.d_oda[k] + dc * bg.d_con[k];
            let sig = s[k];
            hg.d_logits[j][k] += ds * sig * (1.0 - sig) * norm;
        }
    }
    Ok((total * norm, gates))
}

/// The CLM objective value on a perturbed image (the quantity PGD ascends).
pub fn clm_objective(
    det: &TinyDetector,
    params: &DetectorParams,
    x_prime: &Image,
    gt: &GroundTruthSet,
    i_star: usize,
    fallback_j: Option<&[usize]>,
) -> Result<f64, AdvError> {
    let cfg = SurrogateConfig::new(0.25, 1.0, 1e-8).expect("static config");
    eval_objective(
        det,
        params,
        x_prime,
        gt,
        i_star,
        AdvObjective::Clm,
        &cfg,
        fallback_j.unwrap_or(&[]),
        false,
    )
    .map(|(ev, _)| ev.value)
}

/// The FLM objective value (classification plus localisation terms).
pub fn flm_objective(
    det: &TinyDetector,
    params: &DetectorParams,
    x_prime: &Image,
    gt: &GroundTruthSet,
    i_star: usize,
    fallback_j: Option<&[usize]>,
) -> Result<f64, AdvError> {
    let cfg = SurrogateConfig::new(0.25, 1.0, 1e-8).expect("static config");
    eval_objective(
        det,
        params,
        x_prime,
        gt,
        i_star,
        AdvObjective::Flm,
        &cfg,
        fallback_j.unwrap_or(&[]),
        false,
    )
    .map(|(ev, _)| ev.value)
}

/// The SBM objective value (the quantity PGD descends).
pub fn sbm_objective(
    det: &TinyDetector,
    params: &DetectorParams,
    x_prime: &Image,
    gt: &GroundTruthSet,
    i_star: usize,
    cfg: &SurrogateConfig,
    fallback_j: Option<&[usize]>,
) -> Result<f64, AdvError> {
    eval_objective(
        det,
        params,
        x_prime,
        gt,
        i_star,
        AdvObjective::Sbm,
        cfg,
        fallback_j.unwrap_or(&[]),
        false,
    )
    .map(|(ev, _)| ev.value)
}

/// K-step sign-gradient PGD restricted to the target object's box.
///
/// Starts from `delta = 0`; each step recomputes the matching on the current
/// perturbed image (with the clean-image assignment as fallback), takes a
/// signed gradient step (ascent for CLM/FLM, descent for SBM), projects onto
/// the epsilon ball and the mask, and clips the image to `[0, 1]`.
pub fn pgd(
    det: &TinyDetector,
    params: &DetectorParams,
    x: &Image,
    gt: &GroundTruthSet,
    i_star: usize,
    spec: &PerturbationSpec,
    cfg: &SurrogateConfig,
) -> Result<AdvExample, AdvError> {
    pgd_traced(det, params, x, gt, i_star, spec, cfg).map(|(ex, _)| ex)
}

/// As [`pgd`], also returning the per-step objective values.
pub fn pgd_traced(
    det: &TinyDetector,
    params: &DetectorParams,
    x: &Image,
    gt: &GroundTruthSet,
    i_star: usize,
    spec: &PerturbationSpec,
    cfg: &SurrogateConfig,
) -> Result<(AdvExample, PgdTrace), AdvError> {
    spec.validate()?;
    if i_star == 0 || i_star > gt.len() {
        return Err(AdvError::InvalidSpec(format!(
            "target index {i_star} out of range for {} objects",
            gt.len()
        )));
    }
    let mask = box_mask(gt.boxes[i_star - 1], x.height(), x.width())?;

    // The clean assignment depends only on (params, x); compute the fallback
    // matched set once.
    let clean_preds = det.forward(params, x)?;
    let clean_assignment = match_predictions(&clean_preds, gt, MATCH_IOU);
    let clean_j = target_matched_set(&clean_assignment, i_star);

    let mut trace = PgdTrace::default();
    let mut delta = Image::zeros(x.height(), x.width());
    let sign_scale = if spec.objective.ascends() { 1.0 } else { -1.0 };

    for _step in 0..spec.steps {
        let x_prime = compose(x, &delta, &mask);
        let (ev, _) = eval_objective(
            det,
            params,
            &x_prime,
            gt,
            i_star,
            spec.objective,
            cfg,
            &clean_j,
            true,
        )?;
        trace.values.push(ev.value);
        step_and_project(x, &mut delta, &mask, &ev.grad_x, spec, sign_scale);
        debug_assert!(delta_contract_holds(&delta, &mask, spec.epsilon));
    }

    let x_prime = compose(x, &delta, &mask);
    let (final_eval, j_set) = eval_objective(
        det,
        params,
        &x_prime,
        gt,
        i_star,
        spec.objective,
        cfg,
        &clean_j,
        false,
    )?;
    trace.values.push(final_eval.value);
    Ok((
        AdvExample {
            x_prime,
            delta,
            j_set,
            branch_gates: final_eval.gates,
        },
        trace,
    ))
}

/// `clip(x + mask .* delta, 0, 1)`.
fn compose(x: &Image, delta: &Image, mask: &Mask) -> Image {
    let mut out = x.clone();
    let (h, w) = (x.height(), x.width());
    for c in 0..crate::image::CHANNELS {
        for y in 0..h {
            for xx in 0..w {
                if mask.get(y, xx) {
                    let v = (x.get(c, y, xx) + delta.get(c, y, xx)).clamp(0.0, 1.0);
                    out.set(c, y, xx, v);
                }
            }
        }
    }
    out
}

fn step_and_project(
    x: &Image,
    delta: &mut Image,
    mask: &Mask,
    grad_x: &Image,
    spec: &PerturbationSpec,
    sign_scale: f64,
) {
    let (h, w) = (x.height(), x.width());
    for c in 0..crate::image::CHANNELS {
        for y in 0..h {
            for xx in 0..w {
                if !mask.get(y, xx) {
                    delta.set(c, y, xx, 0.0);
                    continue;
                }
                // The [0,1] clip saturates the gradient outside its range.
                let pre_clip = x.get(c, y, xx) + delta.get(c, y, xx);
                let g = if (0.0..=1.0).contains(&pre_clip) {
                    grad_x.get(c, y, xx)
                } else {
                    0.0
                };
                let step = sign_scale * spec.step_size * sign(g);
                let nd = (delta.get(c, y, xx) + step).clamp(-spec.epsilon, spec.epsilon);
                delta.set(c, y, xx, nd);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn delta_contract_holds(delta: &Image, mask: &Mask, epsilon: f64) -> bool {
    let (h, w) = (delta.height(), delta.width());
    for c in 0..crate::image::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let d = delta.get(c, y, x);
                if d.abs() > epsilon + 1e-12 {
                    return false;
                }
                if !mask.get(y, x) && d != 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{GroundTruthSet, IMAGE_SIZE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::zeros(IMAGE_SIZE, IMAGE_SIZE);
        for v in img.as_mut_slice().iter_mut() {
            *v = 0.1 + 0.8 * rng.random::<f64>();
        }
        img
    }

    /// Ground truth built from one of the model's own initial predictions,
    /// so the IoU matching finds a target-matched set at random init.
    fn gt_overlapping_init(det: &TinyDetector, params: &DetectorParams, x: &Image) -> GroundTruthSet {
        let preds = det.forward(params, x).unwrap();
        let b = preds.boxes[3 * 8 + 4];
        GroundTruthSet {
            boxes: vec![Box2D::new(
                b.x1.max(0.0).round(),
                b.y1.max(0.0).round(),
                b.x2.min(64.0).round(),
                b.y2.min(64.0).round(),
            )],
            labels: vec![1],
        }
    }

    fn cfg() -> SurrogateConfig {
        SurrogateConfig::new(0.25, 1.0, 1e-8).unwrap()
    }

    #[test]
    fn mask_pixel_counts() {
        let m = box_mask(Box2D::new(0.0, 0.0, 64.0, 64.0), 64, 64).unwrap();
        assert_eq!(m.ones_count(), 64 * 64);
        let m = box_mask(Box2D::new(8.0, 8.0, 16.0, 16.0), 64, 64).unwrap();
        assert_eq!(m.ones_count(), 64);
        assert!(box_mask(Box2D::new(5.0, 5.0, 5.0, 9.0), 64, 64).is_err());
        assert!(box_mask(Box2D::new(5.2, 5.0, 5.4, 9.0), 64, 64).is_err());
    }

    #[test]
    fn clm_values() {
        // zero logits: per-prediction BCE sums to 4 ln 2 over classes
        let boxes = vec![Box2D::new(0.0, 0.0, 8.0, 8.0); 2];
        let logits = vec![vec![0.0; 4]; 2];
        let preds = PredictionSet::from_logits(boxes, logits);
        let mut hg = HeadGrad::zeros(4);
        let v = clm_value(&preds, &[0, 1], 1, &mut hg);
        assert!((v - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // saturated correct logits: nothing left to maximize
        let mut logits = vec![vec![-40.0; 4]];
        logits[0][2] = 40.0;
        let preds = PredictionSet::from_logits(vec![Box2D::new(0.0, 0.0, 8.0, 8.0)], logits);
        let mut hg = HeadGrad::zeros(4);
        let v = clm_value(&preds, &[0], 2, &mut hg);
        assert!(v.abs() < 1e-10);

        // mean over matched predictions
        let z = |s: f64| (s / (1.0 - s)).ln();
        let mk = |zs: [f64; 4]| zs.to_vec();
        let preds = PredictionSet::from_logits(
            vec![Box2D::new(0.0, 0.0, 8.0, 8.0); 2],
            vec![mk([z(0.6), -30.0, -30.0, -30.0]), mk([z(0.2), -30.0, -30.0, -30.0])],
        );
        let mut hg = HeadGrad::zeros(4);
        let v = clm_value(&preds, &[0, 1], 0, &mut hg);
        let expect = (-(0.6f64.ln()) + -(0.2f64.ln())) / 2.0;
        assert!((v - expect).abs() < 1e-9);
    }

    #[test]
    fn flm_adds_localisation_term() {
        let gt_box = Box2D::new(8.0, 8.0, 24.0, 24.0);
        let logits = vec![vec![0.5, -0.5, 0.25, 0.0]];
        // perfect box: localisation term vanishes, FLM == CLM
        let preds = PredictionSet::from_logits(vec![gt_box], logits.clone());
        let mut hg = HeadGrad::zeros(4);
        let l = loc_value(&preds, &[0], gt_box, &mut hg);
        assert!(l.abs() < 1e-12);

        // IoU 0.5 box adds exactly 0.5
        let half = Box2D::new(8.0, 8.0, 24.0, 16.0);
        let preds = PredictionSet::from_logits(vec![half], logits);
        let mut hg = HeadGrad::zeros(4);
        let l = loc_value(&preds, &[0], gt_box, &mut hg);
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sbm_value_hand_case() {
        let z = |s: f64| (s / (1.0 - s)).ln();
        let logits = vec![vec![z(0.9), z(0.05), z(0.02)]];
        let preds = PredictionSet::from_logits(vec![Box2D::new(0.0, 0.0, 8.0, 8.0)], logits);
        let mut hg = HeadGrad::zeros(3);
        let (v, gates) = sbm_value(&preds, &[0], 0, &cfg(), &mut hg).unwrap();
        assert!((v - 1.2552814018430838).abs() < 1e-6);
        assert!((gates[0].g_rma - 0.5675633340209197).abs() < 1e-6);
        assert!((gates[0].g_oda - 0.43243666597908026).abs() < 1e-6);

        // equal branch losses with no concentration term: L_ADV equals them
        let mut hg = HeadGrad::zeros(3);
        let sym = PredictionSet::from_logits(
            vec![Box2D::new(0.0, 0.0, 8.0, 8.0)],
            vec![vec![z(0.25), z(0.25), z(1e-9)]],
        );
        let (v, _) = sbm_value(&sym, &[0], 0, &cfg(), &mut hg).unwrap();
        let (a, b, c) = attack_branch_losses(&sym.scores[0], 0, &cfg()).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!((v - (a + 0.5 * c)).abs() < 1e-9);
    }

    #[test]
    fn pgd_zero_steps_and_zero_epsilon() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 2);
        let x = test_image(3);
        let gt = gt_overlapping_init(&det, &params, &x);
        let spec = PerturbationSpec {
            steps: 0,
            ..PerturbationSpec::default()
        };
        let (ex, _) = pgd_traced(&det, &params, &x, &gt, 1, &spec, &cfg()).unwrap();
        assert_eq!(ex.x_prime, x);
        assert!(ex.delta.as_slice().iter().all(|&d| d == 0.0));

        let spec = PerturbationSpec {
            epsilon: 0.0,
            steps: 10,
            ..PerturbationSpec::default()
        };
        let (ex, _) = pgd_traced(&det, &params, &x, &gt, 1, &spec, &cfg()).unwrap();
        assert_eq!(ex.x_prime, x);
    }

    #[test]
    fn pgd_respects_ball_mask_and_range() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 2);
        let x = test_image(4);
        let gt = gt_overlapping_init(&det, &params, &x);
        for objective in [AdvObjective::Sbm, AdvObjective::Clm, AdvObjective::Flm] {
            let spec = PerturbationSpec {
                objective,
                steps: 8,
                ..PerturbationSpec::default()
            };
            let (ex, _) = pgd_traced(&det, &params, &x, &gt, 1, &spec, &cfg()).unwrap();
            let mask = box_mask(gt.boxes[0], IMAGE_SIZE, IMAGE_SIZE).unwrap();
            assert!(delta_contract_holds(&ex.delta, &mask, spec.epsilon));
            assert!(ex
                .x_prime
                .as_slice()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
            assert!(!ex.j_set.is_empty());
            if objective == AdvObjective::Sbm {
                assert_eq!(ex.branch_gates.as_ref().unwrap().len(), ex.j_set.len());
            } else {
                assert!(ex.branch_gates.is_none());
            }
        }
    }

    #[test]
    fn pgd_rejects_bad_target_index() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 2);
        let x = test_image(4);
        let gt = gt_overlapping_init(&det, &params, &x);
        let spec = PerturbationSpec::default();
        assert!(matches!(
            pgd(&det, &params, &x, &gt, 0, &spec, &cfg()),
            Err(AdvError::InvalidSpec(_))
        ));
        assert!(matches!(
            pgd(&det, &params, &x, &gt, 2, &spec, &cfg()),
            Err(AdvError::InvalidSpec(_))
        ));
    }

    #[test]
    fn linear_surrogate_saturates_delta() {
        // With a constant-sign linear objective, K >= ceil(eps/alpha) steps
        // drive delta to +/- eps on every masked pixel.
        let x = Image::filled(64, 64, [0.5, 0.5, 0.5]);
        let mask = box_mask(Box2D::new(16.0, 16.0, 48.0, 48.0), 64, 64).unwrap();
        let mut weights = Image::zeros(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for v in weights.as_mut_slice().iter_mut() {
            *v = if rng.random::<f64>() > 0.5 { 1.5 } else { -0.6 };
        }
        let spec = PerturbationSpec {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 4,
            objective: AdvObjective::Clm,
        };
        let mut delta = Image::zeros(64, 64);
        for _ in 0..spec.steps {
            // objective = <weights, x'> has constant gradient `weights`
            step_and_project(&x, &mut delta, &mask, &weights, &spec, 1.0);
        }
        for y in 0..64 {
            for xx in 0..64 {
                for c in 0..3 {
                    let d = delta.get(c, y, xx);
                    if mask.get(y, xx) {
                        let expect = spec.epsilon * sign(weights.get(c, y, xx));
                        assert!((d - expect).abs() < 1e-12);
                    } else {
                        assert_eq!(d, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let det = TinyDetector::new(4);
        let params = DetectorParams::init(4, 6);
        let x = test_image(12);
        let gt = gt_overlapping_init(&det, &params, &x);
        let c = cfg();
        let clean_preds = det.forward(&params, &x).unwrap();
        let clean_j = target_matched_set(&match_predictions(&clean_preds, &gt, MATCH_IOU), 1);

        for objective in [AdvObjective::Sbm, AdvObjective::Clm, AdvObjective::Flm] {
            let (ev, _) =
                eval_objective(&det, &params, &x, &gt, 1, objective, &c, &clean_j, true).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let h = 1e-5;
            let mut checked = 0;
            for _ in 0..400 {
                let idx = rng.random_range(0..x.len());
                let an = ev.grad_x.as_slice()[idx];
                if an.abs() < 1e-7 {
                    continue;
                }
                let mut xp = x.clone();
                xp.as_mut_slice()[idx] += h;
                let mut xm = x.clone();
                xm.as_mut_slice()[idx] -= h;
                let (evp, _) =
                    eval_objective(&det, &params, &xp, &gt, 1, objective, &c, &clean_j, false)
                        .unwrap();
                let (evm, _) =
                    eval_objective(&det, &params, &xm, &gt, 1, objective, &c, &clean_j, false)
                        .unwrap();
                let fd = (evp.value - evm.value) / (2.0 * h);
                let denom = an.abs().max(fd.abs());
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "{objective:?} pixel {idx}: {an} vs {fd}"
                );
                checked += 1;
                if checked >= 12 {
                    break;
                }
            }
            assert!(checked >= 5, "{objective:?}: too few informative pixels");
        }
    }
}
