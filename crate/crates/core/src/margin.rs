//! Score-threshold algebra: per-prediction score summaries, the four signed
//! margins around the detection threshold, and the softplus surrogate losses
//! used by both the attack branches and the defence terms.
//!
//! All functions here are pure and operate on plain `f64` score vectors, so
//! they are safe to call from any thread.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarginError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Per-prediction class-score extremes relative to a ground-truth class:
/// the ground-truth score, the highest non-target score, and the overall max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreSummary {
    pub s_gt: f64,
    pub s_oth: f64,
    pub s_max: f64,
}

/// The four signed threshold margins derived from a [`ScoreSummary`].
///
/// Sign conventions: `m_rma >= 0` means some non-target class clears the
/// threshold, `m_oda >= 0` means every class sits at or below it, `m_rec >= 0`
/// means the ground-truth class clears it, and `m_sup >= 0` means no
/// non-target class does. By construction `m_rma == -m_sup`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginBundle {
    pub m_rma: f64,
    pub m_oda: f64,
    pub m_rec: f64,
    pub m_sup: f64,
}

/// Shape and threshold parameters shared by every surrogate loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    /// Detection score threshold, strictly inside (0, 1).
    pub tau: f64,
    /// Softplus shape parameter, > 0. At `beta = 1` the surrogate is the
    /// plain softplus.
    pub beta: f64,
    /// Stabiliser added inside the entropy logarithm, > 0.
    pub zeta: f64,
}

impl SurrogateConfig {
    pub fn new(tau: f64, beta: f64, zeta: f64) -> Result<Self, MarginError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(MarginError::InvalidConfig(format!(
                "tau must lie strictly in (0,1), got {tau}"
            )));
        }
        if !(beta > 0.0) {
            return Err(MarginError::InvalidConfig(format!(
                "beta must be > 0, got {beta}"
            )));
        }
        if !(zeta > 0.0) {
            return Err(MarginError::InvalidConfig(format!(
                "zeta must be > 0, got {zeta}"
            )));
        }
        Ok(Self { tau, beta, zeta })
    }
}

/// Minimum total non-target score mass below which the concentration loss is
/// defined to be exactly zero (no mass to concentrate).
pub const CON_MASS_FLOOR: f64 = 1e-12;

/// Stable evaluation of the shaped softplus `(1/beta) * ln(1 + exp(beta*t))`.
///
/// Evaluated as `max(t, 0) + (1/beta) * ln(1 + exp(-beta*|t|))` so the
/// exponential argument is never positive; stable for `|beta*t|` well past
/// 700. Strictly positive and strictly increasing in `t`.
pub fn shaped_softplus(t: f64, beta: f64) -> Result<f64, MarginError> {
    if !(beta > 0.0) {
        return Err(MarginError::InvalidConfig(format!(
            "beta must be > 0, got {beta}"
        )));
    }
    Ok(sp(t, beta))
}

pub(crate) fn sp(t: f64, beta: f64) -> f64 {
    t.max(0.0) + (-beta * t.abs()).exp().ln_1p() / beta
}

/// Derivative of the shaped softplus with respect to `t`: the logistic
/// `sigmoid(beta * t)`, evaluated stably.
pub(crate) fn sp_deriv(t: f64, beta: f64) -> f64 {
    stable_sigmoid(beta * t)
}

pub(crate) fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Reduces a class-score vector to its extremes for ground-truth class `y`.
///
/// Requires at least two classes (the highest non-target score is undefined
/// otherwise) and `y < C`.
pub fn summarize_scores(scores: &[f64], y: usize) -> Result<ScoreSummary, MarginError> {
    let c = scores.len();
    if c < 2 {
        return Err(MarginError::InvalidInput(format!(
            "need at least 2 classes, got {c}"
        )));
    }
    if y >= c {
        return Err(MarginError::InvalidInput(format!(
            "class index {y} out of range for {c} classes"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MarginError::InvalidInput("non-finite score".into()));
    }
    let s_gt = scores[y];
    let mut s_oth = f64::NEG_INFINITY;
    for (c_idx, &s) in scores.iter().enumerate() {
        if c_idx != y && s > s_oth {
            s_oth = s;
        }
    }
    let s_max = s_gt.max(s_oth);
    Ok(ScoreSummary { s_gt, s_oth, s_max })
}

/// The four signed margins around the threshold `tau`.
pub fn compute_margins(summary: ScoreSummary, tau: f64) -> MarginBundle {
    MarginBundle {
        m_rma: summary.s_oth - tau,
        m_oda: tau - summary.s_max,
        m_rec: summary.s_gt - tau,
        m_sup: tau - summary.s_oth,
    }
}

/// The three attack-branch losses for one prediction: the misclassification
/// surrogate, the disappearance surrogate, and the concentration penalty over
/// normalized non-target scores.
///
/// When the total non-target mass is below [`CON_MASS_FLOOR`] the
/// concentration term is zero by convention. The raw entropy can dip to
/// `-zeta` next to a one-hot distribution because of the stabiliser, so the
/// returned value is clamped at zero.
pub fn attack_branch_losses(
    scores: &[f64],
    y: usize,
    cfg: &SurrogateConfig,
) -> Result<(f64, f64, f64), MarginError> {
    let summary = summarize_scores(scores, y)?;
    let l_rma = sp(cfg.tau - summary.s_oth, cfg.beta);
    let l_oda = sp(summary.s_max - cfg.tau, cfg.beta);
    let l_con = concentration_loss(scores, y, cfg.zeta);
    Ok((l_rma, l_oda, l_con))
}

fn concentration_loss(scores: &[f64], y: usize, zeta: f64) -> f64 {
    let mass: f64 = scores
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != y)
        .map(|(_, &s)| s)
        .sum();
    if mass < CON_MASS_FLOOR {
        return 0.0;
    }
    let mut h = 0.0;
    for (c, &s) in scores.iter().enumerate() {
        if c == y {
            continue;
        }
        let p = s / mass;
        if p > 0.0 {
            h -= p * (p + zeta).ln();
        }
    }
    h.max(0.0)
}

/// The two defence-side losses for one prediction: recovery of the
/// ground-truth score above the threshold and suppression of the strongest
/// non-target score below it.
pub fn defense_branch_losses(summary: ScoreSummary, cfg: &SurrogateConfig) -> (f64, f64) {
    let l_rec = sp(cfg.tau - summary.s_gt, cfg.beta);
    let l_sup = sp(summary.s_oth - cfg.tau, cfg.beta);
    (l_rec, l_sup)
}

/// Analytic gradients of the five surrogate losses with respect to the score
/// vector, for one prediction. Gradients at max-ties follow "first argmax
/// wins", matching the forward evaluation.
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub d_rma: Vec<f64>,
    pub d_oda: Vec<f64>,
    pub d_con: Vec<f64>,
    pub d_rec: Vec<f64>,
    pub d_sup: Vec<f64>,
}

pub fn branch_loss_grads(
    scores: &[f64],
    y: usize,
    cfg: &SurrogateConfig,
) -> Result<BranchGrads, MarginError> {
    let c = scores.len();
    let summary = summarize_scores(scores, y)?;
    let oth_idx = argmax_excluding(scores, y);
    let max_idx = if summary.s_gt >= summary.s_oth { y } else { oth_idx };

    let mut d_rma = vec![0.0; c];
    d_rma[oth_idx] = -sp_deriv(cfg.tau - summary.s_oth, cfg.beta);

    let mut d_oda = vec![0.0; c];
    d_oda[max_idx] = sp_deriv(summary.s_max - cfg.tau, cfg.beta);

    let mut d_rec = vec![0.0; c];
    d_rec[y] = -sp_deriv(cfg.tau - summary.s_gt, cfg.beta);

    let mut d_sup = vec![0.0; c];
    d_sup[oth_idx] = sp_deriv(summary.s_oth - cfg.tau, cfg.beta);

    let d_con = concentration_grad(scores, y, cfg.zeta);

    Ok(BranchGrads {
        d_rma,
        d_oda,
        d_con,
        d_rec,
        d_sup,
    })
}

fn argmax_excluding(scores: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (c, &s) in scores.iter().enumerate() {
        if c != y && s > best_v {
            best_v = s;
            best = c;
        }
    }
    best
}

fn concentration_grad(scores: &[f64], y: usize, zeta: f64) -> Vec<f64> {
    let c = scores.len();
    let mut grad = vec![0.0; c];
    let mass: f64 = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, &s)| s)
        .sum();
    if mass < CON_MASS_FLOOR {
        return grad;
    }
    // phi(p) = -sum_c p_c ln(p_c + zeta); dphi/dp_c = -ln(p_c + zeta) - p_c/(p_c + zeta).
    // With p_c = s_c / mass: dL/ds_k = (1/mass) * (dphi_k - sum_c p_c dphi_c).
    let mut dphi = vec![0.0; c];
    let mut weighted = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        if i == y {
            continue;
        }
        let p = s / mass;
        dphi[i] = -(p + zeta).ln() - p / (p + zeta);
        weighted += p * dphi[i];
    }
    // The clamp in concentration_loss only binds within ~zeta of one-hot;
    // there the true gradient is treated as zero.
    let raw: f64 = {
        let mut h = 0.0;
        for (i, &s) in scores.iter().enumerate() {
            if i != y {
                let p = s / mass;
                if p > 0.0 {
                    h -= p * (p + zeta).ln();
                }
            }
        }
        h
    };
    if raw <= 0.0 {
        return grad;
    }
    for (i, g) in grad.iter_mut().enumerate() {
        if i != y {
            *g = (dphi[i] - weighted) / mass;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn cfg(tau: f64, beta: f64) -> SurrogateConfig {
        SurrogateConfig::new(tau, beta, 1e-8).unwrap()
    }

    #[test]
    fn softplus_at_origin() {
        assert!((shaped_softplus(0.0, 1.0).unwrap() - LN2).abs() < 1e-12);
        assert!((shaped_softplus(0.0, 0.5).unwrap() - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn softplus_deep_negative_tail_is_stable() {
        let v = shaped_softplus(-20.0, 1.0).unwrap();
        assert!((v - 2.061153620314381e-9).abs() < 1e-15);
        // Extreme arguments must neither overflow nor underflow to negative.
        let big = shaped_softplus(800.0, 1.0).unwrap();
        assert!((big - 800.0).abs() < 1e-9);
        let tiny = shaped_softplus(-800.0, 1.0).unwrap();
        assert!(tiny >= 0.0 && tiny < 1e-300);
    }

    #[test]
    fn softplus_rejects_nonpositive_beta() {
        assert!(matches!(
            shaped_softplus(0.3, 0.0),
            Err(MarginError::InvalidConfig(_))
        ));
        assert!(matches!(
            shaped_softplus(0.3, -1.0),
            Err(MarginError::InvalidConfig(_))
        ));
    }

    #[test]
    fn softplus_approaches_relu_for_large_beta() {
        for &t in &[-5.0, -1.0, -0.1, 0.1, 1.0, 5.0] {
            let v = shaped_softplus(t, 100.0).unwrap();
            assert!(
                (v - t.max(0.0)).abs() < 0.01,
                "beta=100 t={t} v={v}"
            );
        }
    }

    #[test]
    fn summarize_scores_examples() {
        let s = summarize_scores(&[0.9, 0.05, 0.02], 0).unwrap();
        assert_eq!(
            s,
            ScoreSummary {
                s_gt: 0.9,
                s_oth: 0.05,
                s_max: 0.9
            }
        );
        let s = summarize_scores(&[0.3, 0.7, 0.1], 1).unwrap();
        assert_eq!(
            s,
            ScoreSummary {
                s_gt: 0.7,
                s_oth: 0.3,
                s_max: 0.7
            }
        );
        let s = summarize_scores(&[0.5, 0.5], 0).unwrap();
        assert_eq!(
            s,
            ScoreSummary {
                s_gt: 0.5,
                s_oth: 0.5,
                s_max: 0.5
            }
        );
    }

    #[test]
    fn summarize_scores_rejects_bad_input() {
        assert!(summarize_scores(&[0.9], 0).is_err());
        assert!(summarize_scores(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn margins_hand_cases() {
        let m = compute_margins(
            ScoreSummary {
                s_gt: 0.9,
                s_oth: 0.05,
                s_max: 0.9,
            },
            0.25,
        );
        assert!((m.m_rma + 0.20).abs() < 1e-12);
        assert!((m.m_oda + 0.65).abs() < 1e-12);
        assert!((m.m_rec - 0.65).abs() < 1e-12);
        assert!((m.m_sup - 0.20).abs() < 1e-12);

        let tau = 0.4;
        let m = compute_margins(
            ScoreSummary {
                s_gt: tau,
                s_oth: tau,
                s_max: tau,
            },
            tau,
        );
        assert_eq!(m.m_rma, 0.0);
        assert_eq!(m.m_oda, 0.0);
        assert_eq!(m.m_rec, 0.0);
        assert_eq!(m.m_sup, 0.0);

        let m = compute_margins(
            ScoreSummary {
                s_gt: 1.0,
                s_oth: 0.0,
                s_max: 1.0,
            },
            0.5,
        );
        assert!((m.m_rma + 0.5).abs() < 1e-12);
        assert!((m.m_oda + 0.5).abs() < 1e-12);
        assert!((m.m_rec - 0.5).abs() < 1e-12);
        assert!((m.m_sup - 0.5).abs() < 1e-12);
    }

    #[test]
    fn margin_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let s: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let tau = 0.01 + 0.98 * rng.random::<f64>();
            let m = compute_margins(summarize_scores(&s, 1).unwrap(), tau);
            assert!((m.m_rma + m.m_sup).abs() < 1e-15);
            // m_rec <= -m_oda follows from s_gt <= s_max.
            assert!(m.m_rec <= -m.m_oda + 1e-15);
        }
    }

    #[test]
    fn attack_losses_hand_case() {
        let c = cfg(0.25, 1.0);
        let (l_rma, l_oda, l_con) = attack_branch_losses(&[0.9, 0.05, 0.02], 0, &c).unwrap();
        assert!((l_rma - 0.7981388693815918).abs() < 1e-9);
        assert!((l_oda - 1.0700553357027152).abs() < 1e-9);
        // non-target mass normalizes to (5/7, 2/7)
        assert!((l_con - 0.5982695885852573).abs() < 1e-6);
    }

    #[test]
    fn concentration_conventions() {
        let c = cfg(0.5, 1.0);
        // one-hot on y: zero non-target mass
        let (_, _, l_con) = attack_branch_losses(&[0.0, 1.0, 0.0, 0.0], 1, &c).unwrap();
        assert_eq!(l_con, 0.0);
        // uniform non-target mass over C-1 = 3 classes: ln 3 at zeta -> 0
        let (_, _, l_con) = attack_branch_losses(&[0.2, 0.9, 0.2, 0.2], 1, &c).unwrap();
        assert!((l_con - 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn defense_losses_hand_cases() {
        let c = cfg(0.25, 1.0);
        let (l_rec, l_sup) = defense_branch_losses(
            ScoreSummary {
                s_gt: 0.9,
                s_oth: 0.05,
                s_max: 0.9,
            },
            &c,
        );
        assert!((l_rec - 0.4200553357027152).abs() < 1e-9);
        assert!((l_sup - 0.5981388693815918).abs() < 1e-9);

        let c = cfg(0.4, 1.0);
        let (l_rec, l_sup) = defense_branch_losses(
            ScoreSummary {
                s_gt: 0.4,
                s_oth: 0.4,
                s_max: 0.4,
            },
            &c,
        );
        assert!((l_rec - LN2).abs() < 1e-12);
        assert!((l_sup - LN2).abs() < 1e-12);

        let c = cfg(0.5, 1.0);
        let (l_rec, l_sup) = defense_branch_losses(
            ScoreSummary {
                s_gt: 1.0,
                s_oth: 0.0,
                s_max: 1.0,
            },
            &c,
        );
        assert!((l_rec - 0.4740769841801067).abs() < 1e-9);
        assert!((l_sup - 0.4740769841801067).abs() < 1e-9);
    }

    #[test]
    fn order_consistency_random_pairs() {
        // Strictly decreasing surrogates preserve margin orderings.
        let mut rng = ChaCha8Rng::seed_from_u64(401);
        let c = cfg(0.35, 1.3);
        for _ in 0..5000 {
            let s1: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let s2: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let y = 2;
            let m1 = compute_margins(summarize_scores(&s1, y).unwrap(), c.tau);
            let m2 = compute_margins(summarize_scores(&s2, y).unwrap(), c.tau);
            let (a1, b1, _) = attack_branch_losses(&s1, y, &c).unwrap();
            let (a2, b2, _) = attack_branch_losses(&s2, y, &c).unwrap();
            let (r1, u1) = defense_branch_losses(summarize_scores(&s1, y).unwrap(), &c);
            let (r2, u2) = defense_branch_losses(summarize_scores(&s2, y).unwrap(), &c);
            assert_eq!(m1.m_rma > m2.m_rma, a1 < a2);
            assert_eq!(m1.m_oda > m2.m_oda, b1 < b2);
            assert_eq!(m1.m_rec > m2.m_rec, r1 < r2);
            assert_eq!(m1.m_sup > m2.m_sup, u1 < u2);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let c = cfg(0.3, 1.7);
        let h = 1e-5;
        for _ in 0..200 {
            // Spread scores out to avoid max ties.
            let mut s: Vec<f64> = (0..4).map(|_| 0.05 + 0.9 * rng.random::<f64>()).collect();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if s.windows(2).any(|w| (w[1] - w[0]).abs() < 1e-3) {
                continue;
            }
            let y = rng.random_range(0..4);
            let g = branch_loss_grads(&s, y, &c).unwrap();
            for k in 0..4 {
                let mut sp_ = s.clone();
                let mut sm = s.clone();
                sp_[k] += h;
                sm[k] -= h;
                let fp = attack_branch_losses(&sp_, y, &c).unwrap();
                let fm = attack_branch_losses(&sm, y, &c).unwrap();
                let dp = defense_branch_losses(summarize_scores(&sp_, y).unwrap(), &c);
                let dm = defense_branch_losses(summarize_scores(&sm, y).unwrap(), &c);
                check_fd(g.d_rma[k], (fp.0 - fm.0) / (2.0 * h), "rma");
                check_fd(g.d_oda[k], (fp.1 - fm.1) / (2.0 * h), "oda");
                check_fd(g.d_con[k], (fp.2 - fm.2) / (2.0 * h), "con");
                check_fd(g.d_rec[k], (dp.0 - dm.0) / (2.0 * h), "rec");
                check_fd(g.d_sup[k], (dp.1 - dm.1) / (2.0 * h), "sup");
            }
        }
    }

    fn check_fd(analytic: f64, fd: f64, name: &str) {
        let denom = analytic.abs().max(fd.abs());
        if denom < 1e-10 {
            return;
        }
        let rel = (analytic - fd).abs() / denom;
        assert!(rel < 1e-5, "{name}: analytic {analytic} vs fd {fd} rel {rel}");
    }

    proptest::proptest! {
        #[test]
        fn softplus_positive_and_increasing(t1 in -50.0f64..50.0, t2 in -50.0f64..50.0, beta in 0.1f64..10.0) {
            let v1 = shaped_softplus(t1, beta).unwrap();
            let v2 = shaped_softplus(t2, beta).unwrap();
            proptest::prop_assert!(v1 > 0.0);
            if t1 < t2 {
                proptest::prop_assert!(v1 < v2);
            }
        }

        #[test]
        fn summary_max_dominates(s in proptest::collection::vec(0.0f64..1.0, 2..8), y_raw in 0usize..8) {
            let y = y_raw % s.len();
            let sum = summarize_scores(&s, y).unwrap();
            proptest::prop_assert!(sum.s_max >= sum.s_gt);
            proptest::prop_assert!(sum.s_max >= sum.s_oth);
            proptest::prop_assert!((sum.s_max - sum.s_gt.max(sum.s_oth)).abs() < 1e-15);
        }
    }
}
