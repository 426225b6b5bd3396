//! Executable checks of the score-margin algebra: order consistency of the
//! surrogates, gradient-dilution alignment bounds, the classification-損失
//! misalignment witness, entropy bounds of the concentration penalty, the
//! exact gate decomposition and its envelope, the repaired-margin exclusion
//! and its stability corollary, and the confidence-weighting inequality.
//!
//! Each check reports a pass flag, counts, and a witness for the first
//! violation so a broken build points straight at the failing inputs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::gate::lse_decomposition;
use crate::margin::{
    attack_branch_losses, compute_margins, defense_branch_losses, stable_sigmoid,
    summarize_scores, SurrogateConfig,
};

#[derive(Debug, Clone, Serialize)]
pub struct PropResult {
    pub name: String,
    pub pass: bool,
    pub checked: usize,
    pub violations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
    pub elapsed_secs: f64,
}

impl PropResult {
    fn finish(
        name: &str,
        checked: usize,
        violations: usize,
        witness: Option<String>,
        t0: Instant,
    ) -> Self {
        Self {
            name: name.into(),
            pass: violations == 0,
            checked,
            violations,
            witness,
            elapsed_secs: t0.elapsed().as_secs_f64(),
        }
    }
}

/// Order consistency: for every margin/surrogate pair, a larger margin means
/// a strictly smaller loss.
pub fn check_order_consistency(seed: u64, pairs: usize) -> PropResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut witness = None;
    for _ in 0..pairs {
        let c = rng.random_range(2..6);
        let y = rng.random_range(0..c);
        let tau = 0.05 + 0.9 * rng.random::<f64>();
        let beta = 0.25 + 2.0 * rng.random::<f64>();
        let cfg = SurrogateConfig { tau, beta, zeta: 1e-8 };
        let s1: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let s2: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let m1 = compute_margins(summarize_scores(&s1, y).unwrap(), tau);
        let m2 = compute_margins(summarize_scores(&s2, y).unwrap(), tau);
        let (a1, b1, _) = attack_branch_losses(&s1, y, &cfg).unwrap();
        let (a2, b2, _) = attack_branch_losses(&s2, y, &cfg).unwrap();
        let (r1, u1) = defense_branch_losses(summarize_scores(&s1, y).unwrap(), &cfg);
        let (r2, u2) = defense_branch_losses(summarize_scores(&s2, y).unwrap(), &cfg);
        let cases = [
            ("rma", m1.m_rma, m2.m_rma, a1, a2),
            ("oda", m1.m_oda, m2.m_oda, b1, b2),
            ("rec", m1.m_rec, m2.m_rec, r1, r2),
            ("sup", m1.m_sup, m2.m_sup, u1, u2),
        ];
        for (tag, ma, mb, la, lb) in cases {
            if (ma > mb) != (la < lb) && ma != mb {
                violations += 1;
                witness.get_or_insert_with(|| {
                    format!("{tag}: margins ({ma}, {mb}) vs losses ({la}, {lb})")
                });
            }
        }
    }
    PropResult::finish("A1-order-consistency", pairs * 4, violations, witness, t0)
}

/// Gradient-dilution bound: constructed (target, nuisance) gradient pairs
/// satisfying the inner-product and norm assumptions keep
/// `cos(g_tar, g_tar + g_nui) >= (1 - rho) / (1 + beta)`.
pub fn check_alignment_bound(seed: u64, samples_per_cell: usize) -> PropResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut checked = 0;
    let mut witness = None;
    let dim = 16;
    for &rho in &[0.0f64, 0.25, 0.5] {
        for &beta in &[0.5, 1.0, 2.0] {
            for _ in 0..samples_per_cell {
                let g_tar: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
                let norm = l2(&g_tar);
                if norm < 1e-9 {
                    continue;
                }
                // orthonormal completion of the target direction
                let unit: Vec<f64> = g_tar.iter().map(|v| v / norm).collect();
                let mut perp: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
                let dot: f64 = perp.iter().zip(&unit).map(|(a, b)| a * b).sum();
                for (p, u) in perp.iter_mut().zip(&unit) {
                    *p -= dot * u;
                }
                let pn = l2(&perp);
                if pn < 1e-9 {
                    continue;
                }
                for p in &mut perp {
                    *p /= pn;
                }
                let a_max = rho.min(beta) * norm;
                let a = (2.0 * rng.random::<f64>() - 1.0) * a_max;
                let b_max = ((beta * norm).powi(2) - a * a).max(0.0).sqrt();
                let b = rng.random::<f64>() * b_max;
                let g_all: Vec<f64> = (0..dim)
                    .map(|k| g_tar[k] + a * unit[k] + b * perp[k])
                    .collect();
                let cos = dot_of(&g_tar, &g_all) / (norm * l2(&g_all)).max(1e-300);
                let bound = (1.0 - rho) / (1.0 + beta);
                checked += 1;
                if cos < bound - 1e-9 {
                    violations += 1;
                    witness
                        .get_or_insert_with(|| format!("rho={rho} beta={beta}: cos={cos} < {bound}"));
                }
            }
        }
    }
    // the orthogonal unit-vector case: cos = 1/sqrt(2) >= 0.5
    let cos = 1.0 / 2.0f64.sqrt();
    checked += 1;
    if !(cos >= 0.5 && (cos - 0.7071).abs() < 1e-3) {
        violations += 1;
        witness.get_or_insert_with(|| format!("orthogonal case cos = {cos}"));
    }
    PropResult::finish("A2-alignment-bound", checked, violations, witness, t0)
}

/// Misalignment witness: in the two-competing-class configuration with
/// `grad z_c1 = e1`, `grad z_c2 = e2`, `grad z_y = 0`, the ascent direction
/// of the classification loss stays measurably non-collinear with the
/// strongest-class direction. The grid keeps both logits non-positive and
/// the weaker score at or above 0.05, where the separation provably holds.
pub fn check_misalignment_witness() -> PropResult {
    let t0 = Instant::now();
    let mut violations = 0;
    let mut checked = 0;
    let mut witness = None;
    let zs: Vec<f64> = (0..=30).map(|i| -3.0 + 0.1 * i as f64).collect();
    for &z1 in &zs {
        for &z2 in &zs {
            if z2 > z1 {
                continue;
            }
            let s1 = stable_sigmoid(z1);
            let s2 = stable_sigmoid(z2);
            if s2 < 0.05 {
                continue;
            }
            // ascent direction s1*e1 + s2*e2 against the RMA direction e1
            let cos = s1 / (s1 * s1 + s2 * s2).sqrt();
            checked += 1;
            if !(cos < 1.0 - 1e-3) {
                violations += 1;
                witness.get_or_insert_with(|| format!("z1={z1} z2={z2}: cos={cos}"));
            }
        }
    }
    PropResult::finish("A3-misalignment-witness", checked, violations, witness, t0)
}

/// Entropy bounds of the concentration penalty: values stay in
/// `[0, ln(C-1)]` and the extremes are attained at one-hot and uniform
/// non-target distributions.
pub fn check_entropy_bounds(seed: u64, samples: usize) -> PropResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SurrogateConfig {
        tau: 0.25,
        beta: 1.0,
        zeta: 1e-8,
    };
    let mut violations = 0;
    let mut witness = None;
    let c = 4;
    let cap = ((c - 1) as f64).ln();
    for _ in 0..samples {
        let y = rng.random_range(0..c);
        let s: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let (_, _, l_con) = attack_branch_losses(&s, y, &cfg).unwrap();
        if !(-1e-6..=cap + 1e-6).contains(&l_con) {
            violations += 1;
            witness.get_or_insert_with(|| format!("scores {s:?} y={y}: l_con={l_con}"));
        }
    }
    // extremes
    let (_, _, one_hot) = attack_branch_losses(&[0.3, 1.0, 0.0, 0.0], 0, &cfg).unwrap();
    if one_hot.abs() > 1e-4 {
        violations += 1;
        witness.get_or_insert_with(|| format!("one-hot l_con = {one_hot}"));
    }
    let (_, _, uniform) = attack_branch_losses(&[0.3, 0.5, 0.5, 0.5], 0, &cfg).unwrap();
    if (uniform - cap).abs() > 1e-4 {
        violations += 1;
        witness.get_or_insert_with(|| format!("uniform l_con = {uniform} vs {cap}"));
    }
    PropResult::finish("A4-entropy-bounds", samples + 2, violations, witness, t0)
}

/// Exact decomposition of the gated objective, parameterized over the
/// decomposition under test so a harness self-test can inject a bug.
pub fn check_decomposition_with(
    seed: u64,
    samples: usize,
    decompose: impl Fn(f64, f64) -> (f64, f64, f64),
) -> PropResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut witness = None;
    for _ in 0..samples {
        let a = 20.0 * rng.random::<f64>();
        let b = 20.0 * rng.random::<f64>();
        let (gated, lse, entropy) = decompose(a, b);
        if (gated - (lse + entropy)).abs() >= 1e-9 {
            violations += 1;
            witness.get_or_insert_with(|| {
                format!("(a,b)=({a},{b}): gated={gated} lse={lse} entropy={entropy}")
            });
        }
    }
    PropResult::finish("A5-decomposition", samples, violations, witness, t0)
}

pub fn check_decomposition(seed: u64, samples: usize) -> PropResult {
    check_decomposition_with(seed, samples, |a, b| lse_decomposition(a, b).unwrap())
}

/// Envelope corollary: the gated objective lies between the soft minimum
/// and the soft minimum plus ln 2, gate entropy lies in [0, ln 2], and both
/// the entropy and the gap to `min(a,b)` vanish as the branches separate.
pub fn check_envelope(seed: u64, samples: usize) -> PropResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln2 = std::f64::consts::LN_2;
    let mut violations = 0;
    let mut checked = 0;
    let mut witness = None;
    for _ in 0..samples {
        let a = 20.0 * rng.random::<f64>();
        let b = 20.0 * rng.random::<f64>();
        let (gated, lse, entropy) = lse_decomposition(a, b).unwrap();
        checked += 1;
        if !(lse <= gated + 1e-12 && gated <= lse + ln2 + 1e-12) {
            violations += 1;
            witness.get_or_insert_with(|| format!("envelope broken at ({a},{b})"));
        }
        if !(-1e-12..=ln2 + 1e-12).contains(&entropy) {
            violations += 1;
            witness.get_or_insert_with(|| format!("entropy {entropy} out of range at ({a},{b})"));
        }
    }
    for gap in [30.0, 45.0, 60.0] {
        let base = 3.0;
        let (gated, _, entropy) = lse_decomposition(base, base + gap).unwrap();
        checked += 1;
        if (gated - base).abs() >= 1e-6 || entropy >= 1e-6 {
            violations += 1;
            witness.get_or_insert_with(|| format!("large-gap limit broken at gap {gap}"));
        }
    }
    PropResult::finish("A5.1-envelope", checked, violations, witness, t0)
}

/// Repaired-margin exclusion on the exhaustive 0.01-step score grid.
pub fn check_repaired_margin_grid() -> PropResult {
    let t0 = Instant::now();
    let mut violations = 0;
    let mut checked = 0;
    let mut witness = None;
    for gi in 0..=100 {
        let s_gt = gi as f64 * 0.01;
        for oi in 0..=100 {
            let s_oth = oi as f64 * 0.01;
            for ti in 1..100 {
                let tau = ti as f64 * 0.01;
                let m = (s_gt - tau).min(tau - s_oth);
                if m > 0.0 {
                    checked += 1;
                    if !(s_gt > tau && s_oth < tau) {
                        violations += 1;
                        witness.get_or_insert_with(|| {
                            format!("s_gt={s_gt} s_oth={s_oth} tau={tau}")
                        });
                    }
                }
            }
        }
    }
    PropResult::finish("A6-repaired-margin", checked, violations, witness, t0)
}

/// Local stability corollary on a linear score model with known Lipschitz
/// constant: perturbations below `margin / L` preserve both repaired
/// inequalities.
pub fn check_margin_stability(seed: u64, samples: usize) -> PropResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut checked = 0;
    let mut witness = None;
    let dim = 8;
    let tau = 0.25;
    for _ in 0..samples {
        let w_gt: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let w_oth: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let lipschitz = l2(&w_gt).max(l2(&w_oth));
        if lipschitz < 1e-9 {
            continue;
        }
        let gamma = 0.02 + 0.2 * rng.random::<f64>();
        let s0_gt = tau + gamma + 0.3 * rng.random::<f64>();
        let s0_oth = tau - gamma - 0.1 * rng.random::<f64>();
        let margin = (s0_gt - tau).min(tau - s0_oth);
        // any eta strictly inside the margin/L ball
        let dir: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let dn = l2(&dir);
        if dn < 1e-9 {
            continue;
        }
        let radius = 0.999 * margin / lipschitz * rng.random::<f64>();
        let eta: Vec<f64> = dir.iter().map(|v| v / dn * radius).collect();
        let s_gt = s0_gt + dot_of(&w_gt, &eta);
        let s_oth = s0_oth + dot_of(&w_oth, &eta);
        checked += 1;
        if !(s_gt > tau && s_oth < tau) {
            violations += 1;
            witness.get_or_insert_with(|| {
                format!("gamma={margin} L={lipschitz} radius={radius}: s_gt={s_gt} s_oth={s_oth}")
            });
        }
    }
    PropResult::finish("A6.1-margin-stability", checked, violations, witness, t0)
}

/// Confidence weighting never lowers expected informativeness when
/// confidence and informativeness are non-negatively correlated.
pub fn check_fws_informativeness(seed: u64, populations: usize) -> PropResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut checked = 0;
    let mut witness = None;
    while checked < populations {
        let m = rng.random_range(2..20);
        let c: Vec<f64> = (0..m).map(|_| 0.05 + rng.random::<f64>()).collect();
        let q: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let (c, q) = if rng.random::<f64>() < 0.5 {
            // comonotone arrangement has non-negative covariance
            let mut cs = c.clone();
            let mut qs = q.clone();
            cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            qs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (cs, qs)
        } else {
            (c, q)
        };
        let mean_c = c.iter().sum::<f64>() / m as f64;
        let mean_q = q.iter().sum::<f64>() / m as f64;
        let cov = c
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - mean_c) * (b - mean_q))
            .sum::<f64>()
            / m as f64;
        if cov < 0.0 {
            continue;
        }
        let weighted = dot_of(&c, &q) / c.iter().sum::<f64>();
        checked += 1;
        if weighted < mean_q - 1e-12 {
            violations += 1;
            witness.get_or_insert_with(|| format!("c={c:?} q={q:?}: {weighted} < {mean_q}"));
        }
    }
    // hand case: c = [1,2], q = [0.2, 0.8] gives 0.6 >= 0.5
    let weighted: f64 = (1.0 * 0.2 + 2.0 * 0.8) / 3.0;
    checked += 1;
    if (weighted - 0.6).abs() > 1e-12 || weighted < 0.5 {
        violations += 1;
        witness.get_or_insert_with(|| format!("hand case weighted = {weighted}"));
    }
    PropResult::finish("A7-fws-informativeness", checked, violations, witness, t0)
}

/// Runs every proposition and corollary check at the counts the toolkit
/// treats as canonical.
pub fn run_all(seed: u64) -> Vec<PropResult> {
    vec![
        check_order_consistency(seed, 10_000),
        check_alignment_bound(seed.wrapping_add(1), 112),
        check_misalignment_witness(),
        check_entropy_bounds(seed.wrapping_add(2), 10_000),
        check_decomposition(seed.wrapping_add(3), 10_000),
        check_envelope(seed.wrapping_add(4), 10_000),
        check_repaired_margin_grid(),
        check_margin_stability(seed.wrapping_add(5), 10_000),
        check_fws_informativeness(seed.wrapping_add(6), 1_000),
    ]
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot_of(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::soft_gate;

    #[test]
    fn all_props_pass() {
        for r in run_all(2024) {
            assert!(
                r.pass,
                "{} failed with witness {:?}",
                r.name, r.witness
            );
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn soft_gate_matches_decomposition_weights() {
        let g = soft_gate(2.0, 5.0).unwrap();
        let (gated, _, _) = lse_decomposition(2.0, 5.0).unwrap();
        assert!((g.g_rma * 2.0 + g.g_oda * 5.0 - gated).abs() < 1e-12);
    }

    #[test]
    fn injected_sign_bug_is_caught_with_witness() {
        // self-test of the harness: flip the entropy sign and A5 must fail
        let r = check_decomposition_with(7, 100, |a, b| {
            let (gated, lse, entropy) = lse_decomposition(a, b).unwrap();
            (gated, lse, -entropy)
        });
        assert!(!r.pass);
        assert!(r.witness.is_some());
        assert!(r.violations > 0);
    }
}
