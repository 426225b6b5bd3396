//! The soft branch gate, the per-prediction adversarial loss, and the exact
//! log-sum-exp + entropy decomposition of the gated objective.
//!
//! The gate is a two-way softmax over negated branch losses, so the branch
//! whose threshold condition is closer to satisfaction receives the larger
//! weight. Pure functions throughout.

use thiserror::Error;

use crate::margin::stable_sigmoid;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Gate weights for the two attack branches; always strictly positive and
/// summing to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatePair {
    pub g_rma: f64,
    pub g_oda: f64,
}

/// The three per-prediction branch losses feeding the gated objective:
/// `a` = misclassification, `b` = disappearance, `c` = concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchLosses {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// softmax(-a, -b), computed through the stable two-way logistic form.
/// Each weight gets its own sigmoid so the smaller one keeps full relative
/// precision instead of rounding to `1 - 1.0` at large gaps.
pub fn soft_gate(a: f64, b: f64) -> Result<GatePair, GateError> {
    if !a.is_finite() || !b.is_finite() {
        return Err(GateError::InvalidInput(format!(
            "branch losses must be finite, got ({a}, {b})"
        )));
    }
    Ok(GatePair {
        g_rma: stable_sigmoid(b - a),
        g_oda: stable_sigmoid(a - b),
    })
}

/// The gated per-prediction adversarial loss
/// `g_rma * (a + c) + g_oda * b`.
///
/// The gate sees only `(a, b)`; the concentration term rides on the
/// misclassification branch after gating.
pub fn adv_loss(bl: BranchLosses) -> Result<f64, GateError> {
    let g = soft_gate(bl.a, bl.b)?;
    Ok(g.g_rma * (bl.a + bl.c) + g.g_oda * bl.b)
}

/// Gradient of [`adv_loss`] with respect to `(a, b, c)`, with the gate kept
/// inside the differentiation (the gate weights receive gradient).
pub fn adv_loss_grad(bl: BranchLosses) -> Result<(f64, f64, f64), GateError> {
    let g = soft_gate(bl.a, bl.b)?;
    let gg = g.g_rma * g.g_oda;
    // d g_rma / d a = -g_rma*g_oda ; d g_rma / d b = +g_rma*g_oda.
    let da = g.g_rma + gg * (bl.b - bl.a - bl.c);
    let db = g.g_oda + gg * (bl.a + bl.c - bl.b);
    let dc = g.g_rma;
    Ok((da, db, dc))
}

/// The exact decomposition of the two-branch gated objective:
/// `gated = lse + entropy` where `lse = -ln(exp(-a) + exp(-b))` and
/// `entropy` is the Shannon entropy of the gate.
pub fn lse_decomposition(a: f64, b: f64) -> Result<(f64, f64, f64), GateError> {
    let g = soft_gate(a, b)?;
    let gated = g.g_rma * a + g.g_oda * b;
    // -ln(e^-a + e^-b) = min(a,b) - ln(1 + e^{-|a-b|})
    let lse = a.min(b) - (-(a - b).abs()).exp().ln_1p();
    let entropy = gate_entropy(g);
    Ok((gated, lse, entropy))
}

/// Shannon entropy of a two-way gate, in nats; lies in `[0, ln 2]`.
pub fn gate_entropy(g: GatePair) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(g.g_rma) + term(g.g_oda)
}
