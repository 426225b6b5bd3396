//! Axis-aligned boxes in pixel coordinates and intersection-over-union,
//! including the analytic IoU derivative used by the localisation loss.

use serde::{Deserialize, Serialize};

/// An axis-aligned box `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: Box2D, b: Box2D) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU plus its gradient with respect to the first box's corners
/// `(x1, y1, x2, y2)`. Piecewise-smooth; at corner ties the inner branch is
/// taken in the same direction as the forward `max`/`min` evaluation.
pub fn iou_with_grad(a: Box2D, b: Box2D) -> (f64, [f64; 4]) {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let area_a = a.area();
    let union = area_a + b.area() - inter;
    if union < 1e-9 {
        return (0.0, [0.0; 4]);
    }
    let v = inter / union;

    // d inter / d a-corner: only when the a-corner is the binding one.
    let di = [
        if a.x1 > b.x1 { -ih } else { 0.0 },
        if a.y1 > b.y1 { -iw } else { 0.0 },
        if a.x2 < b.x2 { ih } else { 0.0 },
        if a.y2 < b.y2 { iw } else { 0.0 },
    ];
    let (w, h) = (a.width(), a.height());
    let da = [-h, -w, h, w];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        grad[k] = (di[k] * union - inter * du) / (union * union);
    }
    (v, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_identical_and_disjoint() {
        let b = Box2D::new(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(b, b), 1.0);
        let far = Box2D::new(40.0, 40.0, 50.0, 50.0);
        assert_eq!(iou(b, far), 0.0);
    }

    #[test]
    fn iou_hand_case() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2D::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(a, b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 300 {
            let a = Box2D::new(
                10.0 * rng.random::<f64>(),
                10.0 * rng.random::<f64>(),
                10.0 + 10.0 * rng.random::<f64>(),
                10.0 + 10.0 * rng.random::<f64>(),
            );
            let b = Box2D::new(
                10.0 * rng.random::<f64>(),
                10.0 * rng.random::<f64>(),
                10.0 + 10.0 * rng.random::<f64>(),
                10.0 + 10.0 * rng.random::<f64>(),
            );
            if iou(a, b) < 1e-3 {
                continue;
            }
            // Skip near-ties between corresponding corners where the
            // piecewise branch flips inside the FD stencil.
            if (a.x1 - b.x1).abs() < 1e-3
                || (a.y1 - b.y1).abs() < 1e-3
                || (a.x2 - b.x2).abs() < 1e-3
                || (a.y2 - b.y2).abs() < 1e-3
            {
                continue;
            }
            let (_, grad) = iou_with_grad(a, b);
            for k in 0..4 {
                let bump = |e: f64| {
                    let mut c = a;
                    match k {
                        0 => c.x1 += e,
                        1 => c.y1 += e,
                        2 => c.x2 += e,
                        _ => c.y2 += e,
                    }
                    iou(c, b)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let denom = grad[k].abs().max(fd.abs()).max(1e-9);
                assert!(
                    (grad[k] - fd).abs() / denom < 1e-4,
                    "corner {k}: {} vs {fd}",
                    grad[k]
                );
            }
            checked += 1;
        }
    }
}
