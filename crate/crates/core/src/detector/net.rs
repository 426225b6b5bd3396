//! The tiny dense detector: three stride-2 convolutions (3x3 then two 5x5,
//! for a 27-pixel receptive field that covers the largest objects) with
//! leaky-ReLU activations and a 1x1 prediction head emitting, per grid
//! cell, four box parameters plus one logit per class. Forward and backward passes are
//! hand-rolled in f64 so gradients with respect to both the input image and
//! the parameters are exact.
//!
//! Parameter groups: the first two convolutions form the `backbone` group,
//! the final convolution and the 1x1 predictor form the `head` group.
//! Freezing is applied per group by the optimizers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::Box2D;
use crate::image::{Image, CHANNELS};
use crate::margin::stable_sigmoid;

use super::{DetectorError, PredictionSet};

pub const IMAGE_SIZE: usize = 64;
pub const GRID: usize = 8;
pub const CELL: f64 = (IMAGE_SIZE / GRID) as f64;
pub const NUM_PREDICTIONS: usize = GRID * GRID;

const LEAKY_SLOPE: f64 = 0.1;
/// Initial bias on class logits; starts scores near 0.05 so background cells
/// are not penalized heavily at step one.
const CLASS_BIAS_INIT: f64 = -3.0;
/// Box centers can move up to `CENTER_REACH` pixels away from their own
/// cell center, so every cell assigned to an object can represent that
/// object's box exactly.
const CENTER_REACH: f64 = 16.0;
/// Starts predicted sizes around 19 px.
const SIZE_BIAS_INIT: f64 = -1.2;
/// Floor on decoded box extent; keeps every prediction overlapping whatever
/// object contains its cell, so the IoU loss never loses its gradient to a
/// collapsed box.
const MIN_DECODED_SIZE: f64 = 6.0;

pub(crate) const C1: usize = 8;
pub(crate) const C2: usize = 16;
pub(crate) const C3: usize = 32;

/// A plain convolution layer. `k == 3` layers use stride 2 and padding 1;
/// `k == 1` layers are pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConvLayer {
    fn zeros(cout: usize, cin: usize, k: usize) -> Self {
        Self {
            cout,
            cin,
            k,
            w: vec![0.0; cout * cin * k * k],
            b: vec![0.0; cout],
        }
    }

    fn he_init(cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(cout, cin, k);
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        for w in &mut layer.w {
            *w = std * gauss(rng);
        }
        layer
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin + ci) * self.k + ky) * self.k + kx
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms; keeps initialization reproducible across
    // platforms for a fixed seed.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Which parameter group a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// The full trainable parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub head: ConvLayer,
    pub num_classes: usize,
}

impl DetectorParams {
    pub fn init(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = ConvLayer::he_init(4 + num_classes, C3, 1, &mut rng);
        // Start box sizes near typical object scale rather than half the image.
        head.b[2] = SIZE_BIAS_INIT;
        head.b[3] = SIZE_BIAS_INIT;
        for c in 0..num_classes {
            head.b[4 + c] = CLASS_BIAS_INIT;
        }
        Self {
            conv1: ConvLayer::he_init(C1, CHANNELS, 3, &mut rng),
            conv2: ConvLayer::he_init(C2, C1, 5, &mut rng),
            conv3: ConvLayer::he_init(C3, C2, 5, &mut rng),
            head,
            num_classes,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: ConvLayer::zeros(C1, CHANNELS, 3),
            conv2: ConvLayer::zeros(C2, C1, 5),
            conv3: ConvLayer::zeros(C3, C2, 5),
            head: ConvLayer::zeros(4 + self.num_classes, C3, 1),
            num_classes: self.num_classes,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn layers(&self) -> [&ConvLayer; 4] {
        [&self.conv1, &self.conv2, &self.conv3, &self.head]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvLayer; 4] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.head,
        ]
    }

    pub fn layer_groups() -> [ParamGroup; 4] {
        [
            ParamGroup::Backbone,
            ParamGroup::Backbone,
            ParamGroup::Head,
            ParamGroup::Head,
        ]
    }

    /// `self += scale * other`, applied only to layers whose group passes the
    /// filter. Used for both SGD updates and gradient accumulation.
    pub fn axpy(&mut self, scale: f64, other: &Self, include: impl Fn(ParamGroup) -> bool) {
        let groups = Self::layer_groups();
        let others = other.layers();
        for (i, layer) in self.layers_mut().into_iter().enumerate() {
            if !include(groups[i]) {
                continue;
            }
            for (w, ow) in layer.w.iter_mut().zip(&others[i].w) {
                *w += scale * ow;
            }
            for (b, ob) in layer.b.iter_mut().zip(&others[i].b) {
                *b += scale * ob;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in self.layers_mut() {
            for w in &mut layer.w {
                *w *= factor;
            }
            for b in &mut layer.b {
                *b *= factor;
            }
        }
    }

    /// Clamps every entry into `[-limit, limit]`.
    pub fn clamp_abs(&mut self, limit: f64) {
        for layer in self.layers_mut() {
            for w in &mut layer.w {
                *w = w.clamp(-limit, limit);
            }
            for b in &mut layer.b {
                *b = b.clamp(-limit, limit);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers()
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    fn from_image(img: &Image) -> Self {
        // Zero-centered inputs condition the first convolution much better
        // than raw [0,1] pixels.
        Self {
            c: CHANNELS,
            h: img.height(),
            w: img.width(),
            data: img.as_slice().iter().map(|&v| v - 0.5).collect(),
        }
    }
}

/// All intermediate activations of one forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: FeatureMap,
    z: [FeatureMap; 3],
    a: [FeatureMap; 3],
    raw: FeatureMap,
}

/// Loss gradient with respect to the decoded outputs of the head: box
/// corners `(x1, y1, x2, y2)` per prediction and raw class logits per
/// prediction. Entries default to zero.
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub d_box: Vec<[f64; 4]>,
    pub d_logits: Vec<Vec<f64>>,
}

impl HeadGrad {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            d_box: vec![[0.0; 4]; NUM_PREDICTIONS],
            d_logits: vec![vec![0.0; num_classes]; NUM_PREDICTIONS],
        }
    }
}

/// Result of a backward pass: the input-image gradient and, when requested,
/// the parameter gradient.
pub struct BackwardResult {
    pub d_input: Image,
    pub d_params: Option<DetectorParams>,
}

/// The fixed tiny architecture; holds only the class count.
#[derive(Debug, Clone, Copy)]
pub struct TinyDetector {
    pub num_classes: usize,
}

impl TinyDetector {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes }
    }

    pub fn forward(
        &self,
        params: &DetectorParams,
        x: &Image,
    ) -> Result<PredictionSet, DetectorError> {
        Ok(self.forward_traced(params, x)?.0)
    }

    pub fn forward_traced(
        &self,
        params: &DetectorParams,
        x: &Image,
    ) -> Result<(PredictionSet, ForwardTrace), DetectorError> {
        if x.height() != IMAGE_SIZE || x.width() != IMAGE_SIZE {
            return Err(DetectorError::InvalidInput(format!(
                "expected {IMAGE_SIZE}x{IMAGE_SIZE} image, got {}x{}",
                x.height(),
                x.width()
            )));
        }
        if params.num_classes != self.num_classes {
            return Err(DetectorError::InvalidInput(format!(
                "parameter class count {} does not match detector {}",
                params.num_classes, self.num_classes
            )));
        }
        let input = FeatureMap::from_image(x);
        let z1 = conv_s2(&input, &params.conv1);
        let a1 = leaky(&z1);
        let z2 = conv_s2(&a1, &params.conv2);
        let a2 = leaky(&z2);
        let z3 = conv_s2(&a2, &params.conv3);
        let a3 = leaky(&z3);
        let raw = conv_1x1(&a3, &params.head);

        let preds = self.decode(&raw);
        let trace = ForwardTrace {
            input,
            z: [z1, z2, z3],
            a: [a1, a2, a3],
            raw,
        };
        Ok((preds, trace))
    }

    fn decode(&self, raw: &FeatureMap) -> PredictionSet {
        let c = self.num_classes;
        let mut boxes = Vec::with_capacity(NUM_PREDICTIONS);
        let mut logits = Vec::with_capacity(NUM_PREDICTIONS);
        for gy in 0..GRID {
            for gx in 0..GRID {
                let tx = raw.data[raw.idx(0, gy, gx)];
                let ty = raw.data[raw.idx(1, gy, gx)];
                let tw = raw.data[raw.idx(2, gy, gx)];
                let th = raw.data[raw.idx(3, gy, gx)];
                let cx = (gx as f64 + 0.5) * CELL + CENTER_REACH * soft_bound(tx);
                let cy = (gy as f64 + 0.5) * CELL + CENTER_REACH * soft_bound(ty);
                let size_span = IMAGE_SIZE as f64 - MIN_DECODED_SIZE;
                let bw = MIN_DECODED_SIZE + size_span * 0.5 * (soft_bound(tw) + 1.0);
                let bh = MIN_DECODED_SIZE + size_span * 0.5 * (soft_bound(th) + 1.0);
                boxes.push(Box2D::new(
                    cx - bw / 2.0,
                    cy - bh / 2.0,
                    cx + bw / 2.0,
                    cy + bh / 2.0,
                ));
                logits.push((0..c).map(|k| raw.data[raw.idx(4 + k, gy, gx)]).collect());
            }
        }
        PredictionSet::from_logits(boxes, logits)
    }

    /// Backpropagates a [`HeadGrad`] through the decode step and the network.
    /// Set `want_param_grads = false` for input-only gradients (PGD).
    pub fn backward(
        &self,
        params: &DetectorParams,
        trace: &ForwardTrace,
        head_grad: &HeadGrad,
        want_param_grads: bool,
    ) -> BackwardResult {
        let mut d_raw = FeatureMap::zeros(4 + self.num_classes, GRID, GRID);
        for gy in 0..GRID {
            for gx in 0..GRID {
                let j = gy * GRID + gx;
                let [dx1, dy1, dx2, dy2] = head_grad.d_box[j];
                let tx = trace.raw.data[trace.raw.idx(0, gy, gx)];
                let ty = trace.raw.data[trace.raw.idx(1, gy, gx)];
                let tw = trace.raw.data[trace.raw.idx(2, gy, gx)];
                let th = trace.raw.data[trace.raw.idx(3, gy, gx)];
                // x1 = cx - bw/2, x2 = cx + bw/2 with
                // cx = cell_center_x + CENTER_REACH*soft_bound(tx),
                // bw = MIN + span*(soft_bound(tw)+1)/2; same structure for y.
                let i = |c: usize| trace.raw.idx(c, gy, gx);
                let size_span = IMAGE_SIZE as f64 - MIN_DECODED_SIZE;
                d_raw.data[i(0)] = (dx1 + dx2) * CENTER_REACH * soft_bound_deriv(tx);
                d_raw.data[i(1)] = (dy1 + dy2) * CENTER_REACH * soft_bound_deriv(ty);
                d_raw.data[i(2)] = (dx2 - dx1) * 0.25 * size_span * soft_bound_deriv(tw);
                d_raw.data[i(3)] = (dy2 - dy1) * 0.25 * size_span * soft_bound_deriv(th);
                for k in 0..self.num_classes {
                    d_raw.data[i(4 + k)] = head_grad.d_logits[j][k];
                }
            }
        }

        let mut d_params = want_param_grads.then(|| params.zeros_like());

        let d_a3 = conv_1x1_backward(
            &trace.a[2],
            &d_raw,
            &params.head,
            d_params.as_mut().map(|p| &mut p.head),
        );
        let d_z3 = leaky_backward(&trace.z[2], &d_a3);
        let d_a2 = conv_s2_backward(
            &trace.a[1],
            &d_z3,
            &params.conv3,
            d_params.as_mut().map(|p| &mut p.conv3),
        );
        let d_z2 = leaky_backward(&trace.z[1], &d_a2);
        let d_a1 = conv_s2_backward(
            &trace.a[0],
            &d_z2,
            &params.conv2,
            d_params.as_mut().map(|p| &mut p.conv2),
        );
        let d_z1 = leaky_backward(&trace.z[0], &d_a1);
        let d_in = conv_s2_backward(
            &trace.input,
            &d_z1,
            &params.conv1,
            d_params.as_mut().map(|p| &mut p.conv1),
        );

        let mut d_input = Image::zeros(IMAGE_SIZE, IMAGE_SIZE);
        d_input.as_mut_slice().copy_from_slice(&d_in.data);
        BackwardResult { d_input, d_params }
    }
}

/// Bounded map `t / (1 + |t|)` onto (-1, 1). Unlike a sigmoid its gradient
/// decays only quadratically, so an overshot box parameter can always pull
/// itself back out of the tail.
#[inline]
fn soft_bound(t: f64) -> f64 {
    t / (1.0 + t.abs())
}

#[inline]
fn soft_bound_deriv(t: f64) -> f64 {
    let d = 1.0 + t.abs();
    1.0 / (d * d)
}

fn leaky(z: &FeatureMap) -> FeatureMap {
    let mut out = z.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
    out
}

fn leaky_backward(z: &FeatureMap, d_a: &FeatureMap) -> FeatureMap {
    let mut out = d_a.clone();
    for (g, &zv) in out.data.iter_mut().zip(&z.data) {
        if zv < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    out
}

/// Valid output-column range for one kernel column: `2*ox + kx - pad` must
/// land inside `[0, w)`.
#[inline]
fn ox_range(kx: usize, pad: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(2);
    let hi = if in_w + pad > kx {
        ((in_w + pad - 1 - kx) / 2 + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Odd-kernel convolution, stride 2, same-style padding of k/2. Output is
/// h/2 x w/2 for even inputs (64 -> 32 -> 16 -> 8).
fn conv_s2(input: &FeatureMap, layer: &ConvLayer) -> FeatureMap {
    debug_assert_eq!(layer.cin, input.c);
    let k = layer.k;
    let pad = k / 2;
    let oh = input.h / 2;
    let ow = input.w / 2;
    let mut out = FeatureMap::zeros(layer.cout, oh, ow);
    for co in 0..layer.cout {
        let base = out.idx(co, 0, 0);
        for v in &mut out.data[base..base + oh * ow] {
            *v = layer.b[co];
        }
        for ci in 0..input.c {
            for ky in 0..k {
                let (oy_lo, oy_hi) = ox_range(ky, pad, input.h, oh);
                for kx in 0..k {
                    let w = layer.w[layer.widx(co, ci, ky, kx)];
                    let (ox_lo, ox_hi) = ox_range(kx, pad, input.w, ow);
                    for oy in oy_lo..oy_hi {
                        let iy = 2 * oy + ky - pad;
                        let in_row = input.idx(ci, iy, 0) + kx;
                        let out_row = out.idx(co, oy, 0);
                        let src = &input.data[(in_row + 2 * ox_lo) - pad..];
                        let dst = &mut out.data[out_row + ox_lo..out_row + ox_hi];
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d += w * src[2 * i];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_s2_backward(
    input: &FeatureMap,
    d_out: &FeatureMap,
    layer: &ConvLayer,
    mut d_layer: Option<&mut ConvLayer>,
) -> FeatureMap {
    let mut d_in = FeatureMap::zeros(input.c, input.h, input.w);
    let k = layer.k;
    let pad = k / 2;
    let (oh, ow) = (d_out.h, d_out.w);
    for co in 0..layer.cout {
        if let Some(dl) = d_layer.as_deref_mut() {
            let base = d_out.idx(co, 0, 0);
            dl.b[co] += d_out.data[base..base + oh * ow].iter().sum::<f64>();
        }
        for ci in 0..input.c {
            for ky in 0..k {
                let (oy_lo, oy_hi) = ox_range(ky, pad, input.h, oh);
                for kx in 0..k {
                    let w = layer.w[layer.widx(co, ci, ky, kx)];
                    let (ox_lo, ox_hi) = ox_range(kx, pad, input.w, ow);
                    let mut dw = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = 2 * oy + ky - pad;
                        let row0 = (input.idx(ci, iy, 0) + kx + 2 * ox_lo) - pad;
                        let out_row = d_out.idx(co, oy, 0);
                        let gs = &d_out.data[out_row + ox_lo..out_row + ox_hi];
                        let src = &input.data[row0..];
                        let dst = &mut d_in.data[row0..];
                        for (i, &g) in gs.iter().enumerate() {
                            dst[2 * i] += w * g;
                            dw += g * src[2 * i];
                        }
                    }
                    if let Some(dl) = d_layer.as_deref_mut() {
                        dl.w[layer.widx(co, ci, ky, kx)] += dw;
                    }
                }
            }
        }
    }
    d_in
}

fn conv_1x1(input: &FeatureMap, layer: &ConvLayer) -> FeatureMap {
    debug_assert_eq!(layer.k, 1);
    let n = input.h * input.w;
    let mut out = FeatureMap::zeros(layer.cout, input.h, input.w);
    for co in 0..layer.cout {
        let ob = co * n;
        for v in &mut out.data[ob..ob + n] {
            *v = layer.b[co];
        }
        for ci in 0..input.c {
            let w = layer.w[co * layer.cin + ci];
            let ib = ci * n;
            for i in 0..n {
                out.data[ob + i] += w * input.data[ib + i];
            }
        }
    }
    out
}

fn conv_1x1_backward(
    input: &FeatureMap,
    d_out: &FeatureMap,
    layer: &ConvLayer,
    mut d_layer: Option<&mut ConvLayer>,
) -> FeatureMap {
    let n = input.h * input.w;
    let mut d_in = FeatureMap::zeros(input.c, input.h, input.w);
    for co in 0..layer.cout {
        let ob = co * n;
        if let Some(dl) = d_layer.as_deref_mut() {
            dl.b[co] += d_out.data[ob..ob + n].iter().sum::<f64>();
        }
        for ci in 0..input.c {
            let w = layer.w[co * layer.cin + ci];
            let ib = ci * n;
            let mut dw = 0.0;
            for i in 0..n {
                let g = d_out.data[ob + i];
                d_in.data[ib + i] += w * g;
                dw += g * input.data[ib + i];
            }
            if let Some(dl) = d_layer.as_deref_mut() {
                dl.w[co * layer.cin + ci] += dw;
            }
        }
    }
    d_in
}
