//! Incremental forward passes for occlusion sweeps.
//!
//! Occluding a small patch changes only a bounded region of every
//! convolutional activation. The unoccluded activations are computed once;
//! each patch then recomputes just the affected rectangle layer by layer, and
//! the first dense layer is updated from its cached pre-activation using the
//! rows of its weight matrix that touch changed inputs.

use rayon::prelude::*;

use super::arch::{Activation, LayerSpec, Shape};
use super::network::{conv_from_cols, maxpool_value, relu_in_place, softmax_in_place, two_class_probabilities, Network};
use super::scalar::gemm;
use crate::error::{Error, Result};

/// Half-open pixel rectangle `[r0, r1) x [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Rect {
    fn is_empty(&self) -> bool {
        self.r0 >= self.r1 || self.c0 >= self.c1
    }
}

enum Changed {
    Rect(Rect),
    All,
}

struct Engine<'a> {
    net: &'a Network<f32>,
    /// Eval-mode activations of the unoccluded input; `base[0]` is the input.
    base: Vec<Vec<f32>>,
    base_logits: Vec<f32>,
    /// Index of the first dense layer and its pre-activation on the base input.
    first_dense: Option<(usize, Vec<f32>)>,
}

struct Workspace {
    acts: Vec<Vec<f32>>,
}

impl<'a> Engine<'a> {
    fn new(net: &'a Network<f32>, input: &[f32]) -> Result<Self> {
        let cache = net.forward_batch(input, 1, None)?;
        let base = cache.acts;
        let base_logits = cache.logits;
        let first_dense = net
            .architecture()
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense { .. }))
            .map(|i| {
                let x = &base[i];
                let p = &net.params()[i];
                let units = p.biases.len();
                let mut pre = vec![0.0f32; units];
                gemm(1, x.len(), units, x, false, &p.weights, false, &mut pre, false);
                for (v, &b) in pre.iter_mut().zip(&p.biases) {
                    *v += b;
                }
                (i, pre)
            });
        Ok(Self { net, base, base_logits, first_dense })
    }

    fn workspace(&self) -> Workspace {
        Workspace { acts: self.base.clone() }
    }

    fn shape_in(&self, layer: usize) -> Shape {
        if layer == 0 {
            self.net.architecture().input
        } else {
            self.net.shapes()[layer - 1]
        }
    }

    fn baseline(&self) -> f64 {
        two_class_probabilities(&self.base_logits).1
    }

    /// Cough probability with `rect` of the input set to `fill`.
    fn occluded(&self, ws: &mut Workspace, rect: Rect, fill: f32) -> f64 {
        let layers = &self.net.architecture().layers;
        let input = self.net.architecture().input;
        // (layer activation index, rect in that activation's geometry) to restore
        let mut touched: Vec<(usize, Rect, Shape)> = Vec::with_capacity(layers.len() + 1);
        fill_rect(&mut ws.acts[0], input, rect, fill);
        touched.push((0, rect, input));

        let mut changed = Changed::Rect(rect);
        let mut geom = input;
        let mut out_logits: Option<Vec<f32>> = None;
        let mut dense_x: Vec<f32> = Vec::new();

        for (i, layer) in layers.iter().enumerate() {
            let s_in = self.shape_in(i);
            let s_out = self.net.shapes()[i];
            let p = &self.net.params()[i];
            changed = match (changed, *layer) {
                (Changed::Rect(r), _) if r.is_empty() => {
                    restore(ws, &self.base, &touched);
                    return self.baseline();
                }
                (Changed::Rect(r), LayerSpec::Conv { kernel, .. }) => {
                    let out = Rect {
                        r0: r.r0.saturating_sub(kernel.0 - 1),
                        r1: r.r1.min(s_out.h),
                        c0: r.c0.saturating_sub(kernel.1 - 1),
                        c1: r.c1.min(s_out.w),
                    };
                    let (lo, hi) = ws.acts.split_at_mut(i + 1);
                    conv_rect(&lo[i], &mut hi[0], s_in, s_out, kernel, out, p);
                    touched.push((i + 1, out, s_out));
                    geom = s_out;
                    Changed::Rect(out)
                }
                (Changed::Rect(r), LayerSpec::MaxPool { size }) => {
                    let out = Rect {
                        r0: r.r0 / size.0,
                        r1: r.r1.div_ceil(size.0).min(s_out.h),
                        c0: r.c0 / size.1,
                        c1: r.c1.div_ceil(size.1).min(s_out.w),
                    };
                    let (lo, hi) = ws.acts.split_at_mut(i + 1);
                    for y in out.r0..out.r1 {
                        for x in out.c0..out.c1 {
                            for ch in 0..s_out.c {
                                hi[0][(y * s_out.w + x) * s_out.c + ch] = maxpool_value(&lo[i], s_in, size, y, x, ch);
                            }
                        }
                    }
                    touched.push((i + 1, out, s_out));
                    geom = s_out;
                    Changed::Rect(out)
                }
                (Changed::Rect(r), LayerSpec::Dropout { .. } | LayerSpec::Flatten) => {
                    let (lo, hi) = ws.acts.split_at_mut(i + 1);
                    copy_rect(&lo[i], &mut hi[0], geom, r);
                    touched.push((i + 1, r, geom));
                    Changed::Rect(r)
                }
                (Changed::Rect(r), LayerSpec::Dense { units, activation }) => {
                    let x = &ws.acts[i];
                    let b = &self.base[i];
                    let mut pre = match &self.first_dense {
                        Some((fi, pre)) if *fi == i => pre.clone(),
                        _ => unreachable!("rect changes reach only the first dense layer"),
                    };
                    for y in r.r0..r.r1 {
                        for xx in r.c0..r.c1 {
                            let start = (y * geom.w + xx) * geom.c;
                            for j in start..start + geom.c {
                                let d = x[j] - b[j];
                                if d != 0.0 {
                                    let row = &p.weights[j * units..(j + 1) * units];
                                    for (v, &w) in pre.iter_mut().zip(row) {
                                        *v += d * w;
                                    }
                                }
                            }
                        }
                    }
                    if activation == Activation::Softmax {
                        out_logits = Some(pre.clone());
                    }
                    activate(&mut pre, activation);
                    dense_x = pre;
                    Changed::All
                }
                (Changed::All, LayerSpec::Dense { units, activation }) => {
                    let mut out = vec![0.0f32; units];
                    gemm(1, dense_x.len(), units, &dense_x, false, &p.weights, false, &mut out, false);
                    for (v, &bias) in out.iter_mut().zip(&p.biases) {
                        *v += bias;
                    }
                    if activation == Activation::Softmax {
                        out_logits = Some(out.clone());
                    }
                    activate(&mut out, activation);
                    dense_x = out;
                    Changed::All
                }
                (Changed::All, LayerSpec::Dropout { .. } | LayerSpec::Flatten) => Changed::All,
                (Changed::All, _) => unreachable!("spatial layers never follow a dense layer"),
            };
        }
        restore(ws, &self.base, &touched);
        match out_logits {
            Some(z) => two_class_probabilities(&z).1,
            None => unreachable!("architecture ends in a dense softmax"),
        }
    }
}

fn activate(v: &mut [f32], activation: Activation) {
    match activation {
        Activation::Relu => relu_in_place(v),
        Activation::Softmax => softmax_in_place(v),
    }
}

fn fill_rect(buf: &mut [f32], shape: Shape, r: Rect, value: f32) {
    for y in r.r0..r.r1 {
        let start = (y * shape.w + r.c0) * shape.c;
        let end = (y * shape.w + r.c1) * shape.c;
        buf[start..end].fill(value);
    }
}

fn copy_rect(src: &[f32], dst: &mut [f32], shape: Shape, r: Rect) {
    for y in r.r0..r.r1 {
        let start = (y * shape.w + r.c0) * shape.c;
        let end = (y * shape.w + r.c1) * shape.c;
        dst[start..end].copy_from_slice(&src[start..end]);
    }
}

fn restore(ws: &mut Workspace, base: &[Vec<f32>], touched: &[(usize, Rect, Shape)]) {
    for &(i, r, shape) in touched {
        copy_rect(&base[i], &mut ws.acts[i], shape, r);
    }
}

fn conv_rect(
    x: &[f32],
    y: &mut [f32],
    s_in: Shape,
    s_out: Shape,
    kernel: (usize, usize),
    out: Rect,
    p: &super::network::LayerParams<f32>,
) {
    if out.is_empty() {
        return;
    }
    let (kh, kw) = kernel;
    let c = s_in.c;
    let mut cols = Vec::with_capacity((out.r1 - out.r0) * (out.c1 - out.c0) * kh * kw * c);
    for yy in out.r0..out.r1 {
        for xo in out.c0..out.c1 {
            for dy in 0..kh {
                let start = ((yy + dy) * s_in.w + xo) * c;
                cols.extend_from_slice(&x[start..start + kw * c]);
            }
        }
    }
    let vals = conv_from_cols(&cols, 1, s_in, kernel, s_out, p);
    let f = s_out.c;
    let width = (out.c1 - out.c0) * f;
    for (row, yy) in (out.r0..out.r1).enumerate() {
        let start = (yy * s_out.w + out.c0) * f;
        y[start..start + width].copy_from_slice(&vals[row * width..(row + 1) * width]);
    }
}

/// Baseline and per-rectangle occluded cough probabilities for one input.
pub(crate) fn occluded_cough_probabilities(
    net: &Network<f32>,
    input: &[f32],
    rects: &[Rect],
    fill: f32,
) -> Result<(f64, Vec<f64>)> {
    let shape = net.architecture().input;
    if rects.iter().any(|r| r.r1 > shape.h || r.c1 > shape.w) {
        return Err(Error::invalid("occlusion rectangle outside the input"));
    }
    let engine = Engine::new(net, input)?;
    let baseline = engine.baseline();
    if !baseline.is_finite() {
        return Err(Error::NonFinite("network output".into()));
    }
    let probs: Vec<f64> = rects
        .par_iter()
        .map_init(|| engine.workspace(), |ws, &r| engine.occluded(ws, r, fill))
        .collect();
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    Ok((baseline, probs))
}
