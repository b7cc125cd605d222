//! Batched forward and backward passes over an [`Architecture`].
//!
//! Activations are stored channels-last (`[batch, h, w, c]`, contiguous).
//! Convolutions run as im2col + GEMM; everything else is a plain loop. No
//! operation depends on thread scheduling, so results are reproducible
//! bit for bit.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{Activation, Architecture, LayerSpec, Shape};
use super::scalar::{gemm, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(sizes: (usize, usize)) -> Self {
        Self {
            weights: vec![T::zero(); sizes.0],
            biases: vec![T::zero(); sizes.1],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty() && self.biases.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    shapes: Vec<Shape>,
    params: Vec<LayerParams<T>>,
}

/// Per-layer gradients, same layout as the parameters.
pub type Gradients<T> = Vec<LayerParams<T>>;

/// Everything a backward pass needs from a forward pass.
#[derive(Debug)]
pub struct BatchCache<T> {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Vec<T>>,
    /// Pre-softmax output, `batch x 2`.
    pub logits: Vec<T>,
    cols: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    masks: Vec<Option<Vec<T>>>,
}

impl<T> BatchCache<T> {
    /// Softmax output, `batch x 2`.
    pub fn probabilities(&self) -> &[T] {
        self.acts.last().expect("at least one layer")
    }
}

impl<T: Scalar> Network<T> {
    /// He-uniform weights (limit `sqrt(6 / fan_in)`), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let sizes = arch.param_sizes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(sizes.len());
        for (i, &s) in sizes.iter().enumerate() {
            let mut p = LayerParams::zeros(s);
            if s.0 > 0 {
                let limit = (6.0 / arch.fan_in(i)? as f64).sqrt();
                for w in &mut p.weights {
                    *w = T::from_f64_lossy(rng.random_range(-limit..limit));
                }
            }
            params.push(p);
        }
        Ok(Self { arch, shapes, params })
    }

    pub fn from_parts(arch: Architecture, params: Vec<LayerParams<T>>) -> Result<Self> {
        let shapes = arch.shapes()?;
        let sizes = arch.param_sizes()?;
        if sizes.len() != params.len() {
            return Err(Error::shape(format!("{} parameter blocks", sizes.len()), params.len()));
        }
        for (i, (s, p)) in sizes.iter().zip(&params).enumerate() {
            if (p.weights.len(), p.biases.len()) != *s {
                return Err(Error::shape(
                    format!("layer {i} params {s:?}"),
                    format!("({}, {})", p.weights.len(), p.biases.len()),
                ));
            }
        }
        Ok(Self { arch, shapes, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        self.params
            .iter()
            .map(|p| LayerParams::zeros((p.weights.len(), p.biases.len())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))).collect();
        Network {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weights: conv(&p.weights),
                    biases: conv(&p.biases),
                })
                .collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.arch.input.len()
    }

    fn shape_in(&self, layer: usize) -> Shape {
        if layer == 0 {
            self.arch.input
        } else {
            self.shapes[layer - 1]
        }
    }

    /// Forward pass over `batch` inputs laid out back to back. With
    /// `dropout_seeds` (one per sample) dropout is active and its masks are
    /// drawn from those seeds; without, dropout is the identity.
    pub fn forward_batch(&self, input: &[T], batch: usize, dropout_seeds: Option<&[u64]>) -> Result<BatchCache<T>> {
        let in_len = self.input_len();
        if input.len() != batch * in_len {
            return Err(Error::shape(format!("{batch} x {in_len} inputs"), input.len()));
        }
        if let Some(seeds) = dropout_seeds {
            if seeds.len() != batch {
                return Err(Error::shape(format!("{batch} dropout seeds"), seeds.len()));
            }
        }
        let mut rngs: Option<Vec<ChaCha8Rng>> =
            dropout_seeds.map(|s| s.iter().map(|&seed| ChaCha8Rng::seed_from_u64(seed)).collect());

        let n_layers = self.arch.layers.len();
        let mut cache = BatchCache {
            batch,
            acts: Vec::with_capacity(n_layers + 1),
            logits: Vec::new(),
            cols: vec![Vec::new(); n_layers],
            argmax: vec![Vec::new(); n_layers],
            masks: vec![None; n_layers],
        };
        cache.acts.push(input.to_vec());

        for (i, layer) in self.arch.layers.iter().enumerate() {
            let s_in = self.shape_in(i);
            let s_out = self.shapes[i];
            let x = cache.acts.last().expect("input pushed");
            let out = match *layer {
                LayerSpec::Conv { kernel, .. } => {
                    let mut cols = Vec::new();
                    im2col(x, batch, s_in, kernel, s_out, &mut cols);
                    let out = conv_from_cols(&cols, batch, s_in, kernel, s_out, &self.params[i]);
                    cache.cols[i] = cols;
                    out
                }
                LayerSpec::MaxPool { size } => {
                    let (out, arg) = maxpool(x, batch, s_in, size, s_out);
                    cache.argmax[i] = arg;
                    out
                }
                LayerSpec::Dropout { rate } => match rngs.as_mut() {
                    Some(rngs) => {
                        let keep = 1.0 - rate;
                        let scale = T::from_f64_lossy(1.0 / keep);
                        let len = s_out.len();
                        let mut mask = Vec::with_capacity(batch * len);
                        for rng in rngs.iter_mut() {
                            mask.extend((0..len).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }));
                        }
                        let out = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                        cache.masks[i] = Some(mask);
                        out
                    }
                    None => x.clone(),
                },
                LayerSpec::Flatten => x.clone(),
                LayerSpec::Dense { units, activation } => {
                    let din = s_in.len();
                    let p = &self.params[i];
                    let mut out = vec![T::zero(); batch * units];
                    gemm(batch, din, units, x, false, &p.weights, false, &mut out, false);
                    for row in out.chunks_exact_mut(units) {
                        for (v, &b) in row.iter_mut().zip(&p.biases) {
                            *v += b;
                        }
                        if activation == Activation::Softmax {
                            cache.logits.extend_from_slice(row);
                        }
                        match activation {
                            Activation::Relu => relu_in_place(row),
                            Activation::Softmax => softmax_in_place(row),
                        }
                    }
                    out
                }
            };
            cache.acts.push(out);
        }
        Ok(cache)
    }

    /// Eval-mode class probabilities for a single input.
    pub fn predict(&self, input: &[T]) -> Result<[T; 2]> {
        let cache = self.forward_batch(input, 1, None)?;
        let p = cache.probabilities();
        Ok([p[0], p[1]])
    }

    /// Accumulates cross-entropy gradients into `grads` and returns the summed
    /// (not averaged) loss. Gradients are scaled by `loss_scale`, normally
    /// `1 / batch_size`.
    pub fn backward(&self, cache: &BatchCache<T>, labels: &[usize], loss_scale: T, grads: &mut Gradients<T>) -> Result<T> {
        let batch = cache.batch;
        if labels.len() != batch {
            return Err(Error::shape(format!("{batch} labels"), labels.len()));
        }
        let probs = cache.probabilities();
        let mut loss = T::zero();
        let mut delta: Vec<T> = probs.to_vec();
        for (b, &label) in labels.iter().enumerate() {
            if label > 1 {
                return Err(Error::invalid(format!("label {label} is not 0 or 1")));
            }
            let p = probs[b * 2 + label].max(T::min_positive_value());
            loss += -p.ln();
            delta[b * 2 + label] = delta[b * 2 + label] - T::one();
        }
        delta.iter_mut().for_each(|d| *d = *d * loss_scale);

        for i in (0..self.arch.layers.len()).rev() {
            let s_in = self.shape_in(i);
            let s_out = self.shapes[i];
            let x = &cache.acts[i];
            let y = &cache.acts[i + 1];
            let need_input_grad = i > 0;
            delta = match self.arch.layers[i] {
                LayerSpec::Dense { units, activation } => {
                    if activation == Activation::Relu {
                        relu_backward(&mut delta, y);
                    }
                    let din = s_in.len();
                    let g = &mut grads[i];
                    gemm(din, batch, units, x, true, &delta, false, &mut g.weights, true);
                    add_column_sums(&delta, units, &mut g.biases);
                    if need_input_grad {
                        let mut dx = vec![T::zero(); batch * din];
                        gemm(batch, units, din, &delta, false, &self.params[i].weights, true, &mut dx, false);
                        dx
                    } else {
                        Vec::new()
                    }
                }
                LayerSpec::Conv { kernel, filters } => {
                    relu_backward(&mut delta, y);
                    let rows = batch * s_out.h * s_out.w;
                    let kdim = kernel.0 * kernel.1 * s_in.c;
                    let g = &mut grads[i];
                    gemm(kdim, rows, filters, &cache.cols[i], true, &delta, false, &mut g.weights, true);
                    add_column_sums(&delta, filters, &mut g.biases);
                    if need_input_grad {
                        let mut dcols = vec![T::zero(); rows * kdim];
                        gemm(rows, filters, kdim, &delta, false, &self.params[i].weights, true, &mut dcols, false);
                        col2im(&dcols, batch, s_in, kernel, s_out)
                    } else {
                        Vec::new()
                    }
                }
                LayerSpec::MaxPool { .. } => {
                    let mut dx = vec![T::zero(); batch * s_in.len()];
                    for (&idx, &d) in cache.argmax[i].iter().zip(&delta) {
                        dx[idx as usize] += d;
                    }
                    dx
                }
                LayerSpec::Dropout { .. } => match &cache.masks[i] {
                    Some(mask) => delta.iter().zip(mask).map(|(&d, &m)| d * m).collect(),
                    None => delta,
                },
                LayerSpec::Flatten => delta,
            };
        }
        Ok(loss)
    }
}

pub(crate) fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

fn relu_backward<T: Scalar>(delta: &mut [T], out: &[T]) {
    for (d, &y) in delta.iter_mut().zip(out) {
        if !(y > T::zero()) {
            *d = T::zero();
        }
    }
}

/// `(p_non_cough, p_cough)` from a pair of logits, evaluated in f64 so
/// that confident outputs keep their distance from 0 and 1.
pub fn two_class_probabilities<T: Scalar>(logits: &[T]) -> (f64, f64) {
    let z0 = logits[0].to_f64().unwrap_or(f64::NAN);
    let z1 = logits[1].to_f64().unwrap_or(f64::NAN);
    let p1 = 1.0 / (1.0 + (z0 - z1).exp());
    let p0 = 1.0 / (1.0 + (z1 - z0).exp());
    (p0, p1)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn add_column_sums<T: Scalar>(m: &[T], cols: usize, acc: &mut [T]) {
    for row in m.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Patch matrix of a valid stride-1 convolution: one row per output pixel,
/// columns ordered `(dy, dx, channel)`.
pub(crate) fn im2col<T: Scalar>(x: &[T], batch: usize, s_in: Shape, kernel: (usize, usize), s_out: Shape, cols: &mut Vec<T>) {
    let (kh, kw) = kernel;
    let c = s_in.c;
    cols.clear();
    cols.reserve(batch * s_out.h * s_out.w * kh * kw * c);
    for b in 0..batch {
        let sample = &x[b * s_in.len()..(b + 1) * s_in.len()];
        for y in 0..s_out.h {
            for xo in 0..s_out.w {
                for dy in 0..kh {
                    let start = ((y + dy) * s_in.w + xo) * c;
                    cols.extend_from_slice(&sample[start..start + kw * c]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(dcols: &[T], batch: usize, s_in: Shape, kernel: (usize, usize), s_out: Shape) -> Vec<T> {
    let (kh, kw) = kernel;
    let c = s_in.c;
    let kdim = kh * kw * c;
    let mut dx = vec![T::zero(); batch * s_in.len()];
    let mut row = 0;
    for b in 0..batch {
        let sample = &mut dx[b * s_in.len()..(b + 1) * s_in.len()];
        for y in 0..s_out.h {
            for xo in 0..s_out.w {
                let r = &dcols[row * kdim..(row + 1) * kdim];
                for dy in 0..kh {
                    let start = ((y + dy) * s_in.w + xo) * c;
                    for (d, &v) in sample[start..start + kw * c].iter_mut().zip(&r[dy * kw * c..(dy + 1) * kw * c]) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Convolution output (bias added, ReLU applied) from an im2col matrix with
/// `rows = cols.len() / kdim` output pixels.
pub(crate) fn conv_from_cols<T: Scalar>(
    cols: &[T],
    _batch: usize,
    s_in: Shape,
    kernel: (usize, usize),
    s_out: Shape,
    p: &LayerParams<T>,
) -> Vec<T> {
    let kdim = kernel.0 * kernel.1 * s_in.c;
    let rows = cols.len() / kdim;
    let filters = s_out.c;
    let mut out = vec![T::zero(); rows * filters];
    gemm(rows, kdim, filters, cols, false, &p.weights, false, &mut out, false);
    for row in out.chunks_exact_mut(filters) {
        for (v, &b) in row.iter_mut().zip(&p.biases) {
            *v += b;
        }
        relu_in_place(row);
    }
    out
}

fn maxpool<T: Scalar>(x: &[T], batch: usize, s_in: Shape, size: (usize, usize), s_out: Shape) -> (Vec<T>, Vec<u32>) {
    let (ph, pw) = size;
    let c = s_in.c;
    let mut out = Vec::with_capacity(batch * s_out.len());
    let mut arg = Vec::with_capacity(batch * s_out.len());
    for b in 0..batch {
        let base = b * s_in.len();
        for y in 0..s_out.h {
            for xo in 0..s_out.w {
                for ch in 0..c {
                    let mut best = base + ((y * ph) * s_in.w + xo * pw) * c + ch;
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let idx = base + ((y * ph + dy) * s_in.w + xo * pw + dx) * c + ch;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

/// Max pooling of a single sample without recording argmax positions.
pub(crate) fn maxpool_value<T: Scalar>(x: &[T], s_in: Shape, size: (usize, usize), y: usize, xo: usize, ch: usize) -> T {
    let (ph, pw) = size;
    let mut best = x[((y * ph) * s_in.w + xo * pw) * s_in.c + ch];
    for dy in 0..ph {
        for dx in 0..pw {
            let v = x[((y * ph + dy) * s_in.w + xo * pw + dx) * s_in.c + ch];
            if v > best {
                best = v;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            input: Shape::new(7, 9, 1),
            layers: vec![
                LayerSpec::Conv {
                    filters: 3,
                    kernel: (2, 2),
                },
                LayerSpec::MaxPool { size: (2, 2) },
                LayerSpec::Dropout { rate: 0.1 },
                LayerSpec::Conv {
                    filters: 4,
                    kernel: (2, 2),
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 5,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Softmax,
                },
            ],
        }
    }

    /// Direct nested-loop convolution oracle.
    fn conv_direct(x: &[f64], s_in: Shape, k: (usize, usize), filters: usize, p: &LayerParams<f64>) -> Vec<f64> {
        let (ho, wo) = (s_in.h - k.0 + 1, s_in.w - k.1 + 1);
        let mut out = vec![0.0; ho * wo * filters];
        for y in 0..ho {
            for xo in 0..wo {
                for f in 0..filters {
                    let mut acc = p.biases[f];
                    for dy in 0..k.0 {
                        for dx in 0..k.1 {
                            for c in 0..s_in.c {
                                let w = p.weights[((dy * k.1 + dx) * s_in.c + c) * filters + f];
                                acc += w * x[((y + dy) * s_in.w + xo + dx) * s_in.c + c];
                            }
                        }
                    }
                    out[(y * wo + xo) * filters + f] = acc.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let net = Network::<f64>::init(tiny_arch(), 4).unwrap();
        let s_in = net.architecture().input;
        let x: Vec<f64> = (0..s_in.len()).map(|i| ((i * 7 % 11) as f64) / 11.0 - 0.3).collect();
        let cache = net.forward_batch(&x, 1, None).unwrap();
        let want = conv_direct(&x, s_in, (2, 2), 3, &net.params()[0]);
        for (a, b) in cache.acts[1].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut net = Network::<f32>::init(Architecture::cough_detector(), 1).unwrap();
        for p in net.params_mut() {
            p.weights.iter_mut().for_each(|w| *w = 0.0);
            p.biases.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = vec![0.7f32; 4500];
        assert_eq!(net.predict(&x).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let net = Network::<f64>::init(tiny_arch(), 9).unwrap();
        let n = net.input_len();
        let xs: Vec<f64> = (0..3 * n).map(|i| ((i * 13 % 17) as f64) / 17.0).collect();
        let batch = net.forward_batch(&xs, 3, None).unwrap();
        for b in 0..3 {
            let single = net.predict(&xs[b * n..(b + 1) * n]).unwrap();
            let p = &batch.probabilities()[b * 2..b * 2 + 2];
            assert!((p[0] - single[0]).abs() < 1e-12 && (p[1] - single[1]).abs() < 1e-12);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        // with only the output layer trainable, dL/dlogits shows up as the bias gradient
        let arch = Architecture {
            input: Shape::new(1, 1, 3),
            layers: vec![LayerSpec::Dense {
                units: 2,
                activation: Activation::Softmax,
            }],
        };
        let net = Network::<f64>::init(arch, 2).unwrap();
        let x = [0.2, -0.4, 0.9];
        let cache = net.forward_batch(&x, 1, None).unwrap();
        let p = cache.probabilities().to_vec();
        let mut grads = net.zero_grads();
        net.backward(&cache, &[1], 1.0, &mut grads).unwrap();
        assert_eq!(grads[0].biases, vec![p[0], p[1] - 1.0]);
    }

    #[test]
    fn dropout_masks_follow_seeds() {
        let net = Network::<f64>::init(tiny_arch(), 3).unwrap();
        let x = vec![0.5; net.input_len()];
        let a = net.forward_batch(&x, 1, Some(&[17])).unwrap();
        let b = net.forward_batch(&x, 1, Some(&[17])).unwrap();
        let c = net.forward_batch(&x, 1, Some(&[18])).unwrap();
        assert_eq!(a.probabilities(), b.probabilities());
        assert_ne!(a.acts[3], c.acts[3]);
        // eval mode: dropout is the identity
        let e = net.forward_batch(&x, 1, None).unwrap();
        assert_eq!(e.acts[2], e.acts[3]);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let arch = Architecture {
            input: Shape::new(1, 1, 1),
            layers: vec![
                LayerSpec::Dropout { rate: 0.1 },
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Softmax,
                },
            ],
        };
        let net = Network::<f64>::init(arch, 0).unwrap();
        let trials = 10_000u64;
        let total: f64 = (0..trials)
            .map(|s| net.forward_batch(&[1.0], 1, Some(&[s])).unwrap().acts[1][0])
            .sum();
        let mean = total / trials as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn input_size_checked() {
        let net = Network::<f32>::init(tiny_arch(), 0).unwrap();
        assert!(net.forward_batch(&[0.0; 3], 1, None).is_err());
        assert!(net.forward_batch(&vec![0.0; net.input_len()], 1, Some(&[1, 2])).is_err());
    }
}
