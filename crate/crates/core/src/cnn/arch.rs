//! Layer stack description and shape algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Valid (unpadded) convolution, stride 1, followed by ReLU.
    Conv { filters: usize, kernel: (usize, usize) },
    /// Non-overlapping max pooling; trailing rows/columns are dropped.
    MaxPool { size: (usize, usize) },
    /// Inverted dropout with the given drop rate.
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize, activation: Activation },
}

/// Activation shape, channels last. Flattened and dense outputs are `1 x 1 x len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

pub const DROPOUT_RATE: f64 = 0.10;

impl Architecture {
    /// The cough detector: three conv/pool/dropout-style stages, two dense
    /// layers and a two-way softmax, on 45x100 single-channel input.
    pub fn cough_detector() -> Self {
        Self::cough_detector_for(Shape::new(45, 100, 1))
    }

    pub fn cough_detector_for(input: Shape) -> Self {
        use LayerSpec::*;
        let conv = |filters| Conv {
            filters,
            kernel: (2, 2),
        };
        let pool = MaxPool { size: (2, 2) };
        let drop = Dropout { rate: DROPOUT_RATE };
        Self {
            input,
            layers: vec![
                conv(32),
                pool,
                drop,
                conv(64),
                pool,
                drop,
                conv(128),
                drop,
                conv(256),
                pool,
                Flatten,
                Dense {
                    units: 512,
                    activation: Activation::Relu,
                },
                Dense {
                    units: 2,
                    activation: Activation::Softmax,
                },
            ],
        }
    }

    /// Output shape of every layer, in order.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        if cur.is_empty() {
            return Err(Error::invalid("empty input shape"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv { filters, kernel: (kh, kw) } => {
                    if kh == 0 || kw == 0 || filters == 0 || cur.h < kh || cur.w < kw {
                        return Err(Error::invalid(format!("conv layer {i} does not fit input {cur:?}")));
                    }
                    Shape::new(cur.h - kh + 1, cur.w - kw + 1, filters)
                }
                LayerSpec::MaxPool { size: (ph, pw) } => {
                    if ph == 0 || pw == 0 || cur.h < ph || cur.w < pw {
                        return Err(Error::invalid(format!("pool layer {i} does not fit input {cur:?}")));
                    }
                    Shape::new(cur.h / ph, cur.w / pw, cur.c)
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    cur
                }
                LayerSpec::Flatten => Shape::new(1, 1, cur.len()),
                LayerSpec::Dense { units, activation } => {
                    if cur.h != 1 || cur.w != 1 {
                        return Err(Error::invalid(format!("dense layer {i} needs flattened input")));
                    }
                    if units == 0 {
                        return Err(Error::invalid("dense layer with zero units"));
                    }
                    if activation == Activation::Softmax && i + 1 != self.layers.len() {
                        return Err(Error::invalid("softmax is only allowed on the last layer"));
                    }
                    Shape::new(1, 1, units)
                }
            };
            shapes.push(cur);
        }
        match self.layers.last() {
            Some(LayerSpec::Dense {
                units: 2,
                activation: Activation::Softmax,
            }) => Ok(shapes),
            _ => Err(Error::invalid("architecture must end in a 2-unit softmax dense layer")),
        }
    }

    /// `(weights, biases)` element counts per layer; zero for parameterless layers.
    pub fn param_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let shapes = self.shapes()?;
        let mut prev = self.input;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, out)| {
                let sizes = match *layer {
                    LayerSpec::Conv { filters, kernel: (kh, kw) } => (kh * kw * prev.c * filters, filters),
                    LayerSpec::Dense { units, .. } => (prev.len() * units, units),
                    _ => (0, 0),
                };
                prev = *out;
                sizes
            })
            .collect())
    }

    pub fn fan_in(&self, layer: usize) -> Result<usize> {
        let shapes = self.shapes()?;
        let prev = if layer == 0 { self.input } else { shapes[layer - 1] };
        Ok(match self.layers[layer] {
            LayerSpec::Conv { kernel: (kh, kw), .. } => kh * kw * prev.c,
            LayerSpec::Dense { .. } => prev.len(),
            _ => 0,
        })
    }
}
