//! Convolutional cough/non-cough classifier built from scratch.
//!
//! Class index 0 is non-cough, 1 is cough.

pub mod adamax;
pub mod arch;
pub mod folds;
pub mod model_io;
pub mod network;
mod occlude;
mod scalar;
mod train;

pub use adamax::{adamax_step, AdamaxConfig, AdamaxState};
pub use arch::{Activation, Architecture, LayerSpec, Shape};
pub use folds::{make_folds, make_manifest_folds, split_train_validation, Fold, FoldPlan};
pub use model_io::{load_model, save_model};
pub use network::{two_class_probabilities, BatchCache, Gradients, LayerParams, Network};
pub use scalar::Scalar;
pub use occlude::Rect;
pub use train::{train, train_with_architecture, EpochStats, TrainConfig, TrainedModel};

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::spectrogram::Spectrogram;

pub const NON_COUGH: usize = 0;
pub const COUGH: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout active, masks drawn from `seed`.
    Train { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    net: Network<f32>,
    seed: u64,
}

impl CnnModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        Ok(Self {
            net: Network::init(arch, seed)?,
            seed,
        })
    }

    pub fn cough_detector(seed: u64) -> Result<Self> {
        Self::new(Architecture::cough_detector(), seed)
    }

    pub fn from_network(net: Network<f32>, seed: u64) -> Self {
        Self { net, seed }
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(p_non_cough, p_cough)` for one spectrogram.
    pub fn forward(&self, spec: &Spectrogram, mode: ForwardMode) -> Result<(f64, f64)> {
        self.forward_view(spec.view(), mode)
    }

    pub fn forward_view(&self, input: ArrayView2<'_, f32>, mode: ForwardMode) -> Result<(f64, f64)> {
        let shape = self.net.architecture().input;
        if input.dim() != (shape.h, shape.w) || shape.c != 1 {
            return Err(Error::shape(format!("{}x{}", shape.h, shape.w), format!("{:?}", input.dim())));
        }
        let x: Vec<f32> = input.iter().copied().collect();
        let seeds = match mode {
            ForwardMode::Eval => None,
            ForwardMode::Train { seed } => Some([seed]),
        };
        let cache = self.net.forward_batch(&x, 1, seeds.as_ref().map(|s| &s[..]))?;
        check_probs(cache.probabilities())?;
        Ok(two_class_probabilities(&cache.logits))
    }

    /// Eval-mode probabilities for many spectrograms.
    pub fn predict_batch(&self, specs: &[Spectrogram]) -> Result<Vec<(f64, f64)>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(specs.len());
        for chunk in specs.chunks(CHUNK) {
            let x: Vec<f32> = chunk.iter().flat_map(|s| s.values().iter().copied()).collect();
            let cache = self.net.forward_batch(&x, chunk.len(), None)?;
            check_probs(cache.probabilities())?;
            out.extend(cache.logits.chunks_exact(2).map(two_class_probabilities));
        }
        Ok(out)
    }
}

impl CnnModel {
    /// Eval-mode cough probability of `input` and of each copy of `input`
    /// with one rectangle set to `fill`, via incremental recomputation.
    pub fn occluded_cough_probabilities(
        &self,
        input: ArrayView2<'_, f32>,
        rects: &[Rect],
        fill: f32,
    ) -> Result<(f64, Vec<f64>)> {
        let shape = self.net.architecture().input;
        if input.dim() != (shape.h, shape.w) || shape.c != 1 {
            return Err(Error::shape(format!("{}x{}", shape.h, shape.w), format!("{:?}", input.dim())));
        }
        let x: Vec<f32> = input.iter().copied().collect();
        occlude::occluded_cough_probabilities(&self.net, &x, rects, fill)
    }
}

fn check_probs(p: &[f32]) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("network output".into()))
    }
}

/// SplitMix64 finalizer over a sequence of words; derives independent
/// sub-seeds (dropout masks, shuffles) from one user seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        let mut z = h ^ w.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn outputs_sum_to_one() {
        let model = CnnModel::cough_detector(5).unwrap();
        let spec = Spectrogram::new(Array2::from_shape_fn((45, 100), |(k, n)| ((k * 3 + n) % 10) as f32 / 10.0)).unwrap();
        let (a, b) = model.forward(&spec, ForwardMode::Eval).unwrap();
        assert!((a + b - 1.0).abs() < 1e-6);
        let (c, d) = model.forward(&spec, ForwardMode::Train { seed: 3 }).unwrap();
        assert!((c + d - 1.0).abs() < 1e-6);
        let batch = model.predict_batch(&[spec.clone(), spec]).unwrap();
        assert!((batch[0].0 - a).abs() < 1e-6);
    }

    #[test]
    fn flatten_width() {
        let shapes = Architecture::cough_detector().shapes().unwrap();
        assert_eq!(shapes[10].len(), 11264);
    }

    #[test]
    fn seeds_mix_apart() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[7, 7]), mix_seed(&[7, 7]));
    }
}
