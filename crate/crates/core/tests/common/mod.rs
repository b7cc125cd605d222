#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;

use coughband_core::cnn::{LayerSpec, Network, TrainConfig};
use coughband_core::occlusion::{Classifier, MaskConfig};
use coughband_core::report::{PipelineConfig, SynthConfig};
use coughband_core::audio_ingest::StudyGroup;
use coughband_core::Result;
use ndarray::ArrayView2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Summed cross-entropy of a batch.
pub fn batch_loss(net: &Network<f64>, x: &[f64], labels: &[usize], seeds: &[u64]) -> f64 {
    let cache = net.forward_batch(x, labels.len(), Some(seeds)).unwrap();
    let p = cache.probabilities();
    labels.iter().enumerate().map(|(b, &l)| -p[2 * b + l].ln()).sum()
}

fn param_mut(net: &mut Network<f64>, layer: usize, idx: usize) -> &mut f64 {
    let p = &mut net.params_mut()[layer];
    let nw = p.weights.len();
    if idx < nw {
        &mut p.weights[idx]
    } else {
        &mut p.biases[idx - nw]
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest relative error at the primary step.
    pub worst: f64,
    /// Parameters whose relative error at the primary step reached 1e-4.
    pub over_tol: usize,
    /// Of those, how many changed a ReLU state or a max-pool winner between
    /// the two perturbed passes.
    pub over_tol_at_kink: usize,
    /// Largest relative error at the fine step.
    pub worst_fine: f64,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Summed cross-entropy, plus the on/off state of every hidden unit and
/// the winners of every max-pool window (inputs whose value reappears in the
/// pooled output).
fn loss_and_pattern(net: &Network<f64>, x: &[f64], labels: &[usize], seeds: &[u64]) -> (f64, Vec<bool>) {
    let cache = net.forward_batch(x, labels.len(), Some(seeds)).unwrap();
    let p = cache.probabilities();
    let loss = labels.iter().enumerate().map(|(b, &l)| -p[2 * b + l].ln()).sum();
    let acts = &cache.acts;
    let mut pattern: Vec<bool> = acts[1..acts.len() - 1].iter().flatten().map(|&v| v > 0.0).collect();
    for (i, layer) in net.architecture().layers.iter().enumerate() {
        if matches!(layer, LayerSpec::MaxPool { .. }) {
            let pooled: HashSet<u64> = acts[i + 1].iter().map(|v| v.to_bits()).collect();
            pattern.extend(acts[i].iter().map(|v| pooled.contains(&v.to_bits())));
        }
    }
    (loss, pattern)
}

/// Central differences with step `h` and `fine_h` for `per_layer` random
/// weights and biases of every layer with parameters.
pub fn gradient_check(
    net: &mut Network<f64>,
    x: &[f64],
    labels: &[usize],
    per_layer: usize,
    seed: u64,
    h: f64,
    fine_h: f64,
) -> GradCheck {
    let seeds: Vec<u64> = (0..labels.len() as u64).map(|i| 1000 + i).collect();
    let cache = net.forward_batch(x, labels.len(), Some(&seeds)).unwrap();
    let mut grads = net.zero_grads();
    net.backward(&cache, labels, 1.0, &mut grads).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::default();
    for layer in 0..net.params().len() {
        let (nw, nb) = (net.params()[layer].weights.len(), net.params()[layer].biases.len());
        if nw + nb == 0 {
            continue;
        }
        for _ in 0..per_layer {
            let idx = rng.random_range(0..nw + nb);
            let analytic = if idx < nw { grads[layer].weights[idx] } else { grads[layer].biases[idx - nw] };
            let orig = *param_mut(net, layer, idx);
            let central = |net: &mut Network<f64>, step: f64| {
                *param_mut(net, layer, idx) = orig + step;
                let (plus, plus_pattern) = loss_and_pattern(net, x, labels, &seeds);
                *param_mut(net, layer, idx) = orig - step;
                let (minus, minus_pattern) = loss_and_pattern(net, x, labels, &seeds);
                *param_mut(net, layer, idx) = orig;
                ((plus - minus) / (2.0 * step), plus_pattern != minus_pattern)
            };
            let (numeric, kink) = central(net, h);
            let rel = relative_error(analytic, numeric);
            out.worst = out.worst.max(rel);
            if rel >= 1e-4 {
                out.over_tol += 1;
                out.over_tol_at_kink += kink as usize;
            }
            let (fine, _) = central(net, fine_h);
            out.worst_fine = out.worst_fine.max(relative_error(analytic, fine));
            out.checked += 1;
        }
    }
    out
}

/// Returns the same probability for every input.
pub struct ConstantProbe(pub f64);

impl Classifier for ConstantProbe {
    fn cough_probability(&self, _input: ArrayView2<'_, f32>) -> Result<f64> {
        Ok(self.0)
    }
}

/// Probability driven by a single input pixel.
pub struct PixelProbe {
    pub k: usize,
    pub n: usize,
}

impl Classifier for PixelProbe {
    fn cough_probability(&self, input: ArrayView2<'_, f32>) -> Result<f64> {
        Ok(0.5 + 0.5 * input[[self.k, self.n]] as f64)
    }
}

/// Probability driven by the sum of a set of pixels.
pub struct PixelSetProbe {
    pub pixels: Vec<(usize, usize)>,
}

impl Classifier for PixelSetProbe {
    fn cough_probability(&self, input: ArrayView2<'_, f32>) -> Result<f64> {
        let s: f64 = self.pixels.iter().map(|&(k, n)| input[[k, n]] as f64).sum();
        Ok(s / self.pixels.len() as f64)
    }
}

/// Desk-scale pipeline settings on a synthetic cohort in `dir`.
pub fn desk_config(dir: &Path, synth: &SynthConfig, epochs: usize, mask: MaskConfig) -> PipelineConfig {
    let manifest = coughband_core::report::generate_synthetic_cohort(synth, &dir.join("data")).unwrap();
    PipelineConfig {
        manifest,
        work_dir: dir.join("work"),
        mask,
        train: TrainConfig {
            batch_size: 16,
            epochs,
            ..TrainConfig::default()
        },
        seed: synth.seed,
        study_groups: vec![StudyGroup::G1],
        ..PipelineConfig::default()
    }
}

pub fn coarse_mask(stride_k: usize, stride_n: usize) -> MaskConfig {
    MaskConfig {
        stride_k,
        stride_n,
        ..MaskConfig::default()
    }
}
