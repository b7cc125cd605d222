mod common;

use common::{gradient_check, ConstantProbe, PixelProbe, PixelSetProbe};
use coughband_core::cnn::{
    adamax_step, Activation, AdamaxConfig, AdamaxState, Architecture, CnnModel, LayerSpec, Network, Shape,
};
use coughband_core::occlusion::{
    average_maps, occlusion_map, percentile_threshold, select_confident_at, weighted_spectrogram, Classifier,
    MaskConfig,
};
use coughband_core::spectrogram::{Spectrogram, N_BINS, N_FRAMES};
use coughband_core::Result;
use ndarray::{Array2, ArrayView2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> Architecture {
    use LayerSpec::*;
    Architecture {
        input: Shape::new(9, 12, 1),
        layers: vec![
            Conv { filters: 4, kernel: (2, 2) },
            MaxPool { size: (2, 2) },
            Dropout { rate: 0.1 },
            Conv { filters: 6, kernel: (2, 2) },
            Flatten,
            Dense { units: 8, activation: Activation::Relu },
            Dense { units: 2, activation: Activation::Softmax },
        ],
    }
}

fn random_spec(rng: &mut ChaCha8Rng) -> Spectrogram {
    Spectrogram::new(Array2::from_shape_fn((N_BINS, N_FRAMES), |_| rng.random::<f32>())).unwrap()
}

#[test]
fn small_network_gradients_match_finite_differences() {
    let mut net: Network<f64> = Network::init(small_arch(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..3 * 9 * 12).map(|_| rng.random::<f64>()).collect();
    let check = gradient_check(&mut net, &x, &[0, 1, 1], 64, 3, 1e-4, 1e-5);
    assert!(check.checked >= 4 * 64);
    assert!(check.worst < 1e-4, "{check:?}");
}

#[test]
fn adamax_first_step_moves_by_alpha() {
    let mut theta = [0.5f64];
    let mut state = AdamaxState::new(1);
    adamax_step(&mut theta, &[1.0], &mut state, 1, &AdamaxConfig::default()).unwrap();
    assert!((theta[0] - (0.5 - 0.002)).abs() < 1e-8);
    let mut neg = [0.0f64];
    let mut state = AdamaxState::new(1);
    adamax_step(&mut neg, &[-3.0], &mut state, 1, &AdamaxConfig::default()).unwrap();
    assert!((neg[0] - 0.002).abs() < 1e-8);
}

#[test]
fn constant_probe_gives_zero_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = random_spec(&mut rng);
    let map = occlusion_map(&ConstantProbe(0.97), &spec, &MaskConfig::default()).unwrap();
    assert_eq!(map.values.dim(), (N_BINS, N_FRAMES));
    assert!(map.values.iter().all(|&v| v == 0.0));
}

#[test]
fn pixel_probe_localizes() {
    for &(k, n) in &[(0, 0), (20, 50), (44, 99), (7, 93)] {
        let mut values = Array2::zeros((N_BINS, N_FRAMES));
        values[[k, n]] = 1.0;
        let spec = Spectrogram::new(values).unwrap();
        let map = occlusion_map(&PixelProbe { k, n }, &spec, &MaskConfig::default()).unwrap();
        let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
        for ((i, j), &v) in map.values.indexed_iter() {
            if v > best {
                best = v;
                at = (i, j);
            }
        }
        assert_eq!(at, (k, n));
        assert_eq!(best, 1.0);
    }
}

#[test]
fn pixel_set_probe_top_pixels_match() {
    let pixels = vec![(10, 20), (15, 40), (30, 70), (38, 85)];
    let mut values = Array2::zeros((N_BINS, N_FRAMES));
    for &(k, n) in &pixels {
        values[[k, n]] = 1.0;
    }
    let spec = Spectrogram::new(values).unwrap();
    let map = occlusion_map(&PixelSetProbe { pixels: pixels.clone() }, &spec, &MaskConfig::default()).unwrap();
    let mut order: Vec<((usize, usize), f64)> = map.values.indexed_iter().map(|(i, &v)| (i, v)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut top: Vec<(usize, usize)> = order[..pixels.len()].iter().map(|x| x.0).collect();
    top.sort();
    let mut expected = pixels;
    expected.sort();
    assert_eq!(top, expected);
}

struct Naive<'a>(&'a CnnModel);

impl Classifier for Naive<'_> {
    fn cough_probability(&self, input: ArrayView2<'_, f32>) -> Result<f64> {
        self.0.cough_probability(input)
    }
}

#[test]
fn incremental_occlusion_matches_full_forward_passes() {
    let model = CnnModel::cough_detector(5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = random_spec(&mut rng);
    let cfg = MaskConfig {
        stride_k: 7,
        stride_n: 17,
        ..MaskConfig::default()
    };
    let fast = occlusion_map(&model, &spec, &cfg).unwrap();
    let slow = occlusion_map(&Naive(&model), &spec, &cfg).unwrap();
    assert!((fast.baseline - slow.baseline).abs() < 1e-6);
    for (a, b) in fast.values.iter().zip(&slow.values) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn confidence_cutoff_is_inclusive() {
    struct Fixed(Vec<f64>);
    impl Classifier for Fixed {
        fn cough_probability(&self, input: ArrayView2<'_, f32>) -> Result<f64> {
            Ok(self.0[(input[[0, 0]] * 2.0).round() as usize])
        }
    }
    let specs: Vec<Spectrogram> = (0..3)
        .map(|i| Spectrogram::new(Array2::from_elem((N_BINS, N_FRAMES), i as f32 / 2.0)).unwrap())
        .collect();
    let keep = select_confident_at(&Fixed(vec![0.95, 0.90, 0.89]), &specs, 0.90).unwrap();
    assert_eq!(keep, vec![0, 1]);
}

#[test]
fn weighted_spectrogram_masks_and_preserves_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let specs: Vec<Spectrogram> = (0..3).map(|_| random_spec(&mut rng)).collect();
    let probe = PixelSetProbe {
        pixels: vec![(5, 5), (20, 60), (44, 0)],
    };
    let maps: Vec<_> = specs
        .iter()
        .map(|s| occlusion_map(&probe, s, &MaskConfig::default()).unwrap())
        .collect();
    let mean = average_maps("P1", &maps).unwrap();
    let mut prev: Option<Array2<f64>> = None;
    for th in [50.0, 60.0, 70.0, 80.0, 90.0] {
        let alpha = percentile_threshold(&mean, th).unwrap();
        let ws = weighted_spectrogram(&specs, &mean, th, alpha).unwrap();
        assert_eq!(ws.values.dim(), (N_BINS, N_FRAMES));
        for ((idx, &v), &m) in ws.values.indexed_iter().zip(&mean.values) {
            let avg = specs.iter().map(|s| s.values()[idx] as f64).sum::<f64>() / 3.0;
            let expected = if m > alpha { avg } else { 0.0 };
            assert!((v - expected).abs() < 1e-12);
        }
        if let Some(p) = &prev {
            for (now, before) in ws.values.iter().zip(p) {
                assert!(*now == 0.0 || *before != 0.0, "surviving set must shrink with Th");
            }
        }
        prev = Some(ws.values);
    }
}
