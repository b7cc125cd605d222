use coughband_core::stats::special::{beta_inc, normal_cdf, normal_quantile, student_t_two_sided};
use coughband_core::stats::{
    gated_test, mann_whitney_u, shapiro_wilk, t_test_unpaired, u_distribution, TestKind,
};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal, StudentsT};
use statrs::function::beta::beta_reg;

/// Every way of choosing which of the `n1 + n2` ranks belong to the first
/// sample, tallied by U1.
fn enumerate_u(n1: usize, n2: usize) -> Vec<u128> {
    let n = n1 + n2;
    let mut counts = vec![0u128; n1 * n2 + 1];
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let rank_sum: usize = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).sum();
        counts[rank_sum - n1 * (n1 + 1) / 2] += 1;
    }
    counts
}

#[test]
fn exact_mann_whitney_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n1 in 1..=8 {
        for n2 in 1..=8 {
            let counts = enumerate_u(n1, n2);
            assert_eq!(u_distribution(n1, n2), counts, "n1={n1} n2={n2}");
            let total: u128 = counts.iter().sum();
            for _ in 0..5 {
                let mut values: Vec<f64> = (1..=n1 + n2).map(|v| v as f64).collect();
                values.shuffle(&mut rng);
                let (a, b) = values.split_at(n1);
                let r = mann_whitney_u(a, b).unwrap();
                assert!(r.exact);
                let u1: usize = a.iter().map(|&v| v as usize).sum::<usize>() - n1 * (n1 + 1) / 2;
                let u = u1.min(n1 * n2 - u1);
                let below: u128 = counts[..=u].iter().sum();
                let expected = (2.0 * below as f64 / total as f64).min(1.0);
                assert_eq!(r.p_value, expected, "n1={n1} n2={n2} u={u}");
            }
        }
    }
}

#[test]
fn mann_whitney_uses_normal_approximation_with_ties() {
    let r = mann_whitney_u(&[1.0, 2.0, 2.0, 3.0], &[2.0, 4.0, 5.0, 6.0]).unwrap();
    assert!(!r.exact);
    assert!(r.p_value > 0.0 && r.p_value <= 1.0);
}

#[test]
fn t_test_matches_statrs() {
    let r = t_test_unpaired(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert!((r.p_value - 0.0214).abs() < 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n1 = rng.random_range(2..12usize);
        let n2 = rng.random_range(2..12usize);
        let a: Vec<f64> = (0..n1).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.random::<f64>() + 0.2).collect();
        let r = t_test_unpaired(&a, &b).unwrap();
        let dist = StudentsT::new(0.0, 1.0, r.df).unwrap();
        let expected = 2.0 * (1.0 - dist.cdf(r.t.abs()));
        assert!((r.p_value - expected).abs() < 1e-9, "{} vs {expected}", r.p_value);
    }
}

#[test]
fn special_functions_match_statrs() {
    let normal = StatrsNormal::new(0.0, 1.0).unwrap();
    for i in 1..200 {
        let p = i as f64 / 200.0;
        assert!((normal_quantile(p) - normal.inverse_cdf(p)).abs() < 1e-8, "p={p}");
        let z = -6.0 + 12.0 * p;
        assert!((normal_cdf(z) - normal.cdf(z)).abs() < 1e-10, "z={z}");
    }
    for &(z, phi) in &[
        (-1.0, 0.158_655_253_931_457_05),
        (-1.96, 0.024_997_895_148_220_435),
        (-3.0, 0.001_349_898_031_630_094_6),
        (0.5, 0.691_462_461_274_013_1),
    ] {
        assert!((normal_cdf(z) - phi).abs() < 1e-15, "z={z}: {}", normal_cdf(z));
    }
    for &(a, b) in &[(0.5, 0.5), (2.0, 3.0), (10.0, 1.5), (30.0, 40.0)] {
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            assert!((beta_inc(a, b, x) - beta_reg(a, b, x)).abs() < 1e-10, "a={a} b={b} x={x}");
        }
    }
    for &df in &[1.0, 3.0, 10.0, 50.0] {
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        for &t in &[0.0, 0.5, 1.96, 4.0] {
            let expected = 2.0 * (1.0 - dist.cdf(t));
            assert!((student_t_two_sided(t, df) - expected).abs() < 1e-10);
        }
    }
}

#[test]
fn shapiro_wilk_published_sample() {
    let weights = [148.0, 154.0, 158.0, 160.0, 161.0, 162.0, 166.0, 170.0, 182.0, 195.0, 236.0];
    let r = shapiro_wilk(&weights).unwrap();
    assert!((r.w - 0.7888).abs() < 1e-3, "{}", r.w);
    assert!(!r.is_gaussian);
}

#[test]
fn shapiro_wilk_rejection_rate_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for n in [6usize, 12, 30] {
        let trials = 4000;
        let rejected = (0..trials)
            .filter(|_| {
                let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                !shapiro_wilk(&x).unwrap().is_gaussian
            })
            .count();
        let rate = rejected as f64 / trials as f64;
        assert!((0.035..0.065).contains(&rate), "n={n}: {rate}");
    }
    let exponential: Vec<f64> = (0..40).map(|_| -rng.random::<f64>().ln()).collect();
    assert!(!shapiro_wilk(&exponential).unwrap().is_gaussian);
}

#[test]
fn gate_chooses_test_by_normality() {
    let a = [4.9, 5.1, 5.0, 4.8, 5.2, 5.05];
    let b = [6.1, 5.9, 6.0, 6.2, 5.8, 6.05];
    assert_eq!(gated_test(&a, &b).unwrap().test_used, TestKind::TTest);
    let skewed = [1.0, 1.0, 1.0, 1.0, 10.0, 1.1];
    assert_eq!(gated_test(&skewed, &b).unwrap().test_used, TestKind::MannWhitney);
    assert_eq!(gated_test(&[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap().test_used, TestKind::MannWhitney);
}
