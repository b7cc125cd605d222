//! Shapiro-Wilk normality test with Royston's approximations for the
//! coefficients and the null distribution of W.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::special::{normal_quantile, normal_sf};
use crate::error::{Error, Result};

pub const NORMALITY_ALPHA: f64 = 0.05;

const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const G: [f64; 2] = [-2.273, 0.459];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityResult {
    pub w: f64,
    pub p_value: f64,
    pub is_gaussian: bool,
    pub note: Option<String>,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Coefficients `a_1..a_n` for a sample of size `n` (antisymmetric,
/// unit norm).
pub fn shapiro_coefficients(n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n];
    if n == 3 {
        a[0] = -(0.5f64.sqrt());
        a[2] = 0.5f64.sqrt();
        return a;
    }
    let nf = n as f64;
    let m: Vec<f64> = (1..=n).map(|i| normal_quantile((i as f64 - 0.375) / (nf + 0.25))).collect();
    let mm: f64 = m.iter().map(|v| v * v).sum();
    let u = 1.0 / nf.sqrt();
    let an = m[n - 1] / mm.sqrt() + poly(&C1, u);
    if n > 5 {
        let an1 = m[n - 2] / mm.sqrt() + poly(&C2, u);
        let phi = (mm - 2.0 * m[n - 1].powi(2) - 2.0 * m[n - 2].powi(2)) / (1.0 - 2.0 * an * an - 2.0 * an1 * an1);
        for i in 2..n - 2 {
            a[i] = m[i] / phi.sqrt();
        }
        a[n - 2] = an1;
        a[1] = -an1;
    } else {
        let phi = (mm - 2.0 * m[n - 1].powi(2)) / (1.0 - 2.0 * an * an);
        for i in 1..n - 1 {
            a[i] = m[i] / phi.sqrt();
        }
    }
    a[n - 1] = an;
    a[0] = -an;
    a
}

/// Shapiro-Wilk test for `3 <= n <= 5000`. A constant sample is reported
/// as non-Gaussian with a note rather than as an error.
pub fn shapiro_wilk(sample: &[f64]) -> Result<NormalityResult> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::invalid(format!("Shapiro-Wilk needs 3..=5000 values, got {n}")));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Shapiro-Wilk sample".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    if x[0] == x[n - 1] {
        return Ok(NormalityResult {
            w: f64::NAN,
            p_value: 0.0,
            is_gaussian: false,
            note: Some("constant sample".into()),
        });
    }
    let a = shapiro_coefficients(n);
    let mean = x.iter().sum::<f64>() / n as f64;
    let ssq: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let num: f64 = a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum();
    let w = (num * num / ssq).min(1.0);
    let p = w_p_value(w, n);
    Ok(NormalityResult {
        w,
        p_value: p,
        is_gaussian: p >= NORMALITY_ALPHA,
        note: None,
    })
}

fn w_p_value(w: f64, n: usize) -> f64 {
    let nf = n as f64;
    if n == 3 {
        return ((6.0 / PI) * (w.sqrt().asin() - 0.75f64.sqrt().asin())).clamp(0.0, 1.0);
    }
    let mut y = (1.0 - w).ln();
    let (m, s) = if n <= 11 {
        let gamma = poly(&G, nf);
        if y >= gamma {
            return 0.0;
        }
        y = -(gamma - y).ln();
        (poly(&C3, nf), poly(&C4, nf).exp())
    } else {
        let ln_n = nf.ln();
        (poly(&C5, ln_n), poly(&C6, ln_n).exp())
    };
    normal_sf((y - m) / s).clamp(0.0, 1.0)
}
