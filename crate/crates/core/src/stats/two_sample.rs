//! Unpaired two-sample tests: pooled-variance Student t and Mann-Whitney U.

use serde::{Deserialize, Serialize};

use super::special::{normal_sf, student_t_two_sided};
use crate::error::{Error, Result};

/// Mann-Whitney uses the exact null distribution up to this total sample
/// size when there are no ties.
pub const EXACT_MAX_TOTAL: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    /// Set when both samples are constant and equal (t undefined, p = 1).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    /// `min(U1, U2)`.
    pub u: f64,
    /// U statistic of the first sample.
    pub u1: f64,
    pub p_value: f64,
    pub exact: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Two-sided pooled-variance t-test.
pub fn t_test_unpaired(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    let (n1, n2) = (a.len(), b.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::invalid(format!("t-test needs two values per sample, got {n1} and {n2}")));
    }
    check_finite(a, "t-test sample")?;
    check_finite(b, "t-test sample")?;
    let (m1, m2) = (mean(a), mean(b));
    let ss1: f64 = a.iter().map(|v| (v - m1).powi(2)).sum();
    let ss2: f64 = b.iter().map(|v| (v - m2).powi(2)).sum();
    let df = (n1 + n2 - 2) as f64;
    let sp2 = (ss1 + ss2) / df;
    let se = (sp2 * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return Ok(if m1 == m2 {
            TTestResult {
                t: 0.0,
                df,
                p_value: 1.0,
                degenerate: true,
            }
        } else {
            TTestResult {
                t: f64::INFINITY.copysign(m1 - m2),
                df,
                p_value: 0.0,
                degenerate: false,
            }
        });
    }
    let t = (m1 - m2) / se;
    Ok(TTestResult {
        t,
        df,
        p_value: student_t_two_sided(t, df),
        degenerate: false,
    })
}

/// Midranks (1-based) of `values`, plus the tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Number of rank assignments giving each value of U1, for samples of
/// sizes `n1` and `n2` without ties. Index `u` holds the count for U1 = u.
pub fn u_distribution(n1: usize, n2: usize) -> Vec<u128> {
    // counts[m][n][u] via c(u; m, n) = c(u - n; m - 1, n) + c(u; m, n - 1)
    let max_u = n1 * n2;
    let mut table: Vec<Vec<Vec<u128>>> = vec![vec![Vec::new(); n2 + 1]; n1 + 1];
    for m in 0..=n1 {
        for n in 0..=n2 {
            let mut c = vec![0u128; m * n + 1];
            if m == 0 || n == 0 {
                c[0] = 1;
            } else {
                for (u, slot) in c.iter_mut().enumerate() {
                    let from_m = if u >= n { table[m - 1][n].get(u - n).copied().unwrap_or(0) } else { 0 };
                    let from_n = table[m][n - 1].get(u).copied().unwrap_or(0);
                    *slot = from_m + from_n;
                }
            }
            table[m][n] = c;
        }
    }
    let out = std::mem::take(&mut table[n1][n2]);
    debug_assert_eq!(out.len(), max_u + 1);
    out
}

/// Two-sided Mann-Whitney U test.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitneyResult> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::invalid("Mann-Whitney needs at least one value per sample"));
    }
    check_finite(a, "Mann-Whitney sample")?;
    check_finite(b, "Mann-Whitney sample")?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u1 = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let nn = (n1 * n2) as f64;
    let u = u1.min(nn - u1);

    if ties.is_empty() && n1 + n2 <= EXACT_MAX_TOTAL {
        let dist = u_distribution(n1, n2);
        let total: u128 = dist.iter().sum();
        let below: u128 = dist[..=(u as usize)].iter().sum();
        return Ok(MannWhitneyResult {
            u,
            u1,
            p_value: (2.0 * below as f64 / total as f64).min(1.0),
            exact: true,
        });
    }

    let n = (n1 + n2) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = nn / 12.0 * ((n + 1.0) - tie_term);
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u1 - nn / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok(MannWhitneyResult { u, u1, p_value: p, exact: false })
}
