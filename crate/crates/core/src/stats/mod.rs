//! Cohort comparisons: a Shapiro-Wilk gate chooses between Student's t and
//! Mann-Whitney U for every (study group, band, feature, threshold) cell.

mod shapiro;
pub mod special;
mod two_sample;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use shapiro::{shapiro_coefficients, shapiro_wilk, NormalityResult, NORMALITY_ALPHA};
pub use two_sample::{
    mann_whitney_u, midranks, t_test_unpaired, u_distribution, MannWhitneyResult, TTestResult, EXACT_MAX_TOTAL,
};

use crate::audio_ingest::{DatasetManifest, Membership, StudyGroup};
use crate::error::{Error, Result};
use crate::spectral_features::{Band, Feature, FeatureRow};

pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    TTest,
    MannWhitney,
    /// A cohort had fewer than two usable values.
    Untestable,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::TTest => "t_test",
            TestKind::MannWhitney => "mann_whitney",
            TestKind::Untestable => "untestable",
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Normality verdict used by the gate; `None` when the cohort is too small
/// to test (fewer than three values).
pub fn is_gaussian(sample: &[f64]) -> Result<Option<bool>> {
    if sample.len() < 3 {
        return Ok(None);
    }
    Ok(Some(shapiro_wilk(sample)?.is_gaussian))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoSampleOutcome {
    pub test_used: TestKind,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub gaussian_c1: Option<bool>,
    pub gaussian_c2: Option<bool>,
}

/// t-test when both samples pass the normality gate, Mann-Whitney
/// otherwise (including when a sample is too small to test for normality).
pub fn gated_test(c1: &[f64], c2: &[f64]) -> Result<TwoSampleOutcome> {
    if c1.len() < 2 || c2.len() < 2 {
        return Ok(TwoSampleOutcome {
            test_used: TestKind::Untestable,
            statistic: None,
            p_value: None,
            gaussian_c1: None,
            gaussian_c2: None,
        });
    }
    let g1 = is_gaussian(c1)?;
    let g2 = is_gaussian(c2)?;
    if g1 == Some(true) && g2 == Some(true) {
        let r = t_test_unpaired(c1, c2)?;
        Ok(TwoSampleOutcome {
            test_used: TestKind::TTest,
            statistic: Some(r.t),
            p_value: Some(r.p_value),
            gaussian_c1: g1,
            gaussian_c2: g2,
        })
    } else {
        let r = mann_whitney_u(c1, c2)?;
        Ok(TwoSampleOutcome {
            test_used: TestKind::MannWhitney,
            statistic: Some(r.u),
            p_value: Some(r.p_value),
            gaussian_c1: g1,
            gaussian_c2: g2,
        })
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparisonResult {
    pub study_group: StudyGroup,
    pub band: Band,
    pub feature: Feature,
    pub th: f64,
    pub test_used: TestKind,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
    /// Sign of `median(C1) - median(C2)`: 1, 0 or -1.
    pub direction: i8,
    pub n1: usize,
    pub n2: usize,
    /// Cohort members without a usable value (no weighted spectrogram or an
    /// undefined feature).
    pub excluded1: usize,
    pub excluded2: usize,
    pub gaussian_c1: Option<bool>,
    pub gaussian_c2: Option<bool>,
}

type CellKey = (String, u64, Band);

fn index_rows(rows: &[FeatureRow]) -> BTreeMap<CellKey, &FeatureRow> {
    rows.iter()
        .map(|r| ((r.patient_id.clone(), r.th.to_bits(), r.band), r))
        .collect()
}

/// Every (group, band, feature, Th) comparison, in that nesting order.
pub fn compare_groups(
    rows: &[FeatureRow],
    manifest: &DatasetManifest,
    groups: &[StudyGroup],
    bands: &[Band],
    ths: &[f64],
) -> Result<Vec<GroupComparisonResult>> {
    if let Some(th) = ths.iter().find(|t| !(0.0..=100.0).contains(*t)) {
        return Err(Error::invalid(format!("threshold {th} outside [0, 100]")));
    }
    let index = index_rows(rows);
    let mut cells = Vec::new();
    for &g in groups {
        for &band in bands {
            for feature in Feature::ALL {
                for &th in ths {
                    cells.push((g, band, feature, th));
                }
            }
        }
    }
    cells
        .par_iter()
        .map(|&(g, band, feature, th)| {
            let collect = |cohort: Membership| {
                let members = manifest.cohort(g, cohort);
                let values: Vec<f64> = members
                    .iter()
                    .filter_map(|p| {
                        index
                            .get(&(p.to_string(), th.to_bits(), band))
                            .and_then(|r| r.features.get(feature))
                            .filter(|v| v.is_finite())
                    })
                    .collect();
                let excluded = members.len() - values.len();
                (values, excluded)
            };
            let (c1, excluded1) = collect(Membership::C1);
            let (c2, excluded2) = collect(Membership::C2);
            if excluded1 + excluded2 > 0 {
                log::debug!(
                    "{g} {band} {} Th={th}: dropped {excluded1} C1 and {excluded2} C2 values",
                    feature.label(band)
                );
            }
            let outcome = gated_test(&c1, &c2)?;
            let direction = match (median(&c1), median(&c2)) {
                (Some(a), Some(b)) if a > b => 1,
                (Some(a), Some(b)) if a < b => -1,
                _ => 0,
            };
            Ok(GroupComparisonResult {
                study_group: g,
                band,
                feature,
                th,
                test_used: outcome.test_used,
                statistic: outcome.statistic,
                p_value: outcome.p_value,
                significant: outcome.p_value.is_some_and(|p| p < SIGNIFICANCE),
                direction,
                n1: c1.len(),
                n2: c2.len(),
                excluded1,
                excluded2,
                gaussian_c1: outcome.gaussian_c1,
                gaussian_c2: outcome.gaussian_c2,
            })
        })
        .collect()
}

/// Minimum-p threshold per (group, band, feature); ties go to the earliest
/// threshold in `results` order. Cells with no testable threshold are
/// omitted.
pub fn best_thresholds(results: &[GroupComparisonResult]) -> Vec<&GroupComparisonResult> {
    let mut best: BTreeMap<(StudyGroup, Band, Feature), &GroupComparisonResult> = BTreeMap::new();
    for r in results {
        let Some(p) = r.p_value else { continue };
        best.entry((r.study_group, r.band, r.feature))
            .and_modify(|b| {
                if p < b.p_value.unwrap_or(f64::INFINITY) {
                    *b = r;
                }
            })
            .or_insert(r);
    }
    best.into_values().collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_bool(v: Option<bool>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const COMPARISONS_FILE: &str = "comparisons.csv";
pub const BEST_FILE: &str = "best_by_band.csv";

/// Long-format table of every comparison cell.
pub fn write_comparisons_csv(path: &Path, results: &[GroupComparisonResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "study_group",
        "band",
        "feature",
        "Th",
        "test",
        "statistic",
        "p_value",
        "significant",
        "direction",
        "n1",
        "n2",
        "excluded_c1",
        "excluded_c2",
        "gaussian_c1",
        "gaussian_c2",
    ])
    .map_err(|e| Error::csv(path, e))?;
    for r in results {
        w.write_record([
            r.study_group.to_string(),
            r.band.to_string(),
            r.feature.label(r.band).to_string(),
            r.th.to_string(),
            r.test_used.to_string(),
            opt(r.statistic),
            opt(r.p_value),
            r.significant.to_string(),
            r.direction.to_string(),
            r.n1.to_string(),
            r.n2.to_string(),
            r.excluded1.to_string(),
            r.excluded2.to_string(),
            opt_bool(r.gaussian_c1),
            opt_bool(r.gaussian_c2),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Wide table: one row per (group, band), and for each feature the best p,
/// the threshold that produced it and its significance flag.
pub fn write_best_csv(path: &Path, results: &[GroupComparisonResult]) -> Result<()> {
    let best = best_thresholds(results);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["study_group".to_string(), "band".to_string()];
    for f in Feature::ALL {
        for suffix in ["p", "th", "sig"] {
            header.push(format!("{}_{suffix}", f.as_str()));
        }
    }
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    let mut rows: BTreeMap<(StudyGroup, Band), BTreeMap<Feature, &GroupComparisonResult>> = BTreeMap::new();
    for r in &results[..] {
        rows.entry((r.study_group, r.band)).or_default();
    }
    for b in best {
        rows.entry((b.study_group, b.band)).or_default().insert(b.feature, b);
    }
    for ((g, band), cells) in rows {
        let mut rec = vec![g.to_string(), band.to_string()];
        for f in Feature::ALL {
            match cells.get(&f) {
                Some(r) => {
                    rec.push(opt(r.p_value));
                    rec.push(r.th.to_string());
                    rec.push(r.significant.to_string());
                }
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes both result tables into `dir`.
pub fn write_results(dir: &Path, results: &[GroupComparisonResult]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_comparisons_csv(&dir.join(COMPARISONS_FILE), results)?;
    write_best_csv(&dir.join(BEST_FILE), results)
}

/// Reads a long-format comparisons table back.
pub fn read_comparisons_csv(path: &Path) -> Result<Vec<GroupComparisonResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let bad = |what: &str, s: &str| Error::invalid(format!("{}: bad {what} {s:?}", path.display()));
    let num = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(what, s))
        }
    };
    let flag = |s: &str| -> Result<Option<bool>> {
        match s {
            "" => Ok(None),
            "true" => Ok(Some(true)),
            "false" => Ok(Some(false)),
            _ => Err(bad("flag", s)),
        }
    };
    let count = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad("count", s)) };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let test_used = match &rec[4] {
            "t_test" => TestKind::TTest,
            "mann_whitney" => TestKind::MannWhitney,
            "untestable" => TestKind::Untestable,
            s => return Err(bad("test", s)),
        };
        out.push(GroupComparisonResult {
            study_group: rec[0].parse()?,
            band: rec[1].parse()?,
            feature: rec[2].parse()?,
            th: num(&rec[3], "Th")?.ok_or_else(|| bad("Th", ""))?,
            test_used,
            statistic: num(&rec[5], "statistic")?,
            p_value: num(&rec[6], "p_value")?,
            significant: flag(&rec[7])?.unwrap_or(false),
            direction: rec[8].parse().map_err(|_| bad("direction", &rec[8]))?,
            n1: count(&rec[9])?,
            n2: count(&rec[10])?,
            excluded1: count(&rec[11])?,
            excluded2: count(&rec[12])?,
            gaussian_c1: flag(&rec[13])?,
            gaussian_c2: flag(&rec[14])?,
        });
    }
    Ok(out)
}
