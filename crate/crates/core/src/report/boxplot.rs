//! Boxplot summaries (linear-interpolation quartiles, 1.5 IQR whiskers) for
//! significant comparison cells, with optional SVG rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio_ingest::{DatasetManifest, Membership, StudyGroup};
use crate::error::{Error, Result};
use crate::occlusion::percentile;
use crate::spectral_features::{Band, FeatureRow};
use crate::stats::{GroupComparisonResult, TestKind};

pub const BOXPLOT_FILE: &str = "boxplots.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme data points within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    /// `(patient_id, value)` for every patient in the cohort.
    pub points: Vec<(String, f64)>,
}

/// Summary of a non-empty sample; `None` for an empty one.
pub fn box_stats(points: &[(String, f64)]) -> Option<BoxStats> {
    if points.is_empty() {
        return None;
    }
    let values: Vec<f64> = points.iter().map(|p| p.1).collect();
    let q = |th: f64| percentile(&values, th).expect("non-empty, th in range");
    let (q1, median, q3) = (q(25.0), q(50.0), q(75.0));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = values.iter().copied().filter(|v| *v >= lo_fence && *v <= hi_fence).collect();
    let mut outliers: Vec<f64> = values.iter().copied().filter(|v| *v < lo_fence || *v > hi_fence).collect();
    outliers.sort_by(f64::total_cmp);
    let fold = |init: f64, f: fn(f64, f64) -> f64| values.iter().copied().fold(init, f);
    Some(BoxStats {
        min: fold(f64::INFINITY, f64::min),
        q1,
        median,
        q3,
        max: fold(f64::NEG_INFINITY, f64::max),
        whisker_low: inside.iter().copied().fold(f64::INFINITY, f64::min),
        whisker_high: inside.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        outliers,
        points: points.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotCell {
    pub study_group: StudyGroup,
    pub band: Band,
    pub feature: String,
    #[serde(rename = "Th")]
    pub th: f64,
    pub test: TestKind,
    pub p_value: Option<f64>,
    pub significant: bool,
    pub c1: Option<BoxStats>,
    pub c2: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotData {
    pub note: Option<String>,
    pub cells: Vec<BoxplotCell>,
}

/// Boxplot data for significant cells, or for every testable cell when
/// `all` is set.
pub fn emit_boxplot_data(
    results: &[GroupComparisonResult],
    features: &[FeatureRow],
    manifest: &DatasetManifest,
    all: bool,
) -> BoxplotData {
    let index: BTreeMap<(&str, u64, Band), &FeatureRow> = features
        .iter()
        .map(|r| ((r.patient_id.as_str(), r.th.to_bits(), r.band), r))
        .collect();
    let cohort_points = |r: &GroupComparisonResult, cohort: Membership| -> Vec<(String, f64)> {
        manifest
            .cohort(r.study_group, cohort)
            .into_iter()
            .filter_map(|p| {
                let v = index.get(&(p, r.th.to_bits(), r.band))?.features.get(r.feature)?;
                v.is_finite().then(|| (p.to_string(), v))
            })
            .collect()
    };
    let cells: Vec<BoxplotCell> = results
        .iter()
        .filter(|r| if all { r.p_value.is_some() } else { r.significant })
        .map(|r| BoxplotCell {
            study_group: r.study_group,
            band: r.band,
            feature: r.feature.label(r.band).to_string(),
            th: r.th,
            test: r.test_used,
            p_value: r.p_value,
            significant: r.significant,
            c1: box_stats(&cohort_points(r, Membership::C1)),
            c2: box_stats(&cohort_points(r, Membership::C2)),
        })
        .collect();
    let note = cells.is_empty().then(|| {
        if all {
            "no testable comparison cells".to_string()
        } else {
            "no significant comparison cells (p < 0.05)".to_string()
        }
    });
    BoxplotData { note, cells }
}

pub fn write_boxplot_data(path: &Path, data: &BoxplotData) -> Result<()> {
    let text = serde_json::to_string_pretty(data).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Minimal two-box SVG of one cell.
pub fn render_svg(cell: &BoxplotCell) -> String {
    const W: f64 = 320.0;
    const H: f64 = 240.0;
    const PAD: f64 = 40.0;
    let boxes = [("C1", &cell.c1), ("C2", &cell.c2)];
    let (lo, hi) = boxes
        .iter()
        .filter_map(|(_, b)| b.as_ref())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.min), hi.max(b.max)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y = |v: f64| H - PAD - (v - lo) / span * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="16" text-anchor="middle">{} {} {} Th={} p={}</text>"#,
        W / 2.0,
        cell.study_group,
        cell.band,
        cell.feature,
        cell.th,
        cell.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "n/a".into())
    );
    for (i, (name, b)) in boxes.iter().enumerate() {
        let cx = PAD + (i as f64 + 0.5) * (W - 2.0 * PAD) / 2.0;
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">{name}</text>"#, H - 12.0);
        let Some(b) = b else { continue };
        let half = 30.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#,
            y(b.whisker_low),
            y(b.whisker_high)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}" stroke="black"/>"#,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5),
            if i == 0 { "#f4a6a6" } else { "#a6c8f4" }
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{m}" x2="{}" y2="{m}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            m = y(b.median)
        );
        for o in &b.outliers {
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{}" r="3" fill="none" stroke="black"/>"#, y(*o));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// File name of a cell's SVG.
pub fn svg_file_name(cell: &BoxplotCell) -> String {
    format!("{}_{}_{}_th{}.svg", cell.study_group, cell.band, cell.feature, cell.th)
}

pub fn write_report(dir: &Path, data: &BoxplotData, svg: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_boxplot_data(&dir.join(BOXPLOT_FILE), data)?;
    if svg {
        for cell in &data.cells {
            let path = dir.join(svg_file_name(cell));
            fs::write(&path, render_svg(cell)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<(String, f64)> {
        v.iter().enumerate().map(|(i, &x)| (format!("P{i}"), x)).collect()
    }

    #[test]
    fn quartiles_and_outlier() {
        let b = box_stats(&pts(&[1.0, 2.0, 3.0, 4.0, 100.0])).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 4.0));
        assert_eq!((b.min, b.max), (1.0, 100.0));
    }

    #[test]
    fn single_value_box_is_degenerate() {
        let b = box_stats(&pts(&[7.5])).unwrap();
        assert!([b.min, b.q1, b.median, b.q3, b.max].iter().all(|&v| v == 7.5));
        assert!(box_stats(&[]).is_none());
    }

    #[test]
    fn empty_results_give_note() {
        let m = DatasetManifest::default();
        let d = emit_boxplot_data(&[], &[], &m, false);
        assert!(d.cells.is_empty() && d.note.is_some());
    }
}
