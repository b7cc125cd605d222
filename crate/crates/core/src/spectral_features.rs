//! Band-limited spectral descriptors of weighted spectrograms.
//!
//! Every feature is a time average over frames. Ratio-type features skip
//! frames whose relevant power is zero and return `None` when no frame is
//! left; flux is a plain sum over all frames.

use std::fmt;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occlusion::WeightedSpectrogram;
use crate::spectrogram::{bin_frequency, LOG_FLOOR, N_BINS};

/// Cumulative power fraction that defines the roll-off bin.
pub const ROLLOFF_FRACTION: f64 = 0.85;
/// Order of the Rényi entropy.
pub const RENYI_ORDER: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    B1,
    B2,
    B3,
    B4,
    B5,
    B,
}

impl Band {
    pub const ALL: [Band; 6] = [Band::B1, Band::B2, Band::B3, Band::B4, Band::B5, Band::B];
    pub const SUB_BANDS: [Band; 5] = [Band::B1, Band::B2, Band::B3, Band::B4, Band::B5];

    pub fn as_str(self) -> &'static str {
        match self {
            Band::B1 => "B1",
            Band::B2 => "B2",
            Band::B3 => "B3",
            Band::B4 => "B4",
            Band::B5 => "B5",
            Band::B => "B",
        }
    }

    /// `[lo, hi)` in Hz.
    pub fn hz(self) -> (f64, f64) {
        match self {
            Band::B1 => (0.0, 500.0),
            Band::B2 => (500.0, 1000.0),
            Band::B3 => (1000.0, 1500.0),
            Band::B4 => (1500.0, 2000.0),
            Band::B5 => (2000.0, 4410.0),
            Band::B => (0.0, 4410.0),
        }
    }

    /// Bins whose centre frequency lies in the band.
    pub fn bins(self) -> RangeInclusive<usize> {
        let (lo, hi) = self.hz();
        let inside: Vec<usize> = (0..N_BINS)
            .filter(|&k| {
                let f = bin_frequency(k);
                f >= lo && f < hi
            })
            .collect();
        inside[0]..=inside[inside.len() - 1]
    }

    pub fn definition(self) -> BandDefinition {
        let (lo_hz, hi_hz) = self.hz();
        BandDefinition {
            id: self,
            lo_hz,
            hi_hz,
            bins: self.bins().collect(),
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Band::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown band {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub id: Band,
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub bins: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    /// Relative band power; AC power for the full band.
    Rp,
    SpBw,
    SpCf,
    SpF,
    SpFx,
    SpRe,
    SpR,
}

impl Feature {
    pub const ALL: [Feature; 7] = [
        Feature::Rp,
        Feature::SpBw,
        Feature::SpCf,
        Feature::SpF,
        Feature::SpFx,
        Feature::SpRe,
        Feature::SpR,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Rp => "RP",
            Feature::SpBw => "SpBW",
            Feature::SpCf => "SpCF",
            Feature::SpF => "SpF",
            Feature::SpFx => "SpFx",
            Feature::SpRe => "SpRE",
            Feature::SpR => "SpR",
        }
    }

    /// Name of the feature on a given band (`AC` replaces `RP` on `B`).
    pub fn label(self, band: Band) -> &'static str {
        match (self, band) {
            (Feature::Rp, Band::B) => "AC",
            _ => self.as_str(),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "AC" {
            return Ok(Feature::Rp);
        }
        Feature::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown feature {s:?}")))
    }
}

/// `ws` with every bin outside `band` zeroed.
pub fn band_slice(ws: ArrayView2<'_, f64>, band: Band) -> Array2<f64> {
    let bins = band.bins();
    let mut out = ws.to_owned();
    for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        if !bins.contains(&k) {
            row.fill(0.0);
        }
    }
    out
}

fn band_column<'a>(ws: ArrayView2<'a, f64>, band: Band, n: usize) -> ArrayView1<'a, f64> {
    let bins = band.bins();
    ws.slice_move(ndarray::s![*bins.start()..=*bins.end(), n])
}

/// Mean of `per_frame` over the frames where it is defined.
fn frame_mean(ws: ArrayView2<'_, f64>, mut per_frame: impl FnMut(usize) -> Option<f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for n in 0..ws.ncols() {
        if let Some(v) = per_frame(n) {
            sum += v;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn positive(x: f64) -> Option<f64> {
    (x > 0.0).then_some(x)
}

pub fn relative_power(ws: ArrayView2<'_, f64>, band: Band) -> Option<f64> {
    frame_mean(ws, |n| {
        let total = positive(ws.column(n).sum())?;
        Some(band_column(ws, band, n).sum() / total)
    })
}

/// Fraction of each frame's power outside the DC bin, averaged over frames.
pub fn ac_power(ws: ArrayView2<'_, f64>) -> Option<f64> {
    frame_mean(ws, |n| {
        let col = ws.column(n);
        let total = positive(col.sum())?;
        Some(col.slice(ndarray::s![1..]).sum() / total)
    })
}

/// Power-weighted mean frequency of frame `n` within `band`.
pub fn spectral_centroid(ws: ArrayView2<'_, f64>, band: Band, n: usize) -> Option<f64> {
    let col = band_column(ws, band, n);
    let power = positive(col.sum())?;
    let start = *band.bins().start();
    Some(col.iter().enumerate().map(|(i, &s)| bin_frequency(start + i) * s).sum::<f64>() / power)
}

/// Power-weighted frequency variance around the centroid (Hz²).
pub fn spectral_bandwidth(ws: ArrayView2<'_, f64>, band: Band) -> Option<f64> {
    let start = *band.bins().start();
    frame_mean(ws, |n| {
        let c = spectral_centroid(ws, band, n)?;
        let col = band_column(ws, band, n);
        let power = col.sum();
        Some(
            col.iter()
                .enumerate()
                .map(|(i, &s)| (bin_frequency(start + i) - c).powi(2) * s)
                .sum::<f64>()
                / power,
        )
    })
}

/// Peak bin over `C` times band power, with `C = 1 / (f_max - f_min + 1)`.
pub fn spectral_crest(ws: ArrayView2<'_, f64>, band: Band) -> Option<f64> {
    let bins = band.bins();
    let c = 1.0 / (bin_frequency(*bins.end()) - bin_frequency(*bins.start()) + 1.0);
    frame_mean(ws, |n| {
        let col = band_column(ws, band, n);
        let power = positive(col.sum())?;
        let peak = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(peak / (c * power))
    })
}

/// Geometric over arithmetic mean of the floored band bins.
pub fn spectral_flatness(ws: ArrayView2<'_, f64>, band: Band) -> Option<f64> {
    frame_mean(ws, |n| {
        let col = band_column(ws, band, n);
        positive(col.sum())?;
        let m = col.len() as f64;
        let floored = col.mapv(|s| s.max(LOG_FLOOR));
        let gm = (floored.iter().map(|s| s.ln()).sum::<f64>() / m).exp();
        let am = floored.sum() / m;
        Some((gm / am).min(1.0))
    })
}

/// Mean frame-to-frame change of band bins, using raw (unsquared)
/// differences. Undefined only when the band never carries power.
pub fn spectral_flux(ws: ArrayView2<'_, f64>, band: Band) -> Option<f64> {
    let frames = ws.ncols();
    let slice = band_slice(ws, band);
    if frames < 2 || !slice.iter().any(|&v| v > 0.0) {
        return None;
    }
    let mut total = 0.0;
    for n in 1..frames {
        for k in band.bins() {
            total += slice[(k, n)] - slice[(k, n - 1)];
        }
    }
    Some(total / (frames - 1) as f64)
}

/// Order-4 Rényi entropy (natural log) of each frame's normalized band bins.
pub fn renyi_entropy(ws: ArrayView2<'_, f64>, band: Band) -> Option<f64> {
    frame_mean(ws, |n| {
        let col = band_column(ws, band, n);
        let power = positive(col.sum())?;
        let sum_q: f64 = col.iter().map(|&s| (s / power).powf(RENYI_ORDER)).sum();
        Some((sum_q.ln() / (1.0 - RENYI_ORDER)).max(0.0))
    })
}

/// Mean frequency of the first band bin at which cumulative power reaches
/// [`ROLLOFF_FRACTION`] of the band power.
pub fn spectral_rolloff(ws: ArrayView2<'_, f64>, band: Band) -> Option<f64> {
    let start = *band.bins().start();
    frame_mean(ws, |n| {
        let col = band_column(ws, band, n);
        let target = ROLLOFF_FRACTION * positive(col.sum())?;
        let mut acc = 0.0;
        for (i, &s) in col.iter().enumerate() {
            acc += s;
            if acc >= target {
                return Some(bin_frequency(start + i));
            }
        }
        Some(bin_frequency(start + col.len() - 1))
    })
}

/// All features of one band; `rp` holds AC power for the full band.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BandFeatures {
    pub rp: Option<f64>,
    pub spbw: Option<f64>,
    pub spcf: Option<f64>,
    pub spf: Option<f64>,
    pub spfx: Option<f64>,
    pub spre: Option<f64>,
    pub spr: Option<f64>,
}

impl BandFeatures {
    pub fn compute(ws: ArrayView2<'_, f64>, band: Band) -> Self {
        Self {
            rp: match band {
                Band::B => ac_power(ws),
                _ => relative_power(ws, band),
            },
            spbw: spectral_bandwidth(ws, band),
            spcf: spectral_crest(ws, band),
            spf: spectral_flatness(ws, band),
            spfx: spectral_flux(ws, band),
            spre: renyi_entropy(ws, band),
            spr: spectral_rolloff(ws, band),
        }
    }

    pub fn get(&self, feature: Feature) -> Option<f64> {
        match feature {
            Feature::Rp => self.rp,
            Feature::SpBw => self.spbw,
            Feature::SpCf => self.spcf,
            Feature::SpF => self.spf,
            Feature::SpFx => self.spfx,
            Feature::SpRe => self.spre,
            Feature::SpR => self.spr,
        }
    }

    fn set(&mut self, feature: Feature, v: Option<f64>) {
        let slot = match feature {
            Feature::Rp => &mut self.rp,
            Feature::SpBw => &mut self.spbw,
            Feature::SpCf => &mut self.spcf,
            Feature::SpF => &mut self.spf,
            Feature::SpFx => &mut self.spfx,
            Feature::SpRe => &mut self.spre,
            Feature::SpR => &mut self.spr,
        };
        *slot = v;
    }
}

/// One row of the feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub patient_id: String,
    pub th: f64,
    pub band: Band,
    pub features: BandFeatures,
}

/// Features of every band (B1..B5, then B) of a weighted spectrogram.
pub fn feature_vector(ws: &WeightedSpectrogram) -> Vec<FeatureRow> {
    Band::ALL
        .into_iter()
        .map(|band| FeatureRow {
            patient_id: ws.patient_id.clone(),
            th: ws.th,
            band,
            features: BandFeatures::compute(ws.values.view(), band),
        })
        .collect()
}

const HEADER: [&str; 10] = ["patient_id", "Th", "band", "RP", "SpBW", "SpCF", "SpF", "SpFx", "SpRE", "SpR"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_features_csv(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(HEADER).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let mut rec = vec![r.patient_id.clone(), r.th.to_string(), r.band.to_string()];
        rec.extend(Feature::ALL.iter().map(|&f| cell(r.features.get(f))));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.iter().ne(HEADER) {
        return Err(Error::invalid(format!("{}: unexpected header {:?}", path.display(), headers)));
    }
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::invalid(format!("{}: bad {what} value {s:?}", path.display())))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let mut features = BandFeatures::default();
        for (i, &f) in Feature::ALL.iter().enumerate() {
            let s = &rec[3 + i];
            features.set(f, if s.is_empty() { None } else { Some(parse(s, f.as_str())?) });
        }
        rows.push(FeatureRow {
            patient_id: rec[0].to_string(),
            th: parse(&rec[1], "Th")?,
            band: rec[2].parse()?,
            features,
        });
    }
    Ok(rows)
}
