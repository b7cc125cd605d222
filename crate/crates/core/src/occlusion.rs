//! Occlusion maps: slide a patch over a spectrogram, measure how much the
//! cough probability drops, and turn per-patient mean maps into thresholded
//! weighted spectrograms.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

pub use crate::cnn::Rect;
use crate::cnn::{CnnModel, ForwardMode};
use crate::error::{Error, Result};
use crate::grid_io;
use crate::spectrogram::{Spectrogram, N_BINS, N_FRAMES};

/// Minimum cough probability for a spectrogram to enter the occlusion stage.
pub const CONFIDENCE_CUTOFF: f64 = 0.90;

/// Anything that maps a spectrogram to a cough probability.
pub trait Classifier: Sync {
    fn cough_probability(&self, input: ArrayView2<'_, f32>) -> Result<f64>;

    /// Baseline probability and the probability with each rectangle filled.
    fn occluded_probabilities(&self, input: ArrayView2<'_, f32>, rects: &[Rect], fill: f32) -> Result<(f64, Vec<f64>)> {
        let baseline = self.cough_probability(input)?;
        let mut work = input.to_owned();
        let mut out = Vec::with_capacity(rects.len());
        for r in rects {
            work.slice_mut(ndarray::s![r.r0..r.r1, r.c0..r.c1]).fill(fill);
            out.push(self.cough_probability(work.view())?);
            work.slice_mut(ndarray::s![r.r0..r.r1, r.c0..r.c1])
                .assign(&input.slice(ndarray::s![r.r0..r.r1, r.c0..r.c1]));
        }
        Ok((baseline, out))
    }
}

impl Classifier for CnnModel {
    fn cough_probability(&self, input: ArrayView2<'_, f32>) -> Result<f64> {
        self.forward_view(input, ForwardMode::Eval).map(|(_, p)| p)
    }

    fn occluded_probabilities(&self, input: ArrayView2<'_, f32>, rects: &[Rect], fill: f32) -> Result<(f64, Vec<f64>)> {
        self.occluded_cough_probabilities(input, rects, fill)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Patch height in frequency bins.
    pub patch_height: usize,
    /// Patch width in frames.
    pub patch_width: usize,
    pub stride_k: usize,
    pub stride_n: usize,
    pub fill: f32,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            patch_height: 5,
            patch_width: 10,
            stride_k: 1,
            stride_n: 1,
            fill: 0.0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.patch_height == 0 || self.patch_width == 0 || self.stride_k == 0 || self.stride_n == 0 {
            return Err(Error::invalid("patch sizes and strides must be at least 1"));
        }
        if self.patch_height > rows || self.patch_width > cols {
            return Err(Error::invalid(format!(
                "patch {}x{} larger than the {rows}x{cols} input",
                self.patch_height, self.patch_width
            )));
        }
        if !self.fill.is_finite() {
            return Err(Error::invalid("fill value must be finite"));
        }
        Ok(())
    }

    /// Every patch position of the sweep over a `rows x cols` input. The
    /// last position along each axis is always flush with the edge, so every
    /// pixel is covered by at least one patch.
    pub fn patches(&self, rows: usize, cols: usize) -> Result<Vec<Rect>> {
        self.validate(rows, cols)?;
        let ks = starts(rows, self.patch_height, self.stride_k);
        let ns = starts(cols, self.patch_width, self.stride_n);
        Ok(ks
            .iter()
            .flat_map(|&r0| {
                ns.iter().map(move |&c0| Rect {
                    r0,
                    r1: r0 + self.patch_height,
                    c0,
                    c1: c0 + self.patch_width,
                })
            })
            .collect())
    }
}

fn starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    pub values: Array2<f64>,
    pub mask_cfg: MaskConfig,
    /// Unoccluded cough probability.
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanOcclusionMap {
    pub values: Array2<f64>,
    pub patient_id: String,
    /// Number of maps averaged.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSpectrogram {
    pub values: Array2<f64>,
    pub patient_id: String,
    /// Threshold percentile in `[0, 100]`.
    pub th: f64,
    pub alpha: f64,
}

/// Indices of the spectrograms whose cough probability is at least
/// [`CONFIDENCE_CUTOFF`].
pub fn select_confident<C: Classifier + ?Sized>(model: &C, specs: &[Spectrogram]) -> Result<Vec<usize>> {
    select_confident_at(model, specs, CONFIDENCE_CUTOFF)
}

pub fn select_confident_at<C: Classifier + ?Sized>(model: &C, specs: &[Spectrogram], cutoff: f64) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        if model.cough_probability(s.view())? >= cutoff {
            keep.push(i);
        }
    }
    if keep.is_empty() {
        log::warn!("none of {} spectrograms reached cough probability {cutoff}", specs.len());
    }
    Ok(keep)
}

pub fn occlusion_map<C: Classifier + ?Sized>(model: &C, spec: &Spectrogram, cfg: &MaskConfig) -> Result<OcclusionMap> {
    occlusion_map_view(model, spec.view(), cfg)
}

pub fn occlusion_map_view<C: Classifier + ?Sized>(model: &C, input: ArrayView2<'_, f32>, cfg: &MaskConfig) -> Result<OcclusionMap> {
    let (rows, cols) = input.dim();
    let rects = cfg.patches(rows, cols)?;
    let (baseline, probs) = model.occluded_probabilities(input, &rects, cfg.fill)?;
    if probs.len() != rects.len() {
        return Err(Error::shape(rects.len(), probs.len()));
    }
    let mut sum = Array2::<f64>::zeros((rows, cols));
    let mut cover = Array2::<u32>::zeros((rows, cols));
    for (r, p) in rects.iter().zip(&probs) {
        let drop = (baseline - p).max(0.0);
        sum.slice_mut(ndarray::s![r.r0..r.r1, r.c0..r.c1]).mapv_inplace(|v| v + drop);
        cover.slice_mut(ndarray::s![r.r0..r.r1, r.c0..r.c1]).mapv_inplace(|v| v + 1);
    }
    Zip::from(&mut sum).and(&cover).for_each(|s, &c| {
        if c > 0 {
            *s /= c as f64;
        }
    });
    Ok(OcclusionMap {
        values: min_max(sum),
        mask_cfg: *cfg,
        baseline,
    })
}

fn min_max(mut m: Array2<f64>) -> Array2<f64> {
    let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        m.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        m.fill(0.0);
    }
    m
}

/// Pixelwise mean of equally shaped matrices. Values are sorted per pixel
/// before summation so the result does not depend on input order.
fn pixel_mean<'a>(mats: impl ExactSizeIterator<Item = ArrayView2<'a, f64>> + Clone) -> Result<Array2<f64>> {
    let n = mats.len();
    let first = mats.clone().next().ok_or_else(|| Error::invalid("nothing to average"))?;
    let dim = first.dim();
    if let Some(bad) = mats.clone().find(|m| m.dim() != dim) {
        return Err(Error::shape(format!("{dim:?}"), format!("{:?}", bad.dim())));
    }
    let views: Vec<ArrayView2<'a, f64>> = mats.collect();
    let mut buf = Vec::with_capacity(n);
    Ok(Array2::from_shape_fn(dim, |idx| {
        buf.clear();
        buf.extend(views.iter().map(|v| v[idx]));
        buf.sort_by(f64::total_cmp);
        buf.iter().sum::<f64>() / n as f64
    }))
}

pub fn average_maps(patient_id: &str, maps: &[OcclusionMap]) -> Result<MeanOcclusionMap> {
    if maps.is_empty() {
        return Err(Error::invalid(format!("no occlusion maps for patient {patient_id}")));
    }
    Ok(MeanOcclusionMap {
        values: pixel_mean(maps.iter().map(|m| m.values.view()))?,
        patient_id: patient_id.to_string(),
        count: maps.len(),
    })
}

/// Linear-interpolation percentile at rank `(th / 100) * (M - 1)` of the
/// sorted values.
pub fn percentile(values: &[f64], th: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&th) {
        return Err(Error::invalid(format!("percentile {th} outside [0, 100]")));
    }
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = th / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

pub fn percentile_threshold(map: &MeanOcclusionMap, th: f64) -> Result<f64> {
    let values: Vec<f64> = map.values.iter().copied().collect();
    percentile(&values, th)
}

/// Mean of `specs`, zeroed wherever the mean occlusion map is not strictly
/// above `alpha`.
pub fn weighted_spectrogram(specs: &[Spectrogram], mean_map: &MeanOcclusionMap, th: f64, alpha: f64) -> Result<WeightedSpectrogram> {
    if specs.is_empty() {
        return Err(Error::invalid(format!("no spectrograms for patient {}", mean_map.patient_id)));
    }
    let as_f64: Vec<Array2<f64>> = specs.iter().map(|s| s.values().mapv(f64::from)).collect();
    let mut mean = pixel_mean(as_f64.iter().map(|a| a.view()))?;
    if mean.dim() != mean_map.values.dim() {
        return Err(Error::shape(format!("{:?}", mean_map.values.dim()), format!("{:?}", mean.dim())));
    }
    Zip::from(&mut mean).and(&mean_map.values).for_each(|s, &m| {
        if !(m > alpha) {
            *s = 0.0;
        }
    });
    Ok(WeightedSpectrogram {
        values: mean,
        patient_id: mean_map.patient_id.clone(),
        th,
        alpha,
    })
}

/// JSON written next to every map or weighted-spectrogram grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub patient_id: String,
    #[serde(rename = "P")]
    pub count: usize,
    #[serde(rename = "Th")]
    pub th: Option<f64>,
    pub alpha: Option<f64>,
    pub mask_cfg: MaskConfig,
}

fn sidecar_path(grid: &Path) -> PathBuf {
    grid.with_extension("json")
}

fn write_sidecar(grid: &Path, sidecar: &MapSidecar) -> Result<()> {
    let path = sidecar_path(grid);
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_sidecar(grid: &Path) -> Result<MapSidecar> {
    let path = sidecar_path(grid);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// File stem for a weighted spectrogram: `<patient>_th<Th>`.
pub fn weighted_file_name(patient_id: &str, th: f64) -> String {
    format!("{patient_id}_th{th}.f32")
}

pub fn save_mean_map(dir: &Path, map: &MeanOcclusionMap, mask_cfg: &MaskConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}_mean_map.f32", map.patient_id));
    grid_io::write_f64_grid_as_f32(&path, &map.values)?;
    write_sidecar(
        &path,
        &MapSidecar {
            patient_id: map.patient_id.clone(),
            count: map.count,
            th: None,
            alpha: None,
            mask_cfg: *mask_cfg,
        },
    )?;
    Ok(path)
}

pub fn load_mean_map(path: &Path) -> Result<(MeanOcclusionMap, MaskConfig)> {
    let side = read_sidecar(path)?;
    let values = grid_io::read_f32_grid(path, N_BINS, N_FRAMES)?.mapv(f64::from);
    Ok((
        MeanOcclusionMap {
            values,
            patient_id: side.patient_id,
            count: side.count,
        },
        side.mask_cfg,
    ))
}

pub fn save_weighted(dir: &Path, ws: &WeightedSpectrogram, count: usize, mask_cfg: &MaskConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(weighted_file_name(&ws.patient_id, ws.th));
    grid_io::write_f64_grid_as_f32(&path, &ws.values)?;
    write_sidecar(
        &path,
        &MapSidecar {
            patient_id: ws.patient_id.clone(),
            count,
            th: Some(ws.th),
            alpha: Some(ws.alpha),
            mask_cfg: *mask_cfg,
        },
    )?;
    Ok(path)
}

pub fn load_weighted(path: &Path) -> Result<(WeightedSpectrogram, MapSidecar)> {
    let side = read_sidecar(path)?;
    let values = grid_io::read_f32_grid(path, N_BINS, N_FRAMES)?.mapv(f64::from);
    let th = side
        .th
        .ok_or_else(|| Error::invalid(format!("{} lacks a threshold", path.display())))?;
    let alpha = side
        .alpha
        .ok_or_else(|| Error::invalid(format!("{} lacks alpha", path.display())))?;
    Ok((
        WeightedSpectrogram {
            values,
            patient_id: side.patient_id.clone(),
            th,
            alpha,
        },
        side,
    ))
}

/// All weighted spectrograms in `dir`, sorted by (patient, Th).
pub fn load_weighted_dir(dir: &Path) -> Result<Vec<WeightedSpectrogram>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_weighted = path.extension().is_some_and(|e| e == "f32")
            && path
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.contains("_th"));
        if is_weighted {
            out.push(load_weighted(&path)?.0);
        }
    }
    out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id).then(a.th.total_cmp(&b.th)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64);

    impl Classifier for Constant {
        fn cough_probability(&self, _: ArrayView2<'_, f32>) -> Result<f64> {
            Ok(self.0)
        }
    }

    /// Probability is a logistic function of a single pixel.
    struct Pixel(usize, usize);

    impl Classifier for Pixel {
        fn cough_probability(&self, x: ArrayView2<'_, f32>) -> Result<f64> {
            Ok(1.0 / (1.0 + (-4.0 * x[(self.0, self.1)] as f64).exp()))
        }
    }

    fn spec(fill: f32) -> Spectrogram {
        Spectrogram::new(Array2::from_elem((N_BINS, N_FRAMES), fill)).unwrap()
    }

    #[test]
    fn patch_positions_cover_edges() {
        assert_eq!(starts(45, 5, 1).len(), 41);
        assert_eq!(starts(100, 10, 4), vec![0, 4, 8, 12, 16, 20, 24, 28, 32, 36, 40, 44, 48, 52, 56, 60, 64, 68, 72, 76, 80, 84, 88, 90]);
        assert_eq!(starts(5, 5, 3), vec![0]);
        assert!(MaskConfig::default().patches(4, 100).is_err());
    }

    #[test]
    fn constant_model_gives_zero_map() {
        let m = occlusion_map(&Constant(0.7), &spec(0.5), &MaskConfig::default()).unwrap();
        assert_eq!(m.values.dim(), (45, 100));
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_probe_localizes() {
        let probe = Pixel(17, 63);
        let m = occlusion_map(&probe, &spec(0.8), &MaskConfig::default()).unwrap();
        let argmax = m
            .values
            .indexed_iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(argmax, (17, 63));
        assert_eq!(m.values[(17, 63)], 1.0);
    }

    #[test]
    fn confident_selection_is_inclusive() {
        let specs = [spec(0.1), spec(0.2), spec(0.3)];
        struct ByLevel;
        impl Classifier for ByLevel {
            fn cough_probability(&self, x: ArrayView2<'_, f32>) -> Result<f64> {
                Ok(match (x[(0, 0)] * 10.0).round() as i32 {
                    1 => 0.95,
                    2 => 0.90,
                    _ => 0.89,
                })
            }
        }
        assert_eq!(select_confident(&ByLevel, &specs).unwrap(), vec![0, 1]);
        assert!(select_confident(&Constant(0.5), &specs).unwrap().is_empty());
    }

    #[test]
    fn averaging_cases() {
        let z = OcclusionMap {
            values: Array2::zeros((45, 100)),
            mask_cfg: MaskConfig::default(),
            baseline: 1.0,
        };
        let o = OcclusionMap {
            values: Array2::ones((45, 100)),
            ..z.clone()
        };
        let single = average_maps("p", std::slice::from_ref(&o)).unwrap();
        assert_eq!((single.values, single.count), (o.values.clone(), 1));
        let both = average_maps("p", &[z, o]).unwrap();
        assert!(both.values.iter().all(|&v| v == 0.5));
        assert!(average_maps("p", &[]).is_err());
    }

    #[test]
    fn percentile_cases() {
        assert_eq!(percentile(&[0.0, 1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.0);
        assert!((percentile(&[0.0, 1.0, 2.0, 3.0], 70.0).unwrap() - 2.1).abs() < 1e-12);
        assert_eq!(percentile(&[0.3; 10], 37.0).unwrap(), 0.3);
        assert!(percentile(&[1.0], 100.5).is_err());
        assert!(percentile(&[1.0], -1.0).is_err());
    }

    #[test]
    fn mask_extremes() {
        let mean_map = MeanOcclusionMap {
            values: Array2::from_shape_fn((45, 100), |(k, n)| (k * 100 + n) as f64 / 4499.0),
            patient_id: "p".into(),
            count: 1,
        };
        let specs = [spec(0.25), spec(0.75)];
        let all = weighted_spectrogram(&specs, &mean_map, 0.0, -1.0).unwrap();
        assert!(all.values.iter().all(|&v| v == 0.5));
        let none = weighted_spectrogram(&specs, &mean_map, 100.0, 1.0).unwrap();
        assert!(none.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ws = WeightedSpectrogram {
            values: Array2::from_elem((45, 100), 0.25),
            patient_id: "P01".into(),
            th: 70.0,
            alpha: 0.4,
        };
        let path = save_weighted(dir.path(), &ws, 3, &MaskConfig::default()).unwrap();
        let (back, side) = load_weighted(&path).unwrap();
        assert_eq!(back, ws);
        assert_eq!(side.count, 3);
        let text = fs::read_to_string(path.with_extension("json")).unwrap();
        assert!(text.contains("\"P\": 3") && text.contains("\"Th\": 70.0"));
        assert_eq!(load_weighted_dir(dir.path()).unwrap().len(), 1);
    }
}
