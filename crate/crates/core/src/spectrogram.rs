//! One-sided log-normalized PSD spectrograms of one-second clips.
//!
//! A clip of 8820 samples is cut into 100 frames of 88 samples (hop 88, the
//! last 20 samples unused). Each frame is Hann-windowed, zero-padded to 89
//! points and transformed; bins 0..=44 of the magnitude-squared spectrum
//! form one column. Bin `k` sits at `k * 8820 / 89` Hz. The resulting 45x100
//! matrix is log10-compressed with a 1e-10 floor and min-max scaled to [0, 1].

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio_ingest::{Clip, ClipLabel, ClipStore, CLIP_LEN, WORKING_RATE};
use crate::error::{Error, Result};
use crate::grid_io::{read_f32_grid, write_f32_grid};

/// Highest frequency index; there are `K + 1` rows.
pub const K: usize = 44;
pub const N_BINS: usize = K + 1;
pub const N_FRAMES: usize = 100;
pub const FRAME_LEN: usize = 88;
pub const DFT_LEN: usize = 2 * K + 1;
pub const LOG_FLOOR: f64 = 1e-10;

/// Frequency of bin `k` in Hz.
pub fn bin_frequency(k: usize) -> f64 {
    k as f64 * WORKING_RATE as f64 / DFT_LEN as f64
}

pub fn frequency_axis() -> Vec<f64> {
    (0..N_BINS).map(bin_frequency).collect()
}

/// Start time of each frame in seconds.
pub fn time_axis() -> Vec<f64> {
    (0..N_FRAMES)
        .map(|n| (n * FRAME_LEN) as f64 / WORKING_RATE as f64)
        .collect()
}

/// A 45x100 spectrogram with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Array2<f32>,
}

impl Spectrogram {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.dim() != (N_BINS, N_FRAMES) {
            return Err(Error::shape(format!("{N_BINS}x{N_FRAMES}"), format!("{:?}", values.dim())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::invalid(format!("spectrogram value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.values
    }
}

fn fft89() -> &'static Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(DFT_LEN))
}

/// Periodic Hann window of [`FRAME_LEN`] points.
pub fn hann_window() -> Vec<f64> {
    (0..FRAME_LEN)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / FRAME_LEN as f64).cos())
        .collect()
}

/// One-sided periodogram of one 88-sample frame, `|X[k]|^2 / 89` for
/// `k = 0..=44`. With bins 1..=44 doubled the bins sum to the windowed
/// frame energy.
pub fn frame_psd(frame: &[f64], window: &[f64]) -> [f64; N_BINS] {
    debug_assert_eq!(frame.len(), FRAME_LEN);
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .zip(window)
        .map(|(x, w)| Complex::new(x * w, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(DFT_LEN)
        .collect();
    fft89().process(&mut buf);
    let mut out = [0.0; N_BINS];
    for (o, c) in out.iter_mut().zip(&buf) {
        *o = c.norm_sqr() / DFT_LEN as f64;
    }
    out
}

/// Raw 45x100 PSD matrix of a one-second, 8820-sample clip.
pub fn raw_psd(samples: &[f64]) -> Result<Array2<f64>> {
    if samples.len() != CLIP_LEN {
        return Err(Error::shape(format!("{CLIP_LEN} samples"), samples.len()));
    }
    let window = hann_window();
    let mut psd = Array2::zeros((N_BINS, N_FRAMES));
    for n in 0..N_FRAMES {
        let frame = &samples[n * FRAME_LEN..(n + 1) * FRAME_LEN];
        let col = frame_psd(frame, &window);
        for (k, v) in col.iter().enumerate() {
            psd[[k, n]] = *v;
        }
    }
    Ok(psd)
}

/// `log10(x + 1e-10)` followed by min-max scaling over the whole matrix.
/// A constant matrix maps to all zeros.
pub fn log_normalize(raw: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(v) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::invalid(format!("psd entry {v} is negative or non-finite")));
    }
    let logs = raw.mapv(|v| (v + LOG_FLOOR).log10());
    let (lo, hi) = logs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if logs.is_empty() || hi <= lo {
        return Ok(Array2::zeros(raw.dim()));
    }
    let range = hi - lo;
    Ok(logs.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0)))
}

pub fn compute_spectrogram(clip: &Clip) -> Result<Spectrogram> {
    spectrogram_from_samples(&clip.samples)
}

pub fn spectrogram_from_samples(samples: &[f64]) -> Result<Spectrogram> {
    let normalized = log_normalize(&raw_psd(samples)?)?;
    Spectrogram::new(normalized.mapv(|v| v as f32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramRecord {
    pub id: String,
    pub patient_id: String,
    pub label: ClipLabel,
    pub file: String,
}

/// Directory of `<id>.f32` spectrograms plus `index.json`.
#[derive(Debug, Clone)]
pub struct SpectrogramStore {
    pub dir: PathBuf,
    pub records: Vec<SpectrogramRecord>,
}

pub const INDEX_FILE: &str = "index.json";

impl SpectrogramStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        let records = serde_json::from_str(&text).map_err(|e| Error::json(&index, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records,
        })
    }

    pub fn load(&self, record: &SpectrogramRecord) -> Result<Spectrogram> {
        Spectrogram::new(read_f32_grid(self.dir.join(&record.file), N_BINS, N_FRAMES)?)
    }

    pub fn load_all(&self) -> Result<Vec<Spectrogram>> {
        self.records.par_iter().map(|r| self.load(r)).collect()
    }

    pub fn for_patient<'a>(&'a self, patient_id: &'a str) -> impl Iterator<Item = &'a SpectrogramRecord> + 'a {
        self.records.iter().filter(move |r| r.patient_id == patient_id)
    }
}

/// Computes and writes a spectrogram for every clip of a clip store.
pub fn build_spectrogram_store(clips: &ClipStore, out_dir: impl AsRef<Path>) -> Result<SpectrogramStore> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = clips
        .records
        .par_iter()
        .map(|rec| {
            let clip = clips.load_clip(rec)?;
            let spec = compute_spectrogram(&clip)?;
            let file = format!("{}.f32", rec.id);
            write_f32_grid(out_dir.join(&file), spec.values())?;
            Ok(SpectrogramRecord {
                id: rec.id.clone(),
                patient_id: rec.patient_id.clone(),
                label: rec.label,
                file,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = out_dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::json(&index, e))?;
    std::fs::write(&index, text).map_err(|e| Error::io(&index, e))?;
    Ok(SpectrogramStore {
        dir: out_dir.to_path_buf(),
        records,
    })
}
