//! Audio decoding, anti-aliased down-sampling, one-second clip segmentation
//! and dataset manifests.
//!
//! Recordings arrive as PCM WAV (typically 44.1 kHz). They are folded to mono,
//! decimated by five to 8820 Hz and cut into consecutive, non-overlapping
//! one-second clips, which are the unit the detector and every later stage
//! work on.

mod manifest;
mod store;

pub use manifest::{cohort_sizes, load_manifest, DatasetManifest, LabelWindow, ManifestEntry, Membership, StudyGroup};
pub use store::{ingest_manifest, read_clip_store, write_clip_store, ClipRecord, ClipStore};

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working sample rate after 5x down-sampling of 44.1 kHz recordings.
pub const WORKING_RATE: u32 = 8820;
/// Samples per one-second clip at [`WORKING_RATE`].
pub const CLIP_LEN: usize = WORKING_RATE as usize;
/// Default down-sampling factor (44100 / 5 = 8820).
pub const DEFAULT_DECIMATION: usize = 5;

const FIR_TAPS: usize = 127;
const CUTOFF_FRACTION: f64 = 0.9;

/// A mono signal with its sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl PcmSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} of pcm signal")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipLabel {
    Cough,
    NonCough,
    Unlabeled,
}

impl ClipLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipLabel::Cough => "cough",
            ClipLabel::NonCough => "non_cough",
            ClipLabel::Unlabeled => "unlabeled",
        }
    }
}

/// One second of audio at [`WORKING_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub samples: Vec<f64>,
    pub patient_id: String,
    pub label: ClipLabel,
    /// Offset of the clip inside its source recording, in seconds.
    pub start_s: f64,
}

impl Clip {
    pub fn new(samples: Vec<f64>, patient_id: impl Into<String>, label: ClipLabel) -> Result<Self> {
        if samples.len() != CLIP_LEN {
            return Err(Error::shape(format!("{CLIP_LEN} clip samples"), samples.len()));
        }
        Ok(Self {
            samples,
            patient_id: patient_id.into(),
            label,
            start_s: 0.0,
        })
    }
}

/// Decodes a PCM WAV file into a mono signal scaled to [-1, 1].
pub fn decode_wav(path: impl AsRef<Path>) -> Result<PcmSignal> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedAudio {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
        (format, bits) => {
            return Err(Error::UnsupportedAudio {
                path: path.to_path_buf(),
                reason: format!("{format:?} samples with {bits} bits"),
            })
        }
    };

    if interleaved.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }

    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    PcmSignal::new(samples, spec.sample_rate)
}

fn wav_error(path: &Path, source: hound::Error) -> Error {
    match source {
        hound::Error::Unsupported => Error::UnsupportedAudio {
            path: path.to_path_buf(),
            reason: "compressed or unsupported wav encoding".into(),
        },
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Wav {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// Writes a mono signal as 16-bit PCM. Samples are clamped to [-1, 1].
pub fn write_wav_i16(path: impl AsRef<Path>, signal: &PcmSignal) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &signal.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Writes a mono signal as 32-bit float PCM.
pub fn write_wav_f32(path: impl AsRef<Path>, signal: &PcmSignal) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &signal.samples {
        writer.write_sample(s as f32).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Linear-phase windowed-sinc low-pass (Hamming window) with unit DC gain.
///
/// `cutoff` is in cycles per sample, in (0, 0.5).
pub(crate) fn lowpass_fir(taps: usize, cutoff: f64) -> Vec<f64> {
    let center = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - center;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= gain);
    h
}

/// Low-pass filters at 0.9 of the new Nyquist frequency and keeps every
/// `factor`-th sample. A factor of one returns the signal unchanged.
pub fn decimate(signal: &PcmSignal, factor: usize) -> Result<PcmSignal> {
    if factor == 0 {
        return Err(Error::invalid("decimation factor must be at least 1"));
    }
    if signal.is_empty() {
        return Err(Error::invalid("cannot decimate an empty signal"));
    }
    if factor == 1 {
        return Ok(signal.clone());
    }
    if signal.sample_rate as usize % factor != 0 {
        return Err(Error::invalid(format!(
            "sample rate {} is not divisible by {factor}",
            signal.sample_rate
        )));
    }

    let cutoff = CUTOFF_FRACTION * 0.5 / factor as f64;
    let h = lowpass_fir(FIR_TAPS, cutoff);
    let half = (FIR_TAPS / 2) as isize;
    let x = &signal.samples;
    let n = x.len() as isize;
    let out_len = x.len() / factor;

    let samples = (0..out_len)
        .map(|m| {
            let center = (m * factor) as isize;
            let lo = (center - half).max(0);
            let hi = (center + half).min(n - 1);
            (lo..=hi)
                .map(|j| h[(j - center + half) as usize] * x[j as usize])
                .sum()
        })
        .collect();

    PcmSignal::new(samples, signal.sample_rate / factor as u32)
}

/// Cuts a working-rate signal into consecutive one-second clips. The trailing
/// remainder shorter than a second is dropped. Each clip is labeled from the
/// label windows by the 50 %-overlap rule (see [`label_for_span`]).
pub fn segment_clips(
    signal: &PcmSignal,
    patient_id: &str,
    labels: Option<&[LabelWindow]>,
) -> Result<Vec<Clip>> {
    if signal.sample_rate != WORKING_RATE {
        return Err(Error::invalid(format!(
            "clips require {WORKING_RATE} Hz input, got {} Hz",
            signal.sample_rate
        )));
    }
    Ok(signal
        .samples
        .chunks_exact(CLIP_LEN)
        .enumerate()
        .map(|(i, chunk)| {
            let start_s = i as f64;
            Clip {
                samples: chunk.to_vec(),
                patient_id: patient_id.to_string(),
                label: labels.map_or(ClipLabel::Unlabeled, |w| label_for_span(w, start_s, start_s + 1.0)),
                start_s,
            }
        })
        .collect())
}

/// Labels the span `[start_s, end_s)`: cough when cough windows cover at least
/// half of it, otherwise non-cough when non-cough windows do, otherwise
/// unlabeled.
pub fn label_for_span(windows: &[LabelWindow], start_s: f64, end_s: f64) -> ClipLabel {
    let span = end_s - start_s;
    let covered = |label: ClipLabel| -> f64 {
        windows
            .iter()
            .filter(|w| w.label == label)
            .map(|w| (w.end_s.min(end_s) - w.start_s.max(start_s)).max(0.0))
            .sum::<f64>()
            .min(span)
    };
    if covered(ClipLabel::Cough) >= 0.5 * span {
        ClipLabel::Cough
    } else if covered(ClipLabel::NonCough) >= 0.5 * span {
        ClipLabel::NonCough
    } else {
        ClipLabel::Unlabeled
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_i16(path: &Path, rate: u32, channels: u16, frames: &[Vec<i16>]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for frame in frames {
            for &s in frame {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn zero_wav_decodes_to_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_i16(&path, 44100, 1, &vec![vec![0]; 44100]);
        let sig = decode_wav(&path).unwrap();
        assert_eq!(sig.sample_rate, 44100);
        assert_eq!(sig.len(), 44100);
        assert!(sig.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_opposite_channels_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        write_i16(&path, 8000, 2, &vec![vec![16384, -16384]; 100]);
        let sig = decode_wav(&path).unwrap();
        assert_eq!(sig.len(), 100);
        assert!(sig.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn integer_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.wav");
        write_i16(&path, 8000, 1, &[vec![16384], vec![-32768]]);
        let sig = decode_wav(&path).unwrap();
        assert!((sig.samples[0] - 16384.0 / 32768.0).abs() < 1.0 / 32768.0);
        assert_eq!(sig.samples[1], -1.0);
    }

    #[test]
    fn float_and_24_bit_decode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let sig = PcmSignal::new(vec![0.25, -0.5], 8820).unwrap();
        write_wav_f32(&path, &sig).unwrap();
        assert_eq!(decode_wav(&path).unwrap(), sig);

        let path = dir.path().join("i24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(1 << 22).unwrap();
        w.finalize().unwrap();
        assert_eq!(decode_wav(&path).unwrap().samples, vec![0.5]);
    }

    #[test]
    fn empty_and_missing_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        write_i16(&path, 8000, 1, &[]);
        assert!(matches!(decode_wav(&path), Err(Error::EmptyAudio(_))));
        assert!(decode_wav(dir.path().join("nope.wav")).is_err());

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"definitely not a riff header").unwrap();
        assert!(decode_wav(&junk).is_err());
    }

    #[test]
    fn decimate_rate_and_length() {
        let sig = PcmSignal::new(vec![0.1; 44100], 44100).unwrap();
        let out = decimate(&sig, 5).unwrap();
        assert_eq!(out.sample_rate, 8820);
        assert_eq!(out.len(), 8820);
        // unit DC gain away from the edges
        assert!((out.samples[4000] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn decimate_identity_and_zero_factor() {
        let sig = PcmSignal::new(vec![0.3, -0.2, 0.9], 44100).unwrap();
        assert_eq!(decimate(&sig, 1).unwrap(), sig);
        assert!(decimate(&sig, 0).is_err());
        let empty = PcmSignal::new(vec![], 44100).unwrap();
        assert!(decimate(&empty, 5).is_err());
    }

    #[test]
    fn decimate_suppresses_aliasing() {
        // 6 kHz sits above the new 4.41 kHz Nyquist and would fold to 2.82 kHz.
        let rate = 44100.0;
        let tone = |f: f64| {
            let s = (0..44100).map(|i| (2.0 * PI * f * i as f64 / rate).sin()).collect();
            PcmSignal::new(s, 44100).unwrap()
        };
        let rms = |s: &PcmSignal| {
            let inner = &s.samples[200..s.len() - 200];
            (inner.iter().map(|v| v * v).sum::<f64>() / inner.len() as f64).sqrt()
        };
        let passed = decimate(&tone(1000.0), 5).unwrap();
        let stopped = decimate(&tone(6000.0), 5).unwrap();
        assert!((rms(&passed) - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.01);
        assert!(rms(&stopped) < 0.01);
    }

    #[test]
    fn fir_is_symmetric_with_unit_gain() {
        let h = lowpass_fir(FIR_TAPS, 0.09);
        assert_eq!(h.len(), 127);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..h.len() {
            assert!((h[i] - h[h.len() - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn segment_counts() {
        let mk = |n: usize| PcmSignal::new(vec![0.0; n], WORKING_RATE).unwrap();
        assert_eq!(segment_clips(&mk(26460), "p", None).unwrap().len(), 3);
        assert_eq!(segment_clips(&mk(26461), "p", None).unwrap().len(), 3);
        assert!(segment_clips(&mk(0), "p", None).unwrap().is_empty());
        let wrong = PcmSignal::new(vec![0.0; 44100], 44100).unwrap();
        assert!(segment_clips(&wrong, "p", None).is_err());
    }

    #[test]
    fn clips_reproduce_signal_prefix() {
        let samples: Vec<f64> = (0..20000).map(|i| (i as f64 * 0.37).sin()).collect();
        let sig = PcmSignal::new(samples.clone(), WORKING_RATE).unwrap();
        let clips = segment_clips(&sig, "p", None).unwrap();
        let joined: Vec<f64> = clips.iter().flat_map(|c| c.samples.clone()).collect();
        assert_eq!(joined, samples[..2 * CLIP_LEN]);
        assert!(clips.iter().all(|c| c.label == ClipLabel::Unlabeled));
    }

    #[test]
    fn overlap_labeling() {
        let w = |a: f64, b: f64, label| LabelWindow {
            start_s: a,
            end_s: b,
            label,
        };
        let windows = vec![w(0.5, 1.2, ClipLabel::Cough), w(2.0, 3.0, ClipLabel::NonCough)];
        assert_eq!(label_for_span(&windows, 0.0, 1.0), ClipLabel::Cough);
        assert_eq!(label_for_span(&windows, 1.0, 2.0), ClipLabel::Unlabeled);
        assert_eq!(label_for_span(&windows, 2.0, 3.0), ClipLabel::NonCough);
        assert_eq!(label_for_span(&windows, 0.6, 1.6), ClipLabel::Cough);
        assert_eq!(label_for_span(&windows, 0.71, 1.71), ClipLabel::Unlabeled);
    }

    #[test]
    fn nan_samples_rejected() {
        assert!(PcmSignal::new(vec![f64::NAN], 100).is_err());
        assert!(PcmSignal::new(vec![0.0], 0).is_err());
    }
}
