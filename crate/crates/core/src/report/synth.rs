//! Synthetic two-cohort recordings for desk-scale end-to-end runs.
//!
//! Each patient gets one recording made of one-second segments. Cough
//! segments carry a 300 ms band-shaped noise burst under a raised-cosine
//! envelope; non-cough segments carry a harmonic tone burst of the same
//! length, envelope and timing, so the classes differ only in burst
//! content. Sub-band gains of the cough bursts depend on the patient's
//! cohort, plus a per-patient jitter.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio_ingest::{
    write_wav_i16, ClipLabel, DatasetManifest, LabelWindow, ManifestEntry, Membership, PcmSignal, StudyGroup,
};
use crate::error::{Error, Result};
use crate::spectral_features::Band;

pub const MANIFEST_FILE: &str = "manifest.json";

const BURST_S: f64 = 0.3;
/// Gain of the cough spectrum above the analysis range.
const ABOVE_BAND_DB: f64 = -30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub patients_per_cohort: usize,
    pub coughs_per_patient: usize,
    pub non_coughs_per_patient: usize,
    /// Base cough spectrum, dB per sub-band B1..B5.
    pub base_db: [f64; 5],
    /// Sub-band offsets added for C1 patients, dB.
    pub c1_offsets_db: [f64; 5],
    /// Sub-band offsets added for C2 patients, dB.
    pub c2_offsets_db: [f64; 5],
    /// Standard deviation of each patient's per-band gain, dB.
    pub patient_jitter_db: f64,
    /// Standard deviation of each burst's per-band gain, dB.
    pub burst_jitter_db: f64,
    /// RMS of the background noise between bursts; 0 gives digital silence.
    pub noise_level: f64,
    /// RMS of cough and tone bursts.
    pub burst_level: f64,
    /// Burst onset within its one-second segment, seconds, for cough and
    /// non-cough bursts alike; `None` places each burst uniformly at random.
    pub burst_onset_s: Option<f64>,
    /// Half-width of the uniform jitter around `burst_onset_s`, seconds.
    pub onset_jitter_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients_per_cohort: 6,
            coughs_per_patient: 10,
            non_coughs_per_patient: 10,
            base_db: [0.0, -2.0, -4.0, -6.0, -10.0],
            c1_offsets_db: [0.0, 0.0, 6.0, 0.0, 0.0],
            c2_offsets_db: [0.0; 5],
            patient_jitter_db: 1.0,
            burst_jitter_db: 0.5,
            noise_level: 0.0,
            burst_level: 0.1,
            burst_onset_s: Some(0.35),
            onset_jitter_s: 0.05,
            sample_rate: 44_100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The same cohorts without any between-cohort difference.
    pub fn null(mut self) -> Self {
        self.c1_offsets_db = [0.0; 5];
        self.c2_offsets_db = [0.0; 5];
        self
    }
}

fn band_gain_db(f: f64, gains: &[f64; 5]) -> f64 {
    for (i, band) in Band::SUB_BANDS.iter().enumerate() {
        let (lo, hi) = band.hz();
        if f >= lo && f < hi {
            return gains[i];
        }
    }
    ABOVE_BAND_DB
}

/// White noise shaped in the frequency domain by per-band dB gains, scaled
/// to unit RMS.
fn shaped_noise(len: usize, sample_rate: f64, gains_db: &[f64; 5], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut buf: Vec<Complex<f64>> = (0..len).map(|_| Complex::new(normal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (i, c) in buf.iter_mut().enumerate() {
        let bin = i.min(len - i);
        let f = bin as f64 * sample_rate / len as f64;
        *c *= 10f64.powf(band_gain_db(f, gains_db) / 20.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    out.into_iter().map(|v| v / rms).collect()
}

/// Raised-cosine (Hann) envelope over `len` samples.
fn envelope(len: usize) -> impl Iterator<Item = f64> {
    (0..len).map(move |i| 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / len as f64).cos())
}

fn add_burst(seg: &mut [f64], burst: &[f64], start: usize, level: f64) {
    for ((s, b), e) in seg[start..start + burst.len()].iter_mut().zip(burst).zip(envelope(burst.len())) {
        *s += level * b * e;
    }
}

fn tone(len: usize, sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = rng.random_range(120.0..320.0);
    let harmonics: Vec<(f64, f64, f64)> = (1..=6)
        .map(|h| (f0 * h as f64, 1.0 / h as f64, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let out: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sample_rate;
            harmonics.iter().map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum()
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    out.into_iter().map(|v| v / rms).collect()
}

/// Synthesized recording of one patient plus its label windows.
pub fn synth_recording(cfg: &SynthConfig, cohort_db: &[f64; 5], seed: u64) -> (PcmSignal, Vec<LabelWindow>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = cfg.sample_rate as f64;
    let seg_len = cfg.sample_rate as usize;
    let jitter = Normal::new(0.0, cfg.patient_jitter_db.max(0.0)).expect("valid jitter");
    let burst_jitter = Normal::new(0.0, cfg.burst_jitter_db.max(0.0)).expect("valid jitter");
    let noise = Normal::new(0.0, cfg.noise_level.max(0.0)).expect("valid noise level");
    let patient_db: Vec<f64> = (0..5)
        .map(|i| cfg.base_db[i] + cohort_db[i] + jitter.sample(&mut rng))
        .collect();

    let mut kinds: Vec<ClipLabel> = std::iter::repeat_n(ClipLabel::Cough, cfg.coughs_per_patient)
        .chain(std::iter::repeat_n(ClipLabel::NonCough, cfg.non_coughs_per_patient))
        .collect();
    kinds.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(kinds.len() * seg_len);
    let mut labels = Vec::with_capacity(kinds.len());
    for (s, &kind) in kinds.iter().enumerate() {
        let mut seg: Vec<f64> = (0..seg_len).map(|_| noise.sample(&mut rng)).collect();
        let len = (BURST_S * sr) as usize;
        let burst = match kind {
            ClipLabel::Cough => {
                let gains: [f64; 5] = std::array::from_fn(|i| patient_db[i] + burst_jitter.sample(&mut rng));
                shaped_noise(len, sr, &gains, &mut rng)
            }
            _ => tone(len, sr, &mut rng),
        };
        let start = match cfg.burst_onset_s {
            Some(onset) => {
                let t = onset + cfg.onset_jitter_s * rng.random_range(-1.0..=1.0);
                ((t * sr).max(0.0) as usize).min(seg_len - len)
            }
            None => rng.random_range(seg_len / 10..seg_len - len - seg_len / 10),
        };
        add_burst(&mut seg, &burst, start, cfg.burst_level);
        samples.extend(seg);
        labels.push(LabelWindow {
            start_s: s as f64,
            end_s: (s + 1) as f64,
            label: kind,
        });
    }
    for v in &mut samples {
        *v = v.clamp(-1.0, 1.0);
    }
    let signal = PcmSignal {
        samples,
        sample_rate: cfg.sample_rate,
    };
    (signal, labels)
}

/// Writes one 16-bit WAV per patient and a manifest in which G1 splits the
/// cohorts (C1 first) and every other group excludes everyone.
pub fn generate_synthetic_cohort(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    if cfg.patients_per_cohort == 0 || cfg.coughs_per_patient == 0 {
        return Err(Error::invalid("need at least one patient per cohort and one cough per patient"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for (cohort, offsets, tag) in [
        (Membership::C1, &cfg.c1_offsets_db, "A"),
        (Membership::C2, &cfg.c2_offsets_db, "B"),
    ] {
        for i in 0..cfg.patients_per_cohort {
            let patient_id = format!("{tag}{:02}", i + 1);
            let seed = crate::cnn::mix_seed(&[cfg.seed, entries.len() as u64]);
            let (signal, labels) = synth_recording(cfg, offsets, seed);
            let file = format!("{patient_id}.wav");
            write_wav_i16(out_dir.join(&file), &signal)?;
            let groups: BTreeMap<String, Membership> = StudyGroup::ALL
                .iter()
                .map(|g| (g.to_string(), if *g == StudyGroup::G1 { cohort } else { Membership::Excluded }))
                .collect();
            entries.push(ManifestEntry {
                path: file.into(),
                patient_id,
                groups,
                labels: Some(labels),
            });
        }
    }
    let manifest = DatasetManifest::from_entries(entries, out_dir)?;
    let path = out_dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_ingest::{decimate, load_manifest};
    use crate::spectrogram::raw_psd;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            patients_per_cohort: 1,
            coughs_per_patient: 2,
            non_coughs_per_patient: 1,
            seed: 9,
            ..SynthConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_cohort(&cfg, a.path()).unwrap();
        generate_synthetic_cohort(&cfg, b.path()).unwrap();
        for f in ["A01.wav", "B01.wav", MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let m = load_manifest(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.cohort(StudyGroup::G1, Membership::C1), vec!["A01"]);
        assert_eq!(m.cohort(StudyGroup::G2, Membership::C1).len(), 0);
        assert_eq!(m.entries[0].labels.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn offset_raises_band_power() {
        // interior-bin power in B3 relative to B2 over cough segments grows by about 6 dB
        let cfg = SynthConfig {
            coughs_per_patient: 8,
            non_coughs_per_patient: 0,
            patient_jitter_db: 0.0,
            ..SynthConfig::default()
        };
        let ratio = |offsets: &[f64; 5]| {
            let (sig, _) = synth_recording(&cfg, offsets, 3);
            let dec = decimate(&sig, 5).unwrap();
            let mut b2 = 0.0;
            let mut b3 = 0.0;
            for clip in dec.samples.chunks_exact(8820) {
                let psd = raw_psd(clip).unwrap();
                let interior = |b: Band| {
                    let r = b.bins();
                    (*r.start() + 1)..*r.end()
                };
                for k in interior(Band::B2) {
                    b2 += psd.row(k).sum();
                }
                for k in interior(Band::B3) {
                    b3 += psd.row(k).sum();
                }
            }
            10.0 * (b3 / b2).log10()
        };
        let diff = ratio(&[0.0, 0.0, 6.0, 0.0, 0.0]) - ratio(&[0.0; 5]);
        assert!((diff - 6.0).abs() < 1.0, "{diff}");
    }
}
