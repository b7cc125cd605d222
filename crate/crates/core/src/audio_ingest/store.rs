//! On-disk clip store: one 32-bit float WAV per clip plus `index.json`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decimate, decode_wav, segment_clips, write_wav_f32, Clip, ClipLabel, DatasetManifest, PcmSignal, WORKING_RATE};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub patient_id: String,
    pub label: ClipLabel,
    pub file: String,
    pub source: PathBuf,
    pub start_s: f64,
}

#[derive(Debug, Clone)]
pub struct ClipStore {
    pub dir: PathBuf,
    pub records: Vec<ClipRecord>,
}

impl ClipStore {
    pub fn load_clip(&self, record: &ClipRecord) -> Result<Clip> {
        let signal = decode_wav(self.dir.join(&record.file))?;
        if signal.sample_rate != WORKING_RATE {
            return Err(Error::invalid(format!("clip {} is not at {WORKING_RATE} Hz", record.id)));
        }
        let mut clip = Clip::new(signal.samples, record.patient_id.clone(), record.label)?;
        clip.start_s = record.start_s;
        Ok(clip)
    }
}

/// Writes clips into `dir` and returns the index written alongside them.
pub fn write_clip_store(dir: impl AsRef<Path>, clips: &[(String, PathBuf, Clip)]) -> Result<ClipStore> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = clips
        .par_iter()
        .map(|(id, source, clip)| {
            let file = format!("{id}.wav");
            let signal = PcmSignal {
                samples: clip.samples.clone(),
                sample_rate: WORKING_RATE,
            };
            write_wav_f32(dir.join(&file), &signal)?;
            Ok(ClipRecord {
                id: id.clone(),
                patient_id: clip.patient_id.clone(),
                label: clip.label,
                file,
                source: source.clone(),
                start_s: clip.start_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::json(&index, e))?;
    std::fs::write(&index, text).map_err(|e| Error::io(&index, e))?;
    Ok(ClipStore {
        dir: dir.to_path_buf(),
        records,
    })
}

pub fn read_clip_store(dir: impl AsRef<Path>) -> Result<ClipStore> {
    let dir = dir.as_ref();
    let index = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let records = serde_json::from_str(&text).map_err(|e| Error::json(&index, e))?;
    Ok(ClipStore {
        dir: dir.to_path_buf(),
        records,
    })
}

/// Decodes, down-samples and segments every manifest recording into `out_dir`.
pub fn ingest_manifest(manifest: &DatasetManifest, out_dir: impl AsRef<Path>, factor: usize) -> Result<ClipStore> {
    let per_entry = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let path = manifest.resolve(entry);
            let signal = decode_wav(&path)?;
            let signal = decimate(&signal, factor)?;
            let clips = segment_clips(&signal, &entry.patient_id, entry.labels.as_deref())?;
            Ok(clips
                .into_iter()
                .enumerate()
                .map(|(j, clip)| (format!("{}_{i:03}_{j:04}", entry.patient_id), entry.path.clone(), clip))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let clips: Vec<_> = per_entry.into_iter().flatten().collect();
    write_clip_store(out_dir, &clips)
}
