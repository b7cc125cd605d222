//! Pipeline configuration (`config.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_ingest::{StudyGroup, DEFAULT_DECIMATION};
use crate::cnn::TrainConfig;
use crate::error::{Error, Result};
use crate::occlusion::{MaskConfig, CONFIDENCE_CUTOFF};
use crate::spectrogram::{N_BINS, N_FRAMES};

pub const DEFAULT_TH_LIST: [f64; 5] = [50.0, 60.0, 70.0, 80.0, 90.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset manifest (JSON).
    pub manifest: PathBuf,
    /// Directory receiving every intermediate artifact and the report.
    pub work_dir: PathBuf,
    /// Down-sampling factor from the recording rate to 8820 Hz.
    pub decimation: usize,
    /// Minimum cough probability for a spectrogram to be explained.
    pub confidence_cutoff: f64,
    /// Occlusion-map percentile thresholds, in percent.
    pub th_list: Vec<f64>,
    pub mask: MaskConfig,
    pub train: TrainConfig,
    /// Master seed: fold assignment and per-fold training seeds derive
    /// from it (the `train.seed` field is ignored by the pipeline).
    pub seed: u64,
    pub study_groups: Vec<StudyGroup>,
    /// Use this model for every patient instead of training per fold.
    pub pretrained_model: Option<PathBuf>,
    /// Emit boxplot data for every testable cell, not only significant ones.
    pub boxplots_all: bool,
    /// Render an SVG per boxplot cell.
    pub svg: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            work_dir: PathBuf::from("work"),
            decimation: DEFAULT_DECIMATION,
            confidence_cutoff: CONFIDENCE_CUTOFF,
            th_list: DEFAULT_TH_LIST.to_vec(),
            mask: MaskConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            study_groups: StudyGroup::ALL.to_vec(),
            pretrained_model: None,
            boxplots_all: false,
            svg: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.th_list.is_empty() {
            return Err(Error::invalid("th_list is empty"));
        }
        if let Some(th) = self.th_list.iter().find(|t| !(0.0..=100.0).contains(*t)) {
            return Err(Error::invalid(format!("threshold {th} outside [0, 100]")));
        }
        if !(self.confidence_cutoff > 0.0 && self.confidence_cutoff < 1.0) {
            return Err(Error::invalid("confidence_cutoff must lie in (0, 1)"));
        }
        if self.decimation == 0 {
            return Err(Error::invalid("decimation must be at least 1"));
        }
        if self.study_groups.is_empty() {
            return Err(Error::invalid("study_groups is empty"));
        }
        self.mask.validate(N_BINS, N_FRAMES)?;
        if self.pretrained_model.is_none() {
            self.train.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rebases relative paths onto `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        rebase(&mut self.manifest);
        rebase(&mut self.work_dir);
        if let Some(p) = self.pretrained_model.as_mut() {
            rebase(p);
        }
    }
}

/// Reads a config file; relative paths resolve against its directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &PipelineConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.th_list, vec![50.0, 60.0, 70.0, 80.0, 90.0]);
        assert_eq!(c.confidence_cutoff, 0.90);
        assert_eq!((c.mask.patch_height, c.mask.patch_width), (5, 10));
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"seed": 4, "th_list": [70]}"#).unwrap();
        assert_eq!((c.seed, c.th_list.clone()), (4, vec![70.0]));
        assert_eq!(c.train.batch_size, 128);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = [
            PipelineConfig { th_list: vec![101.0], ..Default::default() },
            PipelineConfig { confidence_cutoff: 1.0, ..Default::default() },
            PipelineConfig { th_list: vec![], ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, r#"{"manifest": "data/m.json", "work_dir": "/abs/work"}"#).unwrap();
        let c = load_config(&path).unwrap();
        assert_eq!(c.manifest, dir.path().join("data/m.json"));
        assert_eq!(c.work_dir, PathBuf::from("/abs/work"));
    }
}
