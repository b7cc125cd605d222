//! Dataset manifest: recordings, their patients, and each patient's cohort in
//! the six study groups.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ClipLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StudyGroup {
    G1,
    G2,
    G3,
    G4,
    G5,
    G6,
}

impl StudyGroup {
    pub const ALL: [StudyGroup; 6] = [
        StudyGroup::G1,
        StudyGroup::G2,
        StudyGroup::G3,
        StudyGroup::G4,
        StudyGroup::G5,
        StudyGroup::G6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StudyGroup::G1 => "G1",
            StudyGroup::G2 => "G2",
            StudyGroup::G3 => "G3",
            StudyGroup::G4 => "G4",
            StudyGroup::G5 => "G5",
            StudyGroup::G6 => "G6",
        }
    }

    /// The comparison each group makes in the clinical cohort.
    pub fn description(self) -> &'static str {
        match self {
            StudyGroup::G1 => "Chronic (C1) vs. Non-Chronic (C2)",
            StudyGroup::G2 => "COPD (C1) vs. Other diseases (C2)",
            StudyGroup::G3 => "COPD (C1) vs. Other diseases excluding cancer (C2)",
            StudyGroup::G4 => "COPD (C1) vs. ARD and pneumonia (C2)",
            StudyGroup::G5 => "COPD (C1) vs. Other chronic diseases (C2)",
            StudyGroup::G6 => "COPD (C1) vs. Lung cancer (C2)",
        }
    }
}

impl fmt::Display for StudyGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StudyGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StudyGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown study group `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Membership {
    C1,
    C2,
    #[serde(rename = "excluded")]
    Excluded,
}

impl Membership {
    pub fn as_str(self) -> &'static str {
        match self {
            Membership::C1 => "C1",
            Membership::C2 => "C2",
            Membership::Excluded => "excluded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub label: ClipLabel,
}

/// One recording. A patient may own several recordings; their group
/// memberships must agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub patient_id: String,
    pub groups: BTreeMap<String, Membership>,
    /// `None` leaves every clip unlabeled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<LabelWindow>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths resolve against.
    pub base_dir: PathBuf,
    memberships: BTreeMap<String, [Membership; 6]>,
    patient_order: Vec<String>,
}

impl DatasetManifest {
    /// Validates entries; `base_dir` resolves relative audio paths.
    pub fn from_entries(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let base_dir = base_dir.into();
        let mut memberships: BTreeMap<String, [Membership; 6]> = BTreeMap::new();
        let mut patient_order = Vec::new();

        for entry in &entries {
            if entry.patient_id.is_empty() {
                return Err(Error::Manifest(format!("entry {} has an empty patient_id", entry.path.display())));
            }
            if entry.groups.is_empty() {
                return Err(Error::Manifest(format!("entry {} lists no study groups", entry.path.display())));
            }
            let mut row = [Membership::Excluded; 6];
            for (key, &m) in &entry.groups {
                let g: StudyGroup = key.parse()?;
                row[g as usize] = m;
            }
            if let Some(windows) = &entry.labels {
                for w in windows {
                    if !(w.start_s.is_finite() && w.end_s.is_finite() && w.start_s <= w.end_s) {
                        return Err(Error::Manifest(format!(
                            "bad label window [{}, {}) in {}",
                            w.start_s,
                            w.end_s,
                            entry.path.display()
                        )));
                    }
                }
            }
            match memberships.get(&entry.patient_id) {
                Some(existing) if *existing != row => {
                    return Err(Error::Manifest(format!(
                        "patient `{}` appears with conflicting group memberships",
                        entry.patient_id
                    )))
                }
                Some(_) => {}
                None => {
                    memberships.insert(entry.patient_id.clone(), row);
                    patient_order.push(entry.patient_id.clone());
                }
            }
            let resolved = base_dir.join(&entry.path);
            if !resolved.is_file() {
                return Err(Error::Manifest(format!("audio file {} does not exist", resolved.display())));
            }
        }

        Ok(Self {
            entries,
            base_dir,
            memberships,
            patient_order,
        })
    }

    /// Patients in order of first appearance.
    pub fn patients(&self) -> &[String] {
        &self.patient_order
    }

    pub fn membership(&self, patient_id: &str, group: StudyGroup) -> Option<Membership> {
        self.memberships.get(patient_id).map(|row| row[group as usize])
    }

    /// Patients in `cohort` of `group`, in manifest order.
    pub fn cohort(&self, group: StudyGroup, cohort: Membership) -> Vec<&str> {
        self.patient_order
            .iter()
            .filter(|p| self.membership(p, group) == Some(cohort))
            .map(String::as_str)
            .collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a JSON manifest. Relative audio paths resolve against
/// the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_entries(entries, base)
}

/// Membership counts per group, `(C1, C2)`.
pub fn cohort_sizes(manifest: &DatasetManifest) -> HashMap<StudyGroup, (usize, usize)> {
    StudyGroup::ALL
        .into_iter()
        .map(|g| {
            (
                g,
                (
                    manifest.cohort(g, Membership::C1).len(),
                    manifest.cohort(g, Membership::C2).len(),
                ),
            )
        })
        .collect()
}
