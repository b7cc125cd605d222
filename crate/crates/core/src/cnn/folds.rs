//! Patient-grouped k-fold plans and stratified train/validation splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_ingest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// The fold whose test set holds `patient_id`.
    pub fn fold_for_test_patient(&self, patient_id: &str) -> Option<&Fold> {
        self.folds
            .iter()
            .find(|f| f.test_patients.iter().any(|p| p == patient_id))
    }
}

/// Shuffles patients and deals them round-robin into `k` test groups, so
/// group sizes differ by at most one. Fold `i` tests group `i` and trains
/// on everyone else.
pub fn make_folds(patients: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("at least two folds are required"));
    }
    if patients.len() < k {
        return Err(Error::invalid(format!(
            "{} patients cannot fill {k} folds",
            patients.len()
        )));
    }
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut groups = vec![Vec::new(); k];
    for (pos, &idx) in order.iter().enumerate() {
        groups[pos % k].push(idx);
    }
    let folds = groups
        .into_iter()
        .enumerate()
        .map(|(index, mut test)| {
            test.sort_unstable();
            let train = (0..patients.len()).filter(|i| !test.contains(i));
            Fold {
                index,
                train_patients: train.map(|i| patients[i].clone()).collect(),
                test_patients: test.iter().map(|&i| patients[i].clone()).collect(),
            }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

pub fn make_manifest_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    make_folds(manifest.patients(), k, seed)
}

/// Stratified split of sample indices into `(train, validation)`. Each class
/// contributes `round(val_fraction * class_size)` validation samples.
pub fn split_train_validation(labels: &[usize], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = (val_fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}
