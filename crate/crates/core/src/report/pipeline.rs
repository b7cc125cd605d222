//! End-to-end orchestration. Every stage reads its inputs from and writes
//! its outputs to the work directory, so a full `run` and a sequence of
//! single-stage invocations produce the same files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::boxplot::{emit_boxplot_data, write_report, BoxplotData};
use super::config::PipelineConfig;
use crate::audio_ingest::{ingest_manifest, load_manifest, read_clip_store, ClipLabel, DatasetManifest, StudyGroup};
use crate::cnn::{
    load_model, make_manifest_folds, mix_seed, save_model, train, CnnModel, EpochStats, FoldPlan, TrainConfig,
    TrainedModel,
};
use crate::error::{Error, Result};
use crate::occlusion::{
    average_maps, occlusion_map, percentile_threshold, save_mean_map, save_weighted, select_confident_at,
    weighted_spectrogram, Classifier, MaskConfig,
};
use crate::spectral_features::{feature_vector, read_features_csv, write_features_csv, Band, FeatureRow};
use crate::spectrogram::{build_spectrogram_store, Spectrogram, SpectrogramStore};
use crate::stats::{compare_groups, read_comparisons_csv, write_results, GroupComparisonResult, COMPARISONS_FILE};

pub const SUMMARY_FILE: &str = "summary.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const FOLDS_FILE: &str = "folds.json";

/// Directory layout under the work directory.
#[derive(Debug, Clone)]
pub struct WorkLayout {
    pub root: PathBuf,
}

impl WorkLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn clips(&self) -> PathBuf {
        self.root.join("clips")
    }

    pub fn spectrograms(&self) -> PathBuf {
        self.root.join("spectrograms")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn fold_model(&self, fold: usize) -> PathBuf {
        self.models().join(format!("fold{fold}.bin"))
    }

    pub fn explain(&self) -> PathBuf {
        self.root.join("explain")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join(FEATURES_FILE)
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join(SUMMARY_FILE)
    }
}

fn stage<T>(name: &'static str, artifact: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        artifact: artifact.to_path_buf(),
        source: Box::new(e),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Labeled (cough / non-cough) spectrograms of the given patients.
pub fn labeled_spectrograms(store: &SpectrogramStore, patients: &[String]) -> Result<(Vec<Spectrogram>, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut labels = Vec::new();
    for rec in &store.records {
        let label = match rec.label {
            ClipLabel::Cough => 1,
            ClipLabel::NonCough => 0,
            ClipLabel::Unlabeled => continue,
        };
        if patients.contains(&rec.patient_id) {
            specs.push(store.load(rec)?);
            labels.push(label);
        }
    }
    Ok((specs, labels))
}

/// Trains a detector on the labeled clips of `patients`.
pub fn train_on_patients(store: &SpectrogramStore, patients: &[String], cfg: &TrainConfig) -> Result<TrainedModel> {
    let (specs, labels) = labeled_spectrograms(store, patients)?;
    log::info!("training on {} clips from {} patients", specs.len(), patients.len());
    train(&specs, &labels, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub index: usize,
    pub test_patients: Vec<String>,
    pub train_clips: usize,
    pub final_epoch: Option<EpochStats>,
}

/// Trains one model per fold and writes `fold<i>.bin`, the loss traces and
/// the fold plan.
pub fn stage_train(
    store: &SpectrogramStore,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    seed: u64,
    models_dir: &Path,
) -> Result<(FoldPlan, Vec<FoldSummary>)> {
    fs::create_dir_all(models_dir).map_err(|e| Error::io(models_dir, e))?;
    let plan = make_manifest_folds(manifest, cfg.folds, seed)?;
    write_json(&models_dir.join(FOLDS_FILE), &plan)?;
    let mut summaries = Vec::new();
    for fold in &plan.folds {
        let fold_cfg = TrainConfig {
            seed: mix_seed(&[seed, fold.index as u64]),
            ..cfg.clone()
        };
        let trained = train_on_patients(store, &fold.train_patients, &fold_cfg)?;
        save_model(&trained.model, &models_dir.join(format!("fold{}.bin", fold.index)))?;
        write_json(&models_dir.join(format!("fold{}_trace.json", fold.index)), &trained.trace)?;
        let (specs, _) = labeled_spectrograms(store, &fold.train_patients)?;
        summaries.push(FoldSummary {
            index: fold.index,
            test_patients: fold.test_patients.clone(),
            train_clips: specs.len(),
            final_epoch: trained.trace.last().cloned(),
        });
    }
    Ok((plan, summaries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientExplanation {
    pub patient_id: String,
    pub cough_clips: usize,
    pub confident_clips: usize,
    /// `(Th, alpha)` for every threshold; empty when nothing was confident.
    pub thresholds: Vec<(f64, f64)>,
}

/// Occlusion maps of a patient's confident coughs, their mean, and one
/// weighted spectrogram per threshold, written into `out_dir`.
pub fn explain_patient<C: Classifier + ?Sized>(
    model: &C,
    store: &SpectrogramStore,
    patient_id: &str,
    cutoff: f64,
    mask: &MaskConfig,
    ths: &[f64],
    out_dir: &Path,
) -> Result<PatientExplanation> {
    let specs: Vec<Spectrogram> = store
        .for_patient(patient_id)
        .filter(|r| r.label == ClipLabel::Cough)
        .map(|r| store.load(r))
        .collect::<Result<_>>()?;
    let keep = select_confident_at(model, &specs, cutoff)?;
    let mut out = PatientExplanation {
        patient_id: patient_id.to_string(),
        cough_clips: specs.len(),
        confident_clips: keep.len(),
        thresholds: Vec::new(),
    };
    if keep.is_empty() {
        log::warn!("patient {patient_id}: no confident coughs, no weighted spectrogram");
        return Ok(out);
    }
    let confident: Vec<Spectrogram> = keep.iter().map(|&i| specs[i].clone()).collect();
    let maps = confident
        .iter()
        .map(|s| occlusion_map(model, s, mask))
        .collect::<Result<Vec<_>>>()?;
    let mean = average_maps(patient_id, &maps)?;
    save_mean_map(out_dir, &mean, mask)?;
    for &th in ths {
        let alpha = percentile_threshold(&mean, th)?;
        let ws = weighted_spectrogram(&confident, &mean, th, alpha)?;
        save_weighted(out_dir, &ws, mean.count, mask)?;
        out.thresholds.push((th, alpha));
    }
    Ok(out)
}

/// Explains every patient with the model of the fold that held it out, or
/// with `pretrained` for everyone.
pub fn stage_explain(
    store: &SpectrogramStore,
    manifest: &DatasetManifest,
    layout: &WorkLayout,
    cfg: &PipelineConfig,
) -> Result<Vec<PatientExplanation>> {
    let out_dir = layout.explain();
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    }
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let pretrained = cfg.pretrained_model.as_deref().map(load_model).transpose()?;
    let plan: Option<FoldPlan> = match pretrained {
        Some(_) => None,
        None => Some(read_json(&layout.models().join(FOLDS_FILE))?),
    };
    let mut fold_models: Vec<Option<CnnModel>> = Vec::new();
    let mut out = Vec::new();
    for patient in manifest.patients() {
        let model = match (&pretrained, &plan) {
            (Some(m), _) => m,
            (None, Some(plan)) => {
                let fold = plan
                    .fold_for_test_patient(patient)
                    .ok_or_else(|| Error::invalid(format!("patient {patient} is in no test fold")))?;
                if fold_models.len() <= fold.index {
                    fold_models.resize(fold.index + 1, None);
                }
                if fold_models[fold.index].is_none() {
                    fold_models[fold.index] = Some(load_model(&layout.fold_model(fold.index))?);
                }
                fold_models[fold.index].as_ref().expect("just loaded")
            }
            (None, None) => unreachable!("plan is read when no model is given"),
        };
        out.push(explain_patient(
            model,
            store,
            patient,
            cfg.confidence_cutoff,
            &cfg.mask,
            &cfg.th_list,
            &out_dir,
        )?);
    }
    Ok(out)
}

/// Feature table of every weighted spectrogram in `weighted_dir`.
pub fn stage_features(weighted_dir: &Path, out_csv: &Path) -> Result<Vec<FeatureRow>> {
    let weighted = crate::occlusion::load_weighted_dir(weighted_dir)?;
    let rows: Vec<FeatureRow> = weighted.iter().flat_map(feature_vector).collect();
    write_features_csv(out_csv, &rows)?;
    Ok(rows)
}

pub fn stage_compare(
    features_csv: &Path,
    manifest: &DatasetManifest,
    groups: &[StudyGroup],
    ths: &[f64],
    out_dir: &Path,
) -> Result<Vec<GroupComparisonResult>> {
    let rows = read_features_csv(features_csv)?;
    let results = compare_groups(&rows, manifest, groups, &Band::ALL, ths)?;
    write_results(out_dir, &results)?;
    Ok(results)
}

pub fn stage_report(
    results_dir: &Path,
    features_csv: &Path,
    manifest: &DatasetManifest,
    out_dir: &Path,
    all: bool,
    svg: bool,
) -> Result<BoxplotData> {
    let results = read_comparisons_csv(&results_dir.join(COMPARISONS_FILE))?;
    let rows = read_features_csv(features_csv)?;
    let data = emit_boxplot_data(&results, &rows, manifest, all);
    write_report(out_dir, &data, svg)?;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub id: String,
    pub patient_id: String,
    pub label: ClipLabel,
    pub p_cough: f64,
}

/// Eval-mode cough probability of every clip in the store.
pub fn predict_store(model: &CnnModel, store: &SpectrogramStore) -> Result<Vec<ClipPrediction>> {
    let specs = store.load_all()?;
    let probs = model.predict_batch(&specs)?;
    Ok(store
        .records
        .iter()
        .zip(probs)
        .map(|(rec, (_, cough))| ClipPrediction {
            id: rec.id.clone(),
            patient_id: rec.patient_id.clone(),
            label: rec.label,
            p_cough: cough,
        })
        .collect())
}

pub fn write_predictions_csv(path: &Path, predictions: &[ClipPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for p in predictions {
        w.serialize(p).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificantCell {
    pub study_group: StudyGroup,
    pub band: Band,
    pub feature: String,
    #[serde(rename = "Th")]
    pub th: f64,
    pub p_value: f64,
    pub direction: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Thresholds as configured, in percent.
    pub th_grid: Vec<f64>,
    /// The same thresholds as fractions.
    pub th_fractions: Vec<f64>,
    pub confidence_cutoff: f64,
    pub mask_cfg: MaskConfig,
    pub pretrained_model: Option<PathBuf>,
    pub patients: usize,
    pub clips: usize,
    pub folds: Vec<FoldSummary>,
    pub explanations: Vec<PatientExplanation>,
    pub comparisons: usize,
    pub significant: Vec<SignificantCell>,
}

/// Runs every stage and writes `summary.json` into the work directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let manifest = stage("manifest", &cfg.manifest, load_manifest(&cfg.manifest))?;
    if cfg.pretrained_model.is_none() && manifest.patients().len() < cfg.train.folds {
        return Err(Error::Stage {
            stage: "manifest",
            artifact: cfg.manifest.clone(),
            source: Box::new(Error::invalid(format!(
                "{} patients cannot fill {} folds",
                manifest.patients().len(),
                cfg.train.folds
            ))),
        });
    }
    let layout = WorkLayout::new(&cfg.work_dir);
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;

    let clips_dir = layout.clips();
    let clips = stage("ingest", &clips_dir, ingest_manifest(&manifest, &clips_dir, cfg.decimation))?;
    log::info!("ingested {} clips", clips.records.len());

    let spec_dir = layout.spectrograms();
    let store = stage(
        "spectrogram",
        &spec_dir,
        read_clip_store(&clips_dir).and_then(|c| build_spectrogram_store(&c, &spec_dir)),
    )?;

    let folds = match &cfg.pretrained_model {
        Some(_) => Vec::new(),
        None => {
            let models = layout.models();
            stage("train", &models, stage_train(&store, &manifest, &cfg.train, cfg.seed, &models))?.1
        }
    };

    let explanations = stage("explain", &layout.explain(), stage_explain(&store, &manifest, &layout, cfg))?;
    stage("features", &layout.features(), stage_features(&layout.explain(), &layout.features()))?;
    let results = stage(
        "compare",
        &layout.results(),
        stage_compare(&layout.features(), &manifest, &cfg.study_groups, &cfg.th_list, &layout.results()),
    )?;
    stage(
        "report",
        &layout.report(),
        stage_report(
            &layout.results(),
            &layout.features(),
            &manifest,
            &layout.report(),
            cfg.boxplots_all,
            cfg.svg,
        ),
    )?;

    let summary = RunSummary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        th_grid: cfg.th_list.clone(),
        th_fractions: cfg.th_list.iter().map(|t| t / 100.0).collect(),
        confidence_cutoff: cfg.confidence_cutoff,
        mask_cfg: cfg.mask,
        pretrained_model: cfg.pretrained_model.clone(),
        patients: manifest.patients().len(),
        clips: clips.records.len(),
        folds,
        explanations,
        comparisons: results.len(),
        significant: results
            .iter()
            .filter(|r| r.significant)
            .map(|r| SignificantCell {
                study_group: r.study_group,
                band: r.band,
                feature: r.feature.label(r.band).to_string(),
                th: r.th,
                p_value: r.p_value.unwrap_or(f64::NAN),
                direction: r.direction,
            })
            .collect(),
    };
    stage("summary", &layout.summary(), write_json(&layout.summary(), &summary))?;
    Ok(summary)
}
