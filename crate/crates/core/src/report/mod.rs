//! Pipeline orchestration, configuration, boxplot reporting and the
//! synthetic cohort generator.

pub mod boxplot;
pub mod config;
pub mod pipeline;
pub mod synth;

pub use boxplot::{box_stats, emit_boxplot_data, render_svg, write_report, BoxStats, BoxplotCell, BoxplotData};
pub use config::{load_config, save_config, PipelineConfig, DEFAULT_TH_LIST};
pub use pipeline::{
    explain_patient, labeled_spectrograms, predict_store, run_pipeline, stage_compare, stage_explain, stage_features, stage_report, stage_train,
    train_on_patients, write_predictions_csv, ClipPrediction, FoldSummary, PatientExplanation, RunSummary, WorkLayout,
    FEATURES_FILE, FOLDS_FILE, SUMMARY_FILE,
};
pub use synth::{generate_synthetic_cohort, SynthConfig};
