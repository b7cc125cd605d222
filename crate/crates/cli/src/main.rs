use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coughband_core::audio_ingest::{ingest_manifest, load_manifest, read_clip_store, StudyGroup, DEFAULT_DECIMATION};
use coughband_core::cnn::{load_model, make_manifest_folds, mix_seed, save_model, TrainConfig};
use coughband_core::occlusion::{MaskConfig, CONFIDENCE_CUTOFF};
use coughband_core::report::{
    explain_patient, generate_synthetic_cohort, load_config, predict_store, run_pipeline, stage_compare,
    stage_features, stage_report, train_on_patients, write_predictions_csv, SynthConfig, DEFAULT_TH_LIST,
};
use coughband_core::spectrogram::{build_spectrogram_store, SpectrogramStore};

#[derive(Parser)]
#[command(name = "coughband", version, about = "Band-specific cough spectrogram analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage from a JSON config
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode, decimate and cut recordings into 1-second clips
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DECIMATION)]
        decimation: usize,
    },
    /// Turn a clip store into 45x100 spectrograms
    Spectrogram {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector on the training patients of one fold
    Train(TrainArgs),
    /// Write per-clip cough probabilities as CSV
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        /// Output CSV; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Occlusion maps and weighted spectrograms for one or all patients
    Explain(ExplainArgs),
    /// Band features of every weighted spectrogram in a directory
    Features {
        #[arg(long)]
        weighted: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cohort comparisons over study groups, bands, features and Th values
    Compare {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TH_LIST)]
        th: Vec<f64>,
        /// Study groups to compare; all six when omitted
        #[arg(long, value_delimiter = ',')]
        groups: Vec<StudyGroup>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Boxplot data (and optional SVG) for significant cells
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit every cell, not only significant ones
        #[arg(long)]
        all: bool,
        #[arg(long)]
        svg: bool,
    },
    /// Generate a synthetic two-cohort dataset with a manifest
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    specs: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    fold: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; defaults apply to missing fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    specs: PathBuf,
    /// Patient to explain; every patient in the store when omitted
    #[arg(long)]
    patient: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TH_LIST)]
    th: Vec<f64>,
    #[arg(long, default_value_t = CONFIDENCE_CUTOFF)]
    cutoff: f64,
    #[arg(long)]
    stride_k: Option<usize>,
    #[arg(long)]
    stride_n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    patients: usize,
    #[arg(long, default_value_t = 10)]
    coughs: usize,
    #[arg(long, default_value_t = 10)]
    non_coughs: usize,
    /// dB offsets of B1..B5 for cohort C1
    #[arg(long, value_delimiter = ',', num_args = 5, default_values_t = [0.0, 0.0, 6.0, 0.0, 0.0])]
    c1_offsets_db: Vec<f64>,
    /// No difference between cohorts
    #[arg(long)]
    null: bool,
    /// Place each burst at a uniformly random time in its segment
    #[arg(long)]
    random_onset: bool,
    #[arg(long, default_value_t = 0.0)]
    noise_level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let summary = run_pipeline(&cfg)?;
            println!(
                "{} patients, {} clips, {} comparisons, {} significant; summary in {}",
                summary.patients,
                summary.clips,
                summary.comparisons,
                summary.significant.len(),
                cfg.work_dir.join("summary.json").display()
            );
        }
        Command::Ingest {
            manifest,
            out,
            decimation,
        } => {
            let manifest = load_manifest(&manifest)?;
            let store = ingest_manifest(&manifest, &out, decimation)?;
            println!("{} clips written to {}", store.records.len(), out.display());
        }
        Command::Spectrogram { clips, out } => {
            let clips = read_clip_store(&clips)?;
            let store = build_spectrogram_store(&clips, &out)?;
            println!("{} spectrograms written to {}", store.records.len(), out.display());
        }
        Command::Train(args) => train(args)?,
        Command::Eval { model, specs, out } => {
            let model = load_model(&model)?;
            let store = SpectrogramStore::open(&specs)?;
            let predictions = predict_store(&model, &store)?;
            match out {
                Some(path) => write_predictions_csv(&path, &predictions)?,
                None => {
                    println!("id,patient_id,label,p_cough");
                    for p in &predictions {
                        println!("{},{},{},{}", p.id, p.patient_id, p.label.as_str(), p.p_cough);
                    }
                }
            }
        }
        Command::Explain(args) => explain(args)?,
        Command::Features { weighted, out } => {
            let rows = stage_features(&weighted, &out)?;
            println!("{} feature rows written to {}", rows.len(), out.display());
        }
        Command::Compare {
            features,
            manifest,
            th,
            groups,
            out,
        } => {
            let manifest = load_manifest(&manifest)?;
            let groups = if groups.is_empty() { StudyGroup::ALL.to_vec() } else { groups };
            let results = stage_compare(&features, &manifest, &groups, &th, &out)?;
            let significant = results.iter().filter(|r| r.significant).count();
            println!("{} comparisons, {} significant, written to {}", results.len(), significant, out.display());
        }
        Command::Report {
            results,
            features,
            manifest,
            out,
            all,
            svg,
        } => {
            let manifest = load_manifest(&manifest)?;
            let data = stage_report(&results, &features, &manifest, &out, all, svg)?;
            if let Some(note) = &data.note {
                println!("{note}");
            }
            println!("{} boxplot cells written to {}", data.cells.len(), out.display());
        }
        Command::Synth(args) => {
            let mut cfg = SynthConfig {
                patients_per_cohort: args.patients,
                coughs_per_patient: args.coughs,
                non_coughs_per_patient: args.non_coughs,
                noise_level: args.noise_level,
                seed: args.seed,
                ..SynthConfig::default()
            };
            cfg.c1_offsets_db.copy_from_slice(&args.c1_offsets_db);
            if args.null {
                cfg = cfg.null();
            }
            if args.random_onset {
                cfg.burst_onset_s = None;
            }
            let manifest = generate_synthetic_cohort(&cfg, &args.out)?;
            println!("manifest written to {}", manifest.display());
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    let manifest = load_manifest(&args.manifest)?;
    let plan = make_manifest_folds(&manifest, cfg.folds, args.seed)?;
    let Some(fold) = plan.folds.get(args.fold) else {
        bail!("fold {} out of range, the plan has {} folds", args.fold, plan.folds.len());
    };
    cfg.seed = mix_seed(&[args.seed, fold.index as u64]);
    let store = SpectrogramStore::open(&args.specs)?;
    let trained = train_on_patients(&store, &fold.train_patients, &cfg)?;
    save_model(&trained.model, &args.out)?;
    if let Some(last) = trained.trace.last() {
        println!(
            "fold {}: epoch {} train loss {:.4}, validation loss {:.4}; test patients {}",
            fold.index,
            last.epoch,
            last.train_loss,
            last.val_loss,
            fold.test_patients.join(",")
        );
    }
    Ok(())
}

fn explain(args: ExplainArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let store = SpectrogramStore::open(&args.specs)?;
    let mut mask = MaskConfig::default();
    if let Some(s) = args.stride_k {
        mask.stride_k = s;
    }
    if let Some(s) = args.stride_n {
        mask.stride_n = s;
    }
    let patients: Vec<String> = match args.patient {
        Some(p) => vec![p],
        None => patients_in(&store),
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for patient in &patients {
        let e = explain_patient(&model, &store, patient, args.cutoff, &mask, &args.th, &args.out)?;
        println!(
            "{}: {} of {} coughs confident, {} weighted spectrograms",
            e.patient_id,
            e.confident_clips,
            e.cough_clips,
            e.thresholds.len()
        );
    }
    Ok(())
}

fn patients_in(store: &SpectrogramStore) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in &store.records {
        if !out.contains(&r.patient_id) {
            out.push(r.patient_id.clone());
        }
    }
    out
}
