//! Operator entry point: synthetic scene generation, training, inference,
//! evaluation, bandwidth grid search and PLY export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pointseg::cloud::{
    crop_subareas, load_cloud, save_cloud, save_predictions, CloudFormat, LabeledPointCloud,
    PredictionFormat,
};
use pointseg::config::{PipelineSettings, RunConfig};
use pointseg::crf::{CrfParams, FilterBackend};
use pointseg::metrics::{scores, ConfusionMatrix};
use pointseg::synth;
use pointseg::train::{
    self, evaluate_clouds, grid_search_theta_alpha, predict_cloud, stage1, stage2, write_curves,
    PipelineOpts,
};

#[derive(Parser)]
#[command(name = "pointseg", version, about = "3D point cloud semantic segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Lattice,
    Bruteforce,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic room scenes as xyzrgbl files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for room_NNN.xyzrgbl files.
        #[arg(long)]
        out: PathBuf,
        /// Base seed; room i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train stage 1 (and stage 2 when enabled in the config).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory of training clouds (*.xyzrgbl or *.xyzl).
        #[arg(long)]
        data: PathBuf,
        /// Optional directory of validation clouds.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory for checkpoints and curves.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label a cloud with a trained checkpoint.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input cloud file.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the prediction file.
        #[arg(long)]
        out: PathBuf,
        /// CRF refinement on or off.
        #[arg(long, value_enum, default_value = "on")]
        crf: Toggle,
        /// Mean-field iterations at inference.
        #[arg(long, default_value_t = train::DEFAULT_TEST_ITERATIONS)]
        crf_iters: usize,
        /// Filtering backend.
        #[arg(long, value_enum)]
        backend: Option<Backend>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Predicted cloud file (labels = predictions).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth cloud file, same points in the same order.
        #[arg(long)]
        gt: PathBuf,
        /// Optional directory for the CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the bilateral position bandwidth on a validation set.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of validation clouds.
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<Backend>,
    },
    /// Export a cloud (with its own or predicted labels) as binary PLY.
    ExportPly {
        /// Input cloud file.
        #[arg(long)]
        input: PathBuf,
        /// Optional prediction file supplying the labels.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Output PLY path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn settings(path: &Path) -> Result<PipelineSettings> {
    let cfg = RunConfig::load(path)?;
    Ok(PipelineSettings::from_config(&cfg)?)
}

fn detect_format(path: &Path) -> Result<CloudFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyzrgbl") => Ok(CloudFormat::XyzRgbL),
        Some("xyzl") => Ok(CloudFormat::XyzLabel),
        other => bail!(
            "cannot infer cloud format of {} (extension {:?}; use .xyzrgbl or .xyzl)",
            path.display(),
            other
        ),
    }
}

fn load_cloud_dir(dir: &Path) -> Result<Vec<LabeledPointCloud>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("xyzrgbl") | Some("xyzl")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .xyzrgbl/.xyzl files in {}", dir.display());
    }
    files
        .iter()
        .map(|p| Ok(load_cloud(p, detect_format(p)?)?))
        .collect()
}

fn pipeline_opts(s: &PipelineSettings, backend: Option<Backend>) -> PipelineOpts {
    let lattice = match backend {
        Some(Backend::Lattice) => true,
        Some(Backend::Bruteforce) => false,
        None => s.lattice_backend,
    };
    PipelineOpts {
        voxel_size: s.voxel_size,
        dims_cap: s.dims_cap,
        crop_size_xy: s.crop_size_xy,
        keep_full_z: s.keep_full_z,
        backend: if lattice {
            FilterBackend::Permutohedral
        } else {
            FilterBackend::BruteForce
        },
    }
}

/// Aligns label counts: clouds loaded from files infer `max label + 1`,
/// which may undershoot the configured label set.
fn with_label_count(mut clouds: Vec<LabeledPointCloud>, label_count: usize) -> Result<Vec<LabeledPointCloud>> {
    for cloud in &mut clouds {
        if cloud.label_count > label_count {
            bail!(
                "cloud carries label >= configured label count {label_count}"
            );
        }
        cloud.label_count = label_count;
    }
    Ok(clouds)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out, seed } => {
            let s = settings(&config)?;
            std::fs::create_dir_all(&out)?;
            let base_seed = seed.unwrap_or(0);
            for i in 0..s.synth_count {
                let mut spec = s.synth.clone();
                spec.seed = base_seed + i as u64;
                let cloud = synth::generate(&spec)?;
                let path = out.join(format!("room_{i:03}.xyzrgbl"));
                save_cloud(&cloud, &path, CloudFormat::XyzRgbL)?;
                println!("{}: {} points", path.display(), cloud.len());
            }
            Ok(())
        }
        Command::Train {
            config,
            data,
            val,
            out,
            seed,
        } => {
            let s = settings(&config)?;
            let mut train_cfg = s.train.clone();
            if let Some(seed) = seed {
                train_cfg.seed = seed;
            }
            std::fs::create_dir_all(&out)?;
            let clouds = with_label_count(load_cloud_dir(&data)?, s.label_count)?;
            let val_clouds = val
                .map(|dir| Ok::<_, anyhow::Error>(with_label_count(load_cloud_dir(&dir)?, s.label_count)?))
                .transpose()?;
            let pipe = pipeline_opts(&s, None);

            // Training crops with the configured overlap.
            let mut crops = Vec::new();
            for cloud in &clouds {
                for crop in
                    crop_subareas(cloud, s.crop_size_xy, s.crop_overlap_train, s.keep_full_z)?
                {
                    crops.push(crop.cloud);
                }
            }
            println!("training on {} crops from {} clouds", crops.len(), clouds.len());

            let mut network = pointseg::fcnn::Network::build(s.fcnn.clone(), train_cfg.seed)?;
            let mut curves = stage1(
                &mut network,
                &crops,
                val_clouds.as_deref(),
                &train_cfg,
                &s.augment,
                &pipe,
            )?;
            train::save_system(&out.join("stage1.ckpt"), &network, None)?;
            println!("stage 1 done: {} epochs", train_cfg.stage1_epochs);

            if train_cfg.stage2 {
                let mut crf = s.crf.clone();
                let stage2_curve = stage2(
                    &mut network,
                    &mut crf,
                    &crops,
                    val_clouds.as_deref(),
                    &train_cfg,
                    &s.augment,
                    &pipe,
                )?;
                curves.extend(stage2_curve.into_iter().map(|mut row| {
                    row.epoch += train_cfg.stage1_epochs;
                    row
                }));
                train::save_system(&out.join("stage2.ckpt"), &network, Some(&crf))?;
                println!("stage 2 done: {} epochs", train_cfg.stage2_epochs);
            }
            write_curves(&out.join("curves.csv"), &curves)?;
            Ok(())
        }
        Command::Infer {
            config,
            checkpoint,
            input,
            out,
            crf,
            crf_iters,
            backend,
        } => {
            let s = settings(&config)?;
            let pipe = pipeline_opts(&s, backend);
            let (network, saved_crf) = train::load_system(&checkpoint, s.fcnn.clone())?;
            let cloud = with_label_count(
                vec![load_cloud(&input, detect_format(&input)?)?],
                s.label_count,
            )?
            .pop()
            .expect("one cloud");
            let crf_params: Option<CrfParams> = match crf {
                Toggle::Off => None,
                Toggle::On => Some(saved_crf.unwrap_or_else(|| s.crf.clone())),
            };
            let labels = predict_cloud(
                &network,
                crf_params.as_ref().map(|p| (p, crf_iters)),
                &cloud,
                &pipe,
            )?;
            std::fs::create_dir_all(&out)?;
            let stem = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("cloud");
            let ext = if cloud.has_color() { "xyzrgbl" } else { "xyzl" };
            let path = out.join(format!("{stem}_pred.{ext}"));
            save_predictions(&cloud, &labels, &path, PredictionFormat::Ascii)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Eval {
            config,
            pred,
            gt,
            out,
        } => {
            let s = settings(&config)?;
            let pred_cloud = load_cloud(&pred, detect_format(&pred)?)?;
            let gt_cloud = load_cloud(&gt, detect_format(&gt)?)?;
            if pred_cloud.len() != gt_cloud.len() {
                bail!(
                    "prediction has {} points, ground truth {}",
                    pred_cloud.len(),
                    gt_cloud.len()
                );
            }
            let mut cm = ConfusionMatrix::new(s.label_count);
            let pred_labels: Vec<usize> = pred_cloud
                .labels()
                .into_iter()
                .map(|l| l.ok_or_else(|| anyhow::anyhow!("prediction file has unlabeled points")))
                .collect::<Result<_>>()?;
            cm.accumulate(&gt_cloud.labels(), &pred_labels)?;
            let report = scores(&cm)?;
            let class_names: Vec<String> = if s.label_count == synth::LABEL_COUNT {
                synth::CLASS_NAMES.iter().map(|s| s.to_string()).collect()
            } else {
                (0..s.label_count).map(|i| format!("class{i}")).collect()
            };
            print!("{}", report.to_table(&class_names));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.csv"), report.to_csv(&class_names))?;
            }
            Ok(())
        }
        Command::Gridsearch {
            config,
            checkpoint,
            val,
            backend,
        } => {
            let s = settings(&config)?;
            let pipe = pipeline_opts(&s, backend);
            let (network, saved_crf) = train::load_system(&checkpoint, s.fcnn.clone())?;
            let base = saved_crf.unwrap_or_else(|| s.crf.clone());
            let val_clouds = with_label_count(load_cloud_dir(&val)?, s.label_count)?;
            let best = grid_search_theta_alpha(
                &network,
                &base,
                &s.gridsearch_candidates,
                &val_clouds,
                &pipe,
            )?;
            let mut tuned = base.clone();
            tuned.theta_alpha = best;
            let report =
                evaluate_clouds(&network, Some((&tuned, train::DEFAULT_TEST_ITERATIONS)), &val_clouds, &pipe)?;
            println!("best theta_alpha = {best} (validation mIOU {:.4})", report.scores.mean_iou);
            Ok(())
        }
        Command::ExportPly { input, pred, out } => {
            let cloud = load_cloud(&input, detect_format(&input)?)?;
            let labels: Vec<usize> = match pred {
                Some(p) => {
                    let pred_cloud = load_cloud(&p, detect_format(&p)?)?;
                    if pred_cloud.len() != cloud.len() {
                        bail!("prediction and input point counts differ");
                    }
                    pred_cloud
                        .labels()
                        .into_iter()
                        .map(|l| l.ok_or_else(|| anyhow::anyhow!("unlabeled prediction point")))
                        .collect::<Result<_>>()?
                }
                None => cloud
                    .labels()
                    .into_iter()
                    .map(|l| l.unwrap_or(0))
                    .collect(),
            };
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            save_predictions(&cloud, &labels, &out, PredictionFormat::PlyBinary)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}
