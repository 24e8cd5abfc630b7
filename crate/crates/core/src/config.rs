//! Plain-text run configuration: one `section.key = value` per line, `#`
//! comments. Typed getters validate and fall back to defaults; unknown keys
//! are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::fcnn::FcnnConfig;
use crate::synth::SynthSceneSpec;
use crate::train::TrainConfig;

/// Every key the pipeline understands.
const KNOWN_KEYS: &[&str] = &[
    "synth.count",
    "synth.room_x",
    "synth.room_y",
    "synth.room_z",
    "synth.density",
    "synth.boxes",
    "synth.pillars",
    "synth.color_noise",
    "synth.label_noise",
    "data.label_count",
    "data.keep_full_z",
    "crop.size_xy",
    "crop.overlap_train",
    "voxel.size",
    "voxel.dims_cap",
    "fcnn.in_channels",
    "fcnn.widths",
    "fcnn.residual_blocks",
    "fcnn.downsample",
    "augment.color_range",
    "augment.scale_low",
    "augment.scale_high",
    "augment.subsample",
    "augment.seed",
    "crf.theta_alpha",
    "crf.theta_beta",
    "crf.theta_gamma",
    "crf.iters_train",
    "crf.iters_test",
    "crf.backend",
    "train.stage1_epochs",
    "train.stage1_lr",
    "train.lr_decay_every",
    "train.stage2",
    "train.stage2_epochs",
    "train.stage2_lr",
    "train.kernel_lr_mult",
    "train.compat_lr_mult",
    "train.momentum",
    "train.seed",
    "train.eval_every",
    "gridsearch.theta_alpha",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    path: PathBuf,
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<RunConfig> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(path, lineno, "expected 'section.key = value'"));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::parse(path, lineno, format!("unknown key '{key}'")));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::parse(path, lineno, format!("duplicate key '{key}'")));
            }
        }
        Ok(RunConfig {
            path: path.to_path_buf(),
            map,
        })
    }

    fn bad(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("{}: {key}: {msg}", self.path.display()))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, format!("bad number '{v}'"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, format!("bad integer '{v}'"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, format!("bad integer '{v}'"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("on") | Some("true") | Some("yes") | Some("1") => Ok(true),
            Some("off") | Some("false") | Some("no") | Some("0") => Ok(false),
            Some(v) => Err(self.bad(key, format!("bad flag '{v}' (use on/off)"))),
        }
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.map.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    /// Comma-separated floats.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| self.bad(key, format!("bad number '{s}'")))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    /// Comma-separated usize list.
    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| self.bad(key, format!("bad integer '{s}'")))
                })
                .collect(),
        }
    }

    /// `threshold:factor` pairs, comma-separated.
    pub fn subsample_table(&self, key: &str) -> Result<Vec<(usize, f64)>> {
        let Some(v) = self.map.get(key) else {
            return Ok(Vec::new());
        };
        v.split(',')
            .map(|pair| {
                let (t, f) = pair
                    .split_once(':')
                    .ok_or_else(|| self.bad(key, format!("expected threshold:factor, got '{pair}'")))?;
                let threshold = t
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| self.bad(key, format!("bad threshold '{t}'")))?;
                let factor = f
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| self.bad(key, format!("bad factor '{f}'")))?;
                Ok((threshold, factor))
            })
            .collect()
    }
}

/// Everything a pipeline run needs, assembled from a config file.
#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub synth: SynthSceneSpec,
    pub synth_count: usize,
    pub label_count: usize,
    pub keep_full_z: bool,
    pub crop_size_xy: f64,
    pub crop_overlap_train: f64,
    pub voxel_size: f64,
    pub dims_cap: usize,
    pub fcnn: FcnnConfig,
    pub augment: AugmentConfig,
    pub crf: CrfParams,
    pub crf_iters_test: usize,
    pub lattice_backend: bool,
    pub train: TrainConfig,
    pub gridsearch_candidates: Vec<f64>,
}

impl PipelineSettings {
    pub fn from_config(cfg: &RunConfig) -> Result<PipelineSettings> {
        let label_count = cfg.usize_or("data.label_count", crate::synth::LABEL_COUNT)?;
        let synth = SynthSceneSpec {
            room: [
                cfg.f64_or("synth.room_x", 4.0)?,
                cfg.f64_or("synth.room_y", 4.0)?,
                cfg.f64_or("synth.room_z", 2.5)?,
            ],
            density: cfg.f64_or("synth.density", 650.0)?,
            box_count: cfg.usize_or("synth.boxes", 3)?,
            pillar_count: cfg.usize_or("synth.pillars", 2)?,
            color_noise: cfg.f64_or("synth.color_noise", 5.0)?,
            label_noise: cfg.f64_or("synth.label_noise", 0.0)?,
            seed: 0,
        };
        let in_channels = cfg.usize_or("fcnn.in_channels", 4)?;
        let fcnn = FcnnConfig {
            in_channels,
            label_count,
            widths: cfg.usize_list_or("fcnn.widths", &[16, 32, 32, 32])?,
            downsample_factor: cfg.usize_or("fcnn.downsample", 4)?,
            residual_blocks: cfg.usize_or("fcnn.residual_blocks", 3)?,
        };
        fcnn.validate()?;
        let augment = AugmentConfig {
            color_range: cfg.f64_or("augment.color_range", 2.5)?,
            angle_range: std::f64::consts::TAU,
            scale_range: (
                cfg.f64_or("augment.scale_low", 0.9)?,
                cfg.f64_or("augment.scale_high", 1.1)?,
            ),
            subsample_table: cfg.subsample_table("augment.subsample")?,
            seed: cfg.u64_or("augment.seed", 0)?,
        };
        augment.validate()?;
        let mut crf = CrfParams::manual_init(
            label_count,
            cfg.f64_or("crf.theta_alpha", 0.8)?,
            cfg.f64_or("crf.theta_beta", 11.0)?,
            cfg.f64_or("crf.theta_gamma", 0.05)?,
        )?;
        // Manual-init kernel weights stay at w_s = 3, w_b = 5.
        let _ = &mut crf;
        let backend = cfg.str_or("crf.backend", "lattice");
        let lattice_backend = match backend.as_str() {
            "lattice" | "permutohedral" => true,
            "bruteforce" => false,
            other => {
                return Err(Error::Config(format!(
                    "crf.backend '{other}' (use lattice or bruteforce)"
                )))
            }
        };
        let train = TrainConfig {
            stage1_epochs: cfg.usize_or("train.stage1_epochs", 200)?,
            stage1_lr: cfg.f64_or("train.stage1_lr", 1e-3)?,
            lr_decay_every: cfg.usize_or("train.lr_decay_every", 50)?,
            stage2: cfg.bool_or("train.stage2", true)?,
            stage2_epochs: cfg.usize_or("train.stage2_epochs", 2)?,
            stage2_lr: cfg.f64_or("train.stage2_lr", 1e-5)?,
            kernel_lr_mult: cfg.f64_or("train.kernel_lr_mult", 1e4)?,
            compat_lr_mult: cfg.f64_or("train.compat_lr_mult", 1e3)?,
            crf_iters_train: cfg.usize_or("crf.iters_train", 5)?,
            momentum: cfg.f64_or("train.momentum", 0.9)?,
            seed: cfg.u64_or("train.seed", 1)?,
            eval_every: cfg.usize_or("train.eval_every", 10)?,
        };
        train.validate()?;
        let gridsearch_candidates = match cfg.f64_list("gridsearch.theta_alpha")? {
            None => vec![0.2, 0.4, 0.8, 1.6, 3.2],
            Some(c) => c,
        };
        // Bandwidth search is restricted to [0.1, 3.2] m.
        for &c in &gridsearch_candidates {
            if !(0.1..=3.2).contains(&c) {
                return Err(Error::Config(format!(
                    "gridsearch.theta_alpha candidate {c} outside [0.1, 3.2] m"
                )));
            }
        }
        Ok(PipelineSettings {
            synth,
            synth_count: cfg.usize_or("synth.count", 20)?,
            label_count,
            keep_full_z: cfg.bool_or("data.keep_full_z", true)?,
            crop_size_xy: cfg.f64_or("crop.size_xy", 5.0)?,
            crop_overlap_train: cfg.f64_or("crop.overlap_train", 0.5)?,
            voxel_size: cfg.f64_or("voxel.size", 0.05)?,
            dims_cap: cfg.usize_or("voxel.dims_cap", 100)?,
            fcnn,
            augment,
            crf,
            crf_iters_test: cfg.usize_or("crf.iters_test", 10)?,
            lattice_backend,
            train,
            gridsearch_candidates,
        })
    }
}
