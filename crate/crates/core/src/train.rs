//! Two-stage optimization: stage 1 trains the network through trilinear
//! interpolation on a point-level loss; stage 2 unrolls the CRF on top and
//! trains the whole chain jointly. Also hosts evaluation, inference over
//! whole clouds and the bandwidth grid search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{color_jitter, rotate_scale, subsample, AugmentConfig};
use crate::autodiff::{SgdMomentum, Tape};
use crate::cloud::{crop_subareas, LabeledPointCloud};
use crate::crf::{
    crf_backward, crf_forward, CrfFeatures, CrfParams, FilterBackend, Filters,
};
use crate::error::{Error, Result};
use crate::fcnn::Network;
use crate::metrics::{scores, ConfusionMatrix, Scores};
use crate::tensor::Tensor;
use crate::trilinear::{compute_weights, interpolate, splat};
use crate::voxel::{build_grid, VoxelGrid};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    /// Stage-1 learning rate divides by 10 every this many epochs.
    pub lr_decay_every: usize,
    /// Whether a `train` run continues into stage 2.
    pub stage2: bool,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    /// Learning-rate multiplier for the CRF kernel weights.
    pub kernel_lr_mult: f64,
    /// Learning-rate multiplier for the compatibility matrix.
    pub compat_lr_mult: f64,
    pub crf_iters_train: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Validation metrics every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 200,
            stage1_lr: 1e-3,
            lr_decay_every: 50,
            stage2: true,
            stage2_epochs: 2,
            stage2_lr: 1e-5,
            kernel_lr_mult: 1e4,
            compat_lr_mult: 1e3,
            crf_iters_train: 5,
            momentum: 0.9,
            seed: 1,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_lr < 0.0 || self.stage2_lr < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.crf_iters_train == 0 {
            return Err(Error::Config("crf_iters_train must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn stage1_lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.stage1_lr;
        }
        self.stage1_lr / 10f64.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Fixed plumbing shared by training, inference and evaluation.
#[derive(Debug, Clone)]
pub struct PipelineOpts {
    pub voxel_size: f64,
    pub dims_cap: usize,
    pub crop_size_xy: f64,
    pub keep_full_z: bool,
    pub backend: FilterBackend,
}

impl Default for PipelineOpts {
    fn default() -> Self {
        PipelineOpts {
            voxel_size: 0.05,
            dims_cap: 100,
            crop_size_xy: 5.0,
            keep_full_z: true,
            backend: FilterBackend::Permutohedral,
        }
    }
}

/// One row of the loss/metric curve CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: Option<f64>,
    pub miou: Option<f64>,
}

/// Writes curves as `epoch,split,loss,miou` CSV.
pub fn write_curves(path: &std::path::Path, rows: &[CurveRow]) -> Result<()> {
    let mut text = String::from("epoch,split,loss,miou\n");
    for row in rows {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9}"));
        text.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch,
            row.split,
            fmt(row.loss),
            fmt(row.miou)
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean negative log-probability of the true label over labeled points,
/// with the gradient `(softmax - onehot) / N` with respect to the logits.
pub fn kl_loss_from_logits(
    logits: &Tensor,
    labels: &[Option<usize>],
) -> Result<(f64, Tensor)> {
    let probs = crate::crf::softmax_rows(logits);
    let (loss, mut grad) = nll_over_probs(&probs, labels)?;
    // Chain through the softmax: d/dz = (p - onehot) / n_labeled.
    let l = logits.shape()[1];
    let n_labeled = labels.iter().flatten().count() as f64;
    for (i, label) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[i * l..(i + 1) * l];
        match label {
            Some(y) => {
                for (li, g) in row.iter_mut().enumerate() {
                    let p = probs.data()[i * l + li];
                    *g = (p - if li == *y { 1.0 } else { 0.0 }) / n_labeled;
                }
            }
            None => row.fill(0.0),
        }
    }
    Ok((loss, grad))
}

/// Same loss over an already-normalized distribution (the CRF output);
/// gradient is `-1 / (N * q[y])` at the true label.
pub fn kl_loss_from_probs(probs: &Tensor, labels: &[Option<usize>]) -> Result<(f64, Tensor)> {
    nll_over_probs(probs, labels)
}

/// Floor for marginals inside the log loss. A strongly coupled CRF can
/// saturate a true label's marginal to an exact floating-point zero, which
/// would make the loss and its gradient infinite.
const PROB_FLOOR: f64 = 1e-12;

fn nll_over_probs(probs: &Tensor, labels: &[Option<usize>]) -> Result<(f64, Tensor)> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "probs {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let l = shape[1];
    let n_labeled = labels.iter().flatten().count();
    if n_labeled == 0 {
        return Err(Error::InvalidInput("no labeled points in loss".into()));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(shape);
    for (i, label) in labels.iter().enumerate() {
        let Some(y) = label else { continue };
        if *y >= l {
            return Err(Error::InvalidInput(format!("label {y} >= {l}")));
        }
        let p = probs.data()[i * l + y].max(PROB_FLOOR);
        loss -= p.ln();
        grad.data_mut()[i * l + y] = -1.0 / (n_labeled as f64 * p);
    }
    Ok((loss / n_labeled as f64, grad))
}

/// Voxelizes a crop and pads it for the network.
fn grid_for(network: &Network, crop: &LabeledPointCloud, pipe: &PipelineOpts) -> Result<VoxelGrid> {
    let grid = build_grid(crop, pipe.voxel_size, None, pipe.dims_cap)?;
    Ok(grid.pad_to_multiple(network.config.downsample_factor))
}

/// Network forward + trilinear transfer for one crop, on a fresh tape.
/// Returns everything the caller needs to continue forward or backward.
struct CropForward {
    tape: Tape,
    bound: crate::fcnn::BoundNet,
    weights: crate::trilinear::InterpWeights,
    point_logits: Tensor,
}

fn forward_to_points(
    network: &Network,
    crop: &LabeledPointCloud,
    pipe: &PipelineOpts,
) -> Result<CropForward> {
    let grid = grid_for(network, crop, pipe)?;
    let mut tape = Tape::new();
    let bound = network.forward(&mut tape, &grid)?;
    let coarse = grid.geom.coarsened(network.config.downsample_factor)?;
    let weights = compute_weights(&crop.positions(), &coarse)?;
    let point_logits = interpolate(&weights, tape.value(bound.logits))?;
    Ok(CropForward {
        tape,
        bound,
        weights,
        point_logits,
    })
}

fn apply_augmentations(
    crop: &LabeledPointCloud,
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledPointCloud> {
    let jittered = if crop.has_color() {
        color_jitter(crop, aug, rng)?
    } else {
        crop.clone()
    };
    let angle = rng.gen_range(0.0..aug.angle_range.max(f64::MIN_POSITIVE));
    let scale = rng.gen_range(aug.scale_range.0..=aug.scale_range.1);
    let rotated = rotate_scale(&jittered, angle, scale)?;
    subsample(&rotated, aug, rng)
}

/// Stage 1: network + trilinear transfer against the point-level loss.
/// Returns the loss curve; `val` (when given) is scored every
/// `eval_every` epochs with the stage-1 system (no CRF).
pub fn stage1(
    network: &mut Network,
    train_crops: &[LabeledPointCloud],
    val: Option<&[LabeledPointCloud]>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    pipe: &PipelineOpts,
) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    if train_crops.is_empty() {
        return Err(Error::InvalidInput("no training crops".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ aug.seed);
    let sizes: Vec<usize> = network.params.iter().map(|p| p.value.len()).collect();
    let mut sgd = SgdMomentum::new(cfg.momentum, &sizes);
    let mut curve = Vec::new();

    for epoch in 0..cfg.stage1_epochs {
        let lr = cfg.stage1_lr_at(epoch);
        let mut epoch_loss = 0.0;
        for crop in train_crops {
            let augmented = apply_augmentations(crop, aug, &mut rng)?;
            let fwd = forward_to_points(network, &augmented, pipe)?;
            let (loss, d_logits) = kl_loss_from_logits(&fwd.point_logits, &augmented.labels())?;
            epoch_loss += loss;
            let d_vox = splat(&fwd.weights, &d_logits)?;
            let grads = fwd.tape.backward(fwd.bound.logits, d_vox)?;
            for (i, param) in network.params.iter_mut().enumerate() {
                let g = grads
                    .wrt(fwd.bound.param_vars[i])
                    .expect("every parameter reaches the logits");
                sgd.step_slot(i, param.value.data_mut(), g.data(), lr);
            }
        }
        curve.push(CurveRow {
            epoch,
            split: "train",
            loss: Some(epoch_loss / train_crops.len() as f64),
            miou: None,
        });
        if let Some(val_clouds) = val {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                let report = evaluate_clouds(network, None, val_clouds, pipe)?;
                curve.push(CurveRow {
                    epoch,
                    split: "val",
                    loss: Some(report.mean_loss),
                    miou: Some(report.scores.mean_iou),
                });
            }
        }
    }
    Ok(curve)
}

/// Stage 2: the full network -> trilinear -> CRF chain trained jointly.
/// Network parameters use the base rate; the CRF kernel weights and the
/// compatibility matrix use their multipliers. Bandwidths are not learned.
pub fn stage2(
    network: &mut Network,
    crf: &mut CrfParams,
    train_crops: &[LabeledPointCloud],
    val: Option<&[LabeledPointCloud]>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    pipe: &PipelineOpts,
) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    if train_crops.is_empty() {
        return Err(Error::InvalidInput("no training crops".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64((cfg.seed ^ aug.seed).wrapping_add(0x9E37_79B9));
    let sizes: Vec<usize> = network.params.iter().map(|p| p.value.len()).collect();
    let mut sgd = SgdMomentum::new(cfg.momentum, &sizes);
    // Momentum state for the CRF scalars and the compatibility matrix.
    let mut crf_sgd = SgdMomentum::new(cfg.momentum, &[1, 1, crf.compat.len()]);
    let mut curve = Vec::new();

    for epoch in 0..cfg.stage2_epochs {
        let mut epoch_loss = 0.0;
        for crop in train_crops {
            let augmented = apply_augmentations(crop, aug, &mut rng)?;
            let fwd = forward_to_points(network, &augmented, pipe)?;
            let unary = fwd.point_logits.scaled(-1.0);
            let features = CrfFeatures::prepare(
                &augmented.positions(),
                augmented.colors().as_deref(),
                crf,
            )?;
            let filters = Filters::build(&features, pipe.backend)?;
            let (q, run) = crf_forward(&unary, &filters, crf, cfg.crf_iters_train)?;
            let (loss, d_q) = kl_loss_from_probs(&q.0, &augmented.labels())?;
            epoch_loss += loss;

            let crf_grads = crf_backward(&run, &d_q, crf, &filters)?;
            let d_logits = crf_grads.d_unary.scaled(-1.0);
            let d_vox = splat(&fwd.weights, &d_logits)?;
            let grads = fwd.tape.backward(fwd.bound.logits, d_vox)?;
            for (i, param) in network.params.iter_mut().enumerate() {
                let g = grads
                    .wrt(fwd.bound.param_vars[i])
                    .expect("every parameter reaches the logits");
                sgd.step_slot(i, param.value.data_mut(), g.data(), cfg.stage2_lr);
            }
            let kernel_lr = cfg.stage2_lr * cfg.kernel_lr_mult;
            let mut ws = [crf.w_spatial];
            crf_sgd.step_slot(0, &mut ws, &[crf_grads.d_w_spatial], kernel_lr);
            crf.w_spatial = ws[0];
            let mut wb = [crf.w_bilateral];
            crf_sgd.step_slot(1, &mut wb, &[crf_grads.d_w_bilateral], kernel_lr);
            crf.w_bilateral = wb[0];
            crf_sgd.step_slot(
                2,
                crf.compat.data_mut(),
                crf_grads.d_compat.data(),
                cfg.stage2_lr * cfg.compat_lr_mult,
            );
        }
        curve.push(CurveRow {
            epoch,
            split: "train",
            loss: Some(epoch_loss / train_crops.len() as f64),
            miou: None,
        });
        if let Some(val_clouds) = val {
            let report =
                evaluate_clouds(network, Some((crf, DEFAULT_TEST_ITERATIONS)), val_clouds, pipe)?;
            curve.push(CurveRow {
                epoch,
                split: "val",
                loss: Some(report.mean_loss),
                miou: Some(report.scores.mean_iou),
            });
        }
    }
    Ok(curve)
}

/// Test-time CRF iteration count.
pub const DEFAULT_TEST_ITERATIONS: usize = 10;

/// Labels a whole cloud: zero-overlap crops, voxelize, network, trilinear
/// transfer, optional CRF refinement, exactly one prediction per point.
pub fn predict_cloud(
    network: &Network,
    crf: Option<(&CrfParams, usize)>,
    cloud: &LabeledPointCloud,
    pipe: &PipelineOpts,
) -> Result<Vec<usize>> {
    let crops = crop_subareas(cloud, pipe.crop_size_xy, 0.0, pipe.keep_full_z)?;
    let mut labels = vec![0usize; cloud.len()];
    for crop in &crops {
        let fwd = forward_to_points(network, &crop.cloud, pipe)?;
        let crop_labels = match crf {
            None => argmax_rows(&fwd.point_logits),
            Some((params, iterations)) => {
                let unary = fwd.point_logits.scaled(-1.0);
                let features = CrfFeatures::prepare(
                    &crop.cloud.positions(),
                    crop.cloud.colors().as_deref(),
                    params,
                )?;
                let filters = Filters::build(&features, pipe.backend)?;
                let (q, _) = crf_forward(&unary, &filters, params, iterations)?;
                q.hard_labels()
            }
        };
        for (&orig, &label) in crop.point_indices.iter().zip(crop_labels.iter()) {
            labels[orig] = label;
        }
    }
    Ok(labels)
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let l = t.shape()[1];
    t.data()
        .chunks(l)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// Evaluation of a cloud set: confusion matrix, scores and the mean
/// point-level loss of the evaluated system.
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub scores: Scores,
    pub mean_loss: f64,
}

pub fn evaluate_clouds(
    network: &Network,
    crf: Option<(&CrfParams, usize)>,
    clouds: &[LabeledPointCloud],
    pipe: &PipelineOpts,
) -> Result<EvalReport> {
    if clouds.is_empty() {
        return Err(Error::InvalidInput("no evaluation clouds".into()));
    }
    let label_count = clouds[0].label_count;
    let mut cm = ConfusionMatrix::new(label_count);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for cloud in clouds {
        let crops = crop_subareas(cloud, pipe.crop_size_xy, 0.0, pipe.keep_full_z)?;
        let mut pred = vec![0usize; cloud.len()];
        for crop in &crops {
            let fwd = forward_to_points(network, &crop.cloud, pipe)?;
            let labels = crop.cloud.labels();
            let (loss, crop_pred) = match crf {
                None => {
                    let (loss, _) = kl_loss_from_logits(&fwd.point_logits, &labels)?;
                    (loss, argmax_rows(&fwd.point_logits))
                }
                Some((params, iterations)) => {
                    let unary = fwd.point_logits.scaled(-1.0);
                    let features = CrfFeatures::prepare(
                        &crop.cloud.positions(),
                        crop.cloud.colors().as_deref(),
                        params,
                    )?;
                    let filters = Filters::build(&features, pipe.backend)?;
                    let (q, _) = crf_forward(&unary, &filters, params, iterations)?;
                    let (loss, _) = kl_loss_from_probs(&q.0, &labels)?;
                    (loss, q.hard_labels())
                }
            };
            loss_sum += loss;
            loss_count += 1;
            for (&orig, &label) in crop.point_indices.iter().zip(crop_pred.iter()) {
                pred[orig] = label;
            }
        }
        cm.accumulate(&cloud.labels(), &pred)?;
    }
    let scores = scores(&cm)?;
    Ok(EvalReport {
        confusion: cm,
        scores,
        mean_loss: loss_sum / loss_count as f64,
    })
}

/// Saves network parameters (and CRF parameters, when given) into one
/// checkpoint file.
pub fn save_system(
    path: &std::path::Path,
    network: &Network,
    crf: Option<&CrfParams>,
) -> Result<()> {
    let mut entries = network.entries();
    if let Some(params) = crf {
        entries.push(("crf.w_spatial".into(), Tensor::scalar(params.w_spatial)));
        entries.push(("crf.w_bilateral".into(), Tensor::scalar(params.w_bilateral)));
        entries.push(("crf.compat".into(), params.compat.clone()));
        entries.push((
            "crf.thetas".into(),
            Tensor::from_vec(
                &[3],
                vec![params.theta_alpha, params.theta_beta, params.theta_gamma],
            )?,
        ));
    }
    crate::checkpoint::save(path, &entries)
}

/// Restores a system saved by [`save_system`]. The network is rebuilt from
/// `config` and filled from the file; CRF parameters are returned when the
/// file carries them.
pub fn load_system(
    path: &std::path::Path,
    config: crate::fcnn::FcnnConfig,
) -> Result<(Network, Option<CrfParams>)> {
    let entries = crate::checkpoint::load(path)?;
    let mut network = Network::build(config, 0)?;
    network.load_entries(&entries)?;
    let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let crf = match (
        find("crf.w_spatial"),
        find("crf.w_bilateral"),
        find("crf.compat"),
        find("crf.thetas"),
    ) {
        (Some(ws), Some(wb), Some(compat), Some(thetas)) => {
            if thetas.len() != 3 || compat.rank() != 2 {
                return Err(Error::InvalidInput("malformed CRF checkpoint tensors".into()));
            }
            Some(CrfParams {
                w_spatial: ws.data()[0],
                w_bilateral: wb.data()[0],
                compat: compat.clone(),
                theta_alpha: thetas.data()[0],
                theta_beta: thetas.data()[1],
                theta_gamma: thetas.data()[2],
            })
        }
        _ => None,
    };
    Ok((network, crf))
}

/// Grid search for the bilateral position bandwidth: evaluates validation
/// mIOU per candidate with the CRF at test iterations and returns the
/// argmax; ties go to the smaller candidate.
pub fn grid_search_theta_alpha(
    network: &Network,
    base: &CrfParams,
    candidates: &[f64],
    val: &[LabeledPointCloud],
    pipe: &PipelineOpts,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no grid search candidates".into()));
    }
    let mut ordered: Vec<f64> = candidates.to_vec();
    ordered.sort_by(|a, b| a.partial_cmp(b).expect("finite candidates"));
    let mut best = (f64::NEG_INFINITY, ordered[0]);
    for &candidate in &ordered {
        let mut params = base.clone();
        params.theta_alpha = candidate;
        let report =
            evaluate_clouds(network, Some((&params, DEFAULT_TEST_ITERATIONS)), val, pipe)?;
        if report.scores.mean_iou > best.0 {
            best = (report.scores.mean_iou, candidate);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcnn::FcnnConfig;
    use crate::synth::{generate, SynthSceneSpec};

    fn tiny_scene(seed: u64) -> LabeledPointCloud {
        generate(&SynthSceneSpec {
            room: [1.6, 1.6, 1.2],
            density: 150.0,
            box_count: 1,
            pillar_count: 1,
            color_noise: 4.0,
            label_noise: 0.0,
            seed,
        })
        .unwrap()
    }

    fn tiny_network(seed: u64) -> Network {
        Network::build(
            FcnnConfig {
                in_channels: 4,
                label_count: 5,
                widths: vec![6, 8, 8, 8],
                downsample_factor: 4,
                residual_blocks: 3,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_pipe() -> PipelineOpts {
        PipelineOpts {
            voxel_size: 0.1,
            dims_cap: 100,
            crop_size_xy: 5.0,
            keep_full_z: true,
            backend: FilterBackend::BruteForce,
        }
    }

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        let probs = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = vec![Some(0), Some(1)];
        let (loss, _) = kl_loss_from_probs(&probs, &labels).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_prediction_loss_is_ln_l() {
        let l = 7usize;
        let probs = Tensor::filled(&[4, l], 1.0 / l as f64);
        let labels: Vec<Option<usize>> = (0..4).map(|i| Some(i % l)).collect();
        let (loss, _) = kl_loss_from_probs(&probs, &labels).unwrap();
        assert!((loss - (l as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_literal_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 12;
        let l = 4;
        let logits = Tensor::from_vec(
            &[n, l],
            (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let labels: Vec<Option<usize>> = (0..n)
            .map(|i| if i % 5 == 0 { None } else { Some(i % l) })
            .collect();
        let (loss, _) = kl_loss_from_logits(&logits, &labels).unwrap();

        // Literal evaluation: mean over labeled observations of
        // -log softmax(logits)[y].
        let mut expect = 0.0;
        let mut count = 0usize;
        for (i, label) in labels.iter().enumerate() {
            let Some(y) = label else { continue };
            let row = &logits.data()[i * l..(i + 1) * l];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            expect -= (row[*y] - max) - z.ln();
            count += 1;
        }
        expect /= count as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn logits_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let l = 3;
        let logits = Tensor::from_vec(
            &[n, l],
            (0..n * l).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap();
        let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % l)).collect();
        let (_, grad) = kl_loss_from_logits(&logits, &labels).unwrap();
        let h = 1e-6;
        for e in 0..n * l {
            let mut plus = logits.clone();
            plus.data_mut()[e] += h;
            let mut minus = logits.clone();
            minus.data_mut()[e] -= h;
            let fd = (kl_loss_from_logits(&plus, &labels).unwrap().0
                - kl_loss_from_logits(&minus, &labels).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[e];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5);
        }
    }

    #[test]
    fn all_unlabeled_is_an_error() {
        let probs = Tensor::filled(&[3, 2], 0.5);
        assert!(kl_loss_from_probs(&probs, &[None, None, None]).is_err());
    }

    #[test]
    fn stage1_zero_lr_keeps_parameters() {
        let mut network = tiny_network(3);
        let before = network.params.clone();
        let scene = tiny_scene(1);
        let cfg = TrainConfig {
            stage1_epochs: 2,
            stage1_lr: 0.0,
            eval_every: 0,
            ..Default::default()
        };
        stage1(
            &mut network,
            &[scene],
            None,
            &cfg,
            &AugmentConfig::default(),
            &tiny_pipe(),
        )
        .unwrap();
        for (a, b) in before.iter().zip(network.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn stage1_reduces_loss_on_small_scene() {
        let mut network = tiny_network(5);
        let scene = tiny_scene(2);
        let cfg = TrainConfig {
            stage1_epochs: 20,
            stage1_lr: 3e-3,
            eval_every: 0,
            seed: 4,
            ..Default::default()
        };
        let curve = stage1(
            &mut network,
            &[scene],
            None,
            &cfg,
            &AugmentConfig::default(),
            &tiny_pipe(),
        )
        .unwrap();
        let first = curve.first().unwrap().loss.unwrap();
        let last = curve.last().unwrap().loss.unwrap();
        assert!(
            last < first,
            "loss did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn same_seed_identical_curves() {
        let run = || {
            let mut network = tiny_network(7);
            let scene = tiny_scene(3);
            let cfg = TrainConfig {
                stage1_epochs: 4,
                stage1_lr: 1e-3,
                eval_every: 0,
                seed: 9,
                ..Default::default()
            };
            stage1(
                &mut network,
                &[scene],
                None,
                &cfg,
                &AugmentConfig::default(),
                &tiny_pipe(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage2_zero_rates_change_nothing() {
        let mut network = tiny_network(11);
        let mut crf = CrfParams::manual_init(5, 0.8, 11.0, 0.05).unwrap();
        let net_before = network.params.clone();
        let crf_before = crf.clone();
        let scene = tiny_scene(4);
        let cfg = TrainConfig {
            stage2_epochs: 1,
            stage2_lr: 0.0,
            kernel_lr_mult: 0.0,
            compat_lr_mult: 0.0,
            crf_iters_train: 2,
            eval_every: 0,
            ..Default::default()
        };
        stage2(
            &mut network,
            &mut crf,
            &[scene],
            None,
            &cfg,
            &AugmentConfig::default(),
            &tiny_pipe(),
        )
        .unwrap();
        for (a, b) in net_before.iter().zip(network.params.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(crf_before, crf);
    }

    #[test]
    fn stage2_never_mutates_bandwidths() {
        let mut network = tiny_network(13);
        let mut crf = CrfParams::manual_init(5, 0.7, 11.0, 0.05).unwrap();
        let scene = tiny_scene(5);
        let cfg = TrainConfig {
            stage2_epochs: 1,
            stage2_lr: 1e-5,
            crf_iters_train: 2,
            eval_every: 0,
            ..Default::default()
        };
        stage2(
            &mut network,
            &mut crf,
            &[scene],
            None,
            &cfg,
            &AugmentConfig::default(),
            &tiny_pipe(),
        )
        .unwrap();
        assert_eq!(crf.theta_alpha, 0.7);
        assert_eq!(crf.theta_beta, 11.0);
        assert_eq!(crf.theta_gamma, 0.05);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // Full chain: one conv weight perturbed, loss through
        // voxelize -> network -> interpolate -> CRF -> KL.
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = FcnnConfig {
            in_channels: 4,
            label_count: 3,
            widths: vec![3, 4],
            downsample_factor: 2,
            residual_blocks: 1,
        };
        let network = Network::build(cfg, 17).unwrap();
        let crf = CrfParams::manual_init(3, 0.8, 11.0, 0.05).unwrap();
        // A handful of labeled colored points in a small box.
        let points: Vec<crate::cloud::PointObservation> = (0..25)
            .map(|i| crate::cloud::PointObservation {
                position: std::array::from_fn(|_| rng.gen_range(0.02..0.38)),
                color: Some(std::array::from_fn(|_| rng.gen_range(40.0..220.0))),
                intensity: None,
                label: Some(i % 3),
            })
            .collect();
        let cloud = LabeledPointCloud::new(points, 3).unwrap();
        let pipe = PipelineOpts {
            voxel_size: 0.1,
            crop_size_xy: 5.0,
            keep_full_z: true,
            dims_cap: 100,
            backend: FilterBackend::BruteForce,
        };
        let iterations = 2;

        let loss_of = |net: &Network| -> f64 {
            let fwd = forward_to_points(net, &cloud, &pipe).unwrap();
            let unary = fwd.point_logits.scaled(-1.0);
            let features =
                CrfFeatures::prepare(&cloud.positions(), cloud.colors().as_deref(), &crf)
                    .unwrap();
            let filters = Filters::build(&features, pipe.backend).unwrap();
            let (q, _) = crf_forward(&unary, &filters, &crf, iterations).unwrap();
            kl_loss_from_probs(&q.0, &cloud.labels()).unwrap().0
        };

        // Analytic gradient by the same chain the trainer uses.
        let fwd = forward_to_points(&network, &cloud, &pipe).unwrap();
        let unary = fwd.point_logits.scaled(-1.0);
        let features =
            CrfFeatures::prepare(&cloud.positions(), cloud.colors().as_deref(), &crf).unwrap();
        let filters = Filters::build(&features, pipe.backend).unwrap();
        let (q, run) = crf_forward(&unary, &filters, &crf, iterations).unwrap();
        let (_, d_q) = kl_loss_from_probs(&q.0, &cloud.labels()).unwrap();
        let crf_grads = crf_backward(&run, &d_q, &crf, &filters).unwrap();
        let d_vox = splat(&fwd.weights, &crf_grads.d_unary.scaled(-1.0)).unwrap();
        let grads = fwd.tape.backward(fwd.bound.logits, d_vox).unwrap();

        let h = 1e-5;
        let mut checked = 0usize;
        for (pi, param) in network.params.iter().enumerate() {
            let g = grads.wrt(fwd.bound.param_vars[pi]).unwrap();
            let len = param.value.len();
            for &idx in [0usize, len / 2, len - 1].iter() {
                let mut plus = network.clone();
                plus.params[pi].value.data_mut()[idx] += h;
                let mut minus = network.clone();
                minus.params[pi].value.data_mut()[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = g.data()[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-3, "param {pi} idx {idx}: {a} vs {fd} (rel {rel})");
                checked += 1;
            }
        }
        assert!(checked >= 12);
    }

    #[test]
    fn grid_search_single_candidate_returned() {
        let network = tiny_network(15);
        let crf = CrfParams::manual_init(5, 0.8, 11.0, 0.05).unwrap();
        let val = vec![tiny_scene(6)];
        let best =
            grid_search_theta_alpha(&network, &crf, &[0.4], &val, &tiny_pipe()).unwrap();
        assert_eq!(best, 0.4);
        assert!(grid_search_theta_alpha(&network, &crf, &[], &val, &tiny_pipe()).is_err());
    }

    #[test]
    fn grid_search_returns_candidate_attaining_max() {
        let network = tiny_network(19);
        let crf = CrfParams::manual_init(5, 0.8, 11.0, 0.05).unwrap();
        let val = vec![tiny_scene(7)];
        let pipe = tiny_pipe();
        let candidates = [0.2, 0.8, 1.6];
        let best =
            grid_search_theta_alpha(&network, &crf, &candidates, &val, &pipe).unwrap();
        // Re-evaluation oracle: the returned candidate's mIOU is the max.
        let miou_of = |theta: f64| {
            let mut p = crf.clone();
            p.theta_alpha = theta;
            evaluate_clouds(&network, Some((&p, DEFAULT_TEST_ITERATIONS)), &val, &pipe)
                .unwrap()
                .scores
                .mean_iou
        };
        let best_miou = miou_of(best);
        for &c in &candidates {
            assert!(best_miou >= miou_of(c) - 1e-12);
        }
    }

    #[test]
    fn predict_assigns_exactly_one_label_per_point() {
        let network = tiny_network(23);
        let scene = tiny_scene(8);
        let labels = predict_cloud(&network, None, &scene, &tiny_pipe()).unwrap();
        assert_eq!(labels.len(), scene.len());
        assert!(labels.iter().all(|&l| l < 5));
    }

    #[test]
    fn curves_roundtrip_to_csv() {
        let rows = vec![
            CurveRow {
                epoch: 0,
                split: "train",
                loss: Some(1.5),
                miou: None,
            },
            CurveRow {
                epoch: 0,
                split: "val",
                loss: Some(1.2),
                miou: Some(0.5),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_curves(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,split,loss,miou\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("0,val,1.2"));
    }
}
