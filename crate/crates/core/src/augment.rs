//! On-the-fly training-time augmentation: color jitter, rotation about the
//! gravity axis, uniform scaling and random point sub-sampling.
//!
//! Every operation is a pure function of `(input, rng state)`, so a training
//! run is reproducible from its seed.

use rand::Rng;

use crate::cloud::LabeledPointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Uniform per-channel color perturbation half-width (color units).
    pub color_range: f64,
    /// Rotation angles are drawn from `[0, angle_range)` radians.
    pub angle_range: f64,
    /// Uniform scale factor range.
    pub scale_range: (f64, f64),
    /// Sub-sampling schedule: `(point count threshold, factor)` pairs; the
    /// factor of the largest threshold at or below the cloud size applies.
    pub subsample_table: Vec<(usize, f64)>,
    /// Base seed mixed into the training seed.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            color_range: 2.5,
            angle_range: std::f64::consts::TAU,
            scale_range: (0.9, 1.1),
            subsample_table: Vec::new(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.color_range < 0.0 {
            return Err(Error::InvalidInput("color_range must be >= 0".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidInput(format!(
                "scale range ({lo}, {hi}) must satisfy 0 < low <= high"
            )));
        }
        if self.subsample_table.iter().any(|&(_, f)| f < 1.0) {
            return Err(Error::InvalidInput(
                "sub-sampling factors must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Perturbs each color channel by an i.i.d. uniform draw in
/// `[-color_range, +color_range]`, clamping to [0, 255]. Positions and
/// labels are untouched.
pub fn color_jitter(
    cloud: &LabeledPointCloud,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<LabeledPointCloud> {
    if !cloud.has_color() {
        return Err(Error::InvalidInput(
            "color jitter needs a colored cloud".into(),
        ));
    }
    let mut out = cloud.clone();
    if config.color_range == 0.0 {
        return Ok(out);
    }
    let r = config.color_range;
    for p in &mut out.points {
        let c = p.color.as_mut().expect("checked above");
        for ch in c.iter_mut() {
            *ch = (*ch + rng.gen_range(-r..=r)).clamp(0.0, 255.0);
        }
    }
    Ok(out)
}

/// Rotates positions about the vertical axis through the cloud's centroid
/// and scales uniformly about the same point. The centroid is a fixed point
/// of the transform, so composing `(angle, s)` with `(-angle, 1/s)` recovers
/// the original positions. Bounds are recomputed.
pub fn rotate_scale(
    cloud: &LabeledPointCloud,
    angle: f64,
    scale: f64,
) -> Result<LabeledPointCloud> {
    if scale <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let center = centroid(cloud);
    let (sin, cos) = angle.sin_cos();
    let mut out = cloud.clone();
    for p in &mut out.points {
        let dx = p.position[0] - center[0];
        let dy = p.position[1] - center[1];
        let dz = p.position[2] - center[2];
        p.position[0] = center[0] + scale * (cos * dx - sin * dy);
        p.position[1] = center[1] + scale * (sin * dx + cos * dy);
        p.position[2] = center[2] + scale * dz;
    }
    out.refresh_bounds();
    Ok(out)
}

fn centroid(cloud: &LabeledPointCloud) -> [f64; 3] {
    let mut c = [0.0f64; 3];
    for p in &cloud.points {
        for a in 0..3 {
            c[a] += p.position[a];
        }
    }
    let n = cloud.len() as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Looks up the sub-sampling factor for `count` points: the factor of the
/// largest threshold <= count, or 1 below every threshold.
pub fn subsample_factor(table: &[(usize, f64)], count: usize) -> f64 {
    let mut best: Option<(usize, f64)> = None;
    for &(threshold, factor) in table {
        if threshold <= count && best.map_or(true, |(t, _)| threshold >= t) {
            best = Some((threshold, factor));
        }
    }
    best.map_or(1.0, |(_, f)| f)
}

/// Keeps each point independently with probability `1/factor` (factor from
/// the config table); always retains at least one point. The test-time path
/// never calls this.
pub fn subsample(
    cloud: &LabeledPointCloud,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<LabeledPointCloud> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot subsample an empty cloud".into()));
    }
    let factor = subsample_factor(&config.subsample_table, cloud.len());
    if factor <= 1.0 {
        return Ok(cloud.clone());
    }
    let keep_p = 1.0 / factor;
    let mut points = Vec::with_capacity((cloud.len() as f64 * keep_p) as usize + 1);
    for p in &cloud.points {
        if rng.gen::<f64>() < keep_p {
            points.push(p.clone());
        }
    }
    if points.is_empty() {
        points.push(cloud.points[0].clone());
    }
    let mut out = cloud.clone();
    out.points = points;
    out.refresh_bounds();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointObservation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn colored_cloud(n: usize) -> LabeledPointCloud {
        let points = (0..n)
            .map(|i| PointObservation {
                position: [i as f64 * 0.1, (i % 7) as f64 * 0.2, (i % 3) as f64 * 0.3],
                color: Some([100.0, 200.0, (i % 256) as f64]),
                intensity: None,
                label: Some(i % 4),
            })
            .collect();
        LabeledPointCloud::new(points, 4).unwrap()
    }

    #[test]
    fn zero_range_is_identity() {
        let cloud = colored_cloud(20);
        let cfg = AugmentConfig {
            color_range: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = color_jitter(&cloud, &cfg, &mut rng).unwrap();
        assert_eq!(out.points, cloud.points);
    }

    #[test]
    fn jitter_clamps_at_255() {
        let mut cloud = colored_cloud(50);
        for p in &mut cloud.points {
            p.color = Some([255.0, 255.0, 255.0]);
        }
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = color_jitter(&cloud, &cfg, &mut rng).unwrap();
        for p in &out.points {
            for ch in p.color.unwrap() {
                assert!(ch <= 255.0);
            }
        }
        // With range 2.5 at least one draw must land below 255.
        assert!(out
            .points
            .iter()
            .any(|p| p.color.unwrap().iter().any(|&c| c < 255.0)));
    }

    #[test]
    fn jitter_without_color_errors() {
        let cloud = LabeledPointCloud::new(
            vec![PointObservation {
                position: [0.0; 3],
                color: None,
                intensity: None,
                label: None,
            }],
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(color_jitter(&cloud, &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn jitter_draws_stay_in_range_with_zero_mean() {
        // Statistical check on the raw perturbations over 1e5 draws.
        let cloud = colored_cloud(34000); // > 1e5 channel draws
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = color_jitter(&cloud, &cfg, &mut rng).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (a, b) in cloud.points.iter().zip(out.points.iter()) {
            let ca = a.color.unwrap();
            let cb = b.color.unwrap();
            for ch in 0..3 {
                // Skip channels that may have clamped.
                if ca[ch] >= 3.0 && ca[ch] <= 252.0 {
                    let d = cb[ch] - ca[ch];
                    assert!(d.abs() <= 2.5 + 1e-12);
                    sum += d;
                    count += 1;
                }
            }
        }
        assert!(count > 100_000);
        let mean = sum / count as f64;
        assert!(mean.abs() < 0.05, "mean perturbation {mean}");
    }

    #[test]
    fn rotate_identity() {
        let cloud = colored_cloud(15);
        let out = rotate_scale(&cloud, 0.0, 1.0).unwrap();
        for (a, b) in cloud.points.iter().zip(out.points.iter()) {
            for axis in 0..3 {
                assert!((a.position[axis] - b.position[axis]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_turn_about_centroid() {
        // AABB spans [-1,1]^2 x {0}, so the rotation center is the origin.
        let mk = |p: [f64; 3]| PointObservation {
            position: p,
            color: None,
            intensity: None,
            label: None,
        };
        let cloud = LabeledPointCloud::new(
            vec![mk([1.0, 0.0, 0.0]), mk([-1.0, 0.0, 0.0]), mk([0.0, 1.0, 0.0]), mk([0.0, -1.0, 0.0])],
            1,
        )
        .unwrap();
        let out = rotate_scale(&cloud, std::f64::consts::FRAC_PI_2, 1.0).unwrap();
        // centroid + (1,0,0) -> centroid + (0,1,0)
        let p = out.points[0].position;
        assert!((p[0] - 0.0).abs() < 1e-12);
        assert!((p[1] - 1.0).abs() < 1e-12);
        assert!((p[2] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_scale() {
        let cloud = colored_cloud(3);
        assert!(rotate_scale(&cloud, 0.1, 0.0).is_err());
        assert!(rotate_scale(&cloud, 0.1, -1.0).is_err());
    }

    #[test]
    fn pairwise_distances_scale_exactly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cloud = colored_cloud(30);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let scale = rng.gen_range(0.5..2.0);
            let out = rotate_scale(&cloud, angle, scale).unwrap();
            for i in 0..cloud.len() {
                for j in (i + 1)..cloud.len() {
                    let d0 = dist(&cloud.points[i].position, &cloud.points[j].position);
                    let d1 = dist(&out.points[i].position, &out.points[j].position);
                    assert!((d1 - scale * d0).abs() < 1e-9 * (1.0 + d0));
                }
            }
        }
    }

    #[test]
    fn inverse_transform_recovers_positions() {
        let cloud = colored_cloud(40);
        let (angle, scale) = (1.234, 1.07);
        let fwd = rotate_scale(&cloud, angle, scale).unwrap();
        let back = rotate_scale(&fwd, -angle, 1.0 / scale).unwrap();
        for (a, b) in cloud.points.iter().zip(back.points.iter()) {
            for axis in 0..3 {
                assert!((a.position[axis] - b.position[axis]).abs() < 1e-9);
            }
        }
        assert_eq!(cloud.labels(), back.labels());
        assert_eq!(cloud.len(), back.len());
    }

    fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn factor_one_keeps_everything() {
        let cloud = colored_cloud(100);
        let cfg = AugmentConfig {
            subsample_table: vec![(1000, 4.0)], // threshold above the count
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = subsample(&cloud, &cfg, &mut rng).unwrap();
        assert_eq!(out.len(), cloud.len());
    }

    #[test]
    fn s3dis_table_row_factor_ten() {
        // Any point count >= 1e5 maps to factor 10.
        let table = vec![(100_000, 10.0), (1_000_000, 10.0), (10_000_000, 10.0)];
        assert_eq!(subsample_factor(&table, 100_000), 10.0);
        assert_eq!(subsample_factor(&table, 5_000_000), 10.0);
        assert_eq!(subsample_factor(&table, 99_999), 1.0);
    }

    #[test]
    fn retained_count_within_three_sigma() {
        let n = 1_000_000usize;
        let points = (0..n)
            .map(|i| PointObservation {
                position: [(i % 1000) as f64, (i / 1000) as f64, 0.0],
                color: None,
                intensity: None,
                label: None,
            })
            .collect();
        let cloud = LabeledPointCloud::new(points, 1).unwrap();
        let cfg = AugmentConfig {
            subsample_table: vec![(100_000, 10.0)],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = subsample(&cloud, &cfg, &mut rng).unwrap();
        let p = 0.1;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let kept = out.len() as f64;
        assert!(
            (kept - mean).abs() <= 3.0 * sigma,
            "kept {kept}, expected {mean} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let cloud = colored_cloud(5000);
        let cfg = AugmentConfig {
            subsample_table: vec![(1000, 3.0)],
            ..Default::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let jittered = color_jitter(&cloud, &cfg, &mut rng).unwrap();
            subsample(&jittered, &cfg, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.points, b.points);
    }
}
