//! Synthetic indoor rooms: surface-sampled point clouds with class-correlated
//! colors, standing in for real scan datasets at desk scale.
//!
//! A room is an axis-aligned box with a floor, four walls and a ceiling,
//! furnished with a few boxes on the floor and square pillars spanning floor
//! to ceiling. Points are sampled per surface with Poisson counts at the
//! configured density, colored from a per-class base color with Gaussian
//! noise, and optionally label-corrupted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{LabeledPointCloud, PointObservation};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 5] = ["floor", "wall", "ceiling", "box", "pillar"];
pub const LABEL_COUNT: usize = 5;

/// Base RGB per class; distinct enough that color carries the class signal.
const BASE_COLORS: [[f64; 3]; 5] = [
    [125.0, 95.0, 70.0],   // floor: brown
    [225.0, 222.0, 210.0], // wall: off-white
    [180.0, 185.0, 195.0], // ceiling: light gray
    [190.0, 55.0, 45.0],   // box: red
    [55.0, 85.0, 190.0],   // pillar: blue
];

#[derive(Debug, Clone)]
pub struct SynthSceneSpec {
    /// Room extents in meters (x, y, z).
    pub room: [f64; 3],
    /// Surface sampling density, points per square meter.
    pub density: f64,
    pub box_count: usize,
    pub pillar_count: usize,
    /// Per-channel color noise sigma.
    pub color_noise: f64,
    /// Probability of replacing a point's label with a random wrong one.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            room: [4.0, 4.0, 2.5],
            density: 650.0,
            box_count: 3,
            pillar_count: 2,
            color_noise: 5.0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&e| e <= 0.2) {
            return Err(Error::InvalidInput(format!(
                "degenerate room extents {:?}",
                self.room
            )));
        }
        if self.density <= 0.0 {
            return Err(Error::InvalidInput("density must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::InvalidInput("label noise rate must be in [0, 1)".into()));
        }
        if self.color_noise < 0.0 {
            return Err(Error::InvalidInput("color noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// A rectangle in 3D: corner plus two edge vectors.
struct Surface {
    origin: [f64; 3],
    edge_u: [f64; 3],
    edge_v: [f64; 3],
    label: usize,
}

impl Surface {
    fn area(&self) -> f64 {
        let cu = norm(self.edge_u);
        let cv = norm(self.edge_v);
        cu * cv
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Poisson draw via exponential gaps, chunked so large means do not
/// underflow.
fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let mut remaining = mean;
    let mut total = 0usize;
    while remaining > 0.0 {
        let chunk = remaining.min(500.0);
        remaining -= chunk;
        let limit = (-chunk).exp();
        let mut product = rng.gen::<f64>();
        let mut count = 0usize;
        while product > limit {
            product *= rng.gen::<f64>();
            count += 1;
        }
        total += count;
    }
    total
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per call keeps the draw order simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates one room. Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSceneSpec) -> Result<LabeledPointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [rx, ry, rz] = spec.room;

    let mut surfaces = vec![
        // Floor, ceiling.
        Surface {
            origin: [0.0, 0.0, 0.0],
            edge_u: [rx, 0.0, 0.0],
            edge_v: [0.0, ry, 0.0],
            label: 0,
        },
        Surface {
            origin: [0.0, 0.0, rz],
            edge_u: [rx, 0.0, 0.0],
            edge_v: [0.0, ry, 0.0],
            label: 2,
        },
        // Four walls.
        Surface {
            origin: [0.0, 0.0, 0.0],
            edge_u: [rx, 0.0, 0.0],
            edge_v: [0.0, 0.0, rz],
            label: 1,
        },
        Surface {
            origin: [0.0, ry, 0.0],
            edge_u: [rx, 0.0, 0.0],
            edge_v: [0.0, 0.0, rz],
            label: 1,
        },
        Surface {
            origin: [0.0, 0.0, 0.0],
            edge_u: [0.0, ry, 0.0],
            edge_v: [0.0, 0.0, rz],
            label: 1,
        },
        Surface {
            origin: [rx, 0.0, 0.0],
            edge_u: [0.0, ry, 0.0],
            edge_v: [0.0, 0.0, rz],
            label: 1,
        },
    ];

    // Boxes: top face plus four sides, resting on the floor.
    for _ in 0..spec.box_count {
        let sx = rng.gen_range(0.35..0.85);
        let sy = rng.gen_range(0.35..0.85);
        let sz = rng.gen_range(0.3..0.9);
        let x0 = rng.gen_range(0.3..(rx - sx - 0.3).max(0.31));
        let y0 = rng.gen_range(0.3..(ry - sy - 0.3).max(0.31));
        surfaces.push(Surface {
            origin: [x0, y0, sz],
            edge_u: [sx, 0.0, 0.0],
            edge_v: [0.0, sy, 0.0],
            label: 3,
        });
        for (o, u, v) in [
            ([x0, y0, 0.0], [sx, 0.0, 0.0], [0.0, 0.0, sz]),
            ([x0, y0 + sy, 0.0], [sx, 0.0, 0.0], [0.0, 0.0, sz]),
            ([x0, y0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz]),
            ([x0 + sx, y0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz]),
        ] {
            surfaces.push(Surface {
                origin: o,
                edge_u: u,
                edge_v: v,
                label: 3,
            });
        }
    }

    // Pillars: four sides spanning the full height.
    for _ in 0..spec.pillar_count {
        let side = rng.gen_range(0.2..0.4);
        let x0 = rng.gen_range(0.4..(rx - side - 0.4).max(0.41));
        let y0 = rng.gen_range(0.4..(ry - side - 0.4).max(0.41));
        for (o, u) in [
            ([x0, y0, 0.0], [side, 0.0, 0.0]),
            ([x0, y0 + side, 0.0], [side, 0.0, 0.0]),
            ([x0, y0, 0.0], [0.0, side, 0.0]),
            ([x0 + side, y0, 0.0], [0.0, side, 0.0]),
        ] {
            surfaces.push(Surface {
                origin: o,
                edge_u: u,
                edge_v: [0.0, 0.0, rz],
                label: 4,
            });
        }
    }

    let mut points = Vec::new();
    for surface in &surfaces {
        let count = poisson(&mut rng, surface.area() * spec.density);
        for _ in 0..count {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let position = std::array::from_fn(|a| {
                surface.origin[a] + u * surface.edge_u[a] + v * surface.edge_v[a]
            });
            let base = BASE_COLORS[surface.label];
            let color = std::array::from_fn(|a| {
                (base[a] + spec.color_noise * gaussian(&mut rng)).clamp(0.0, 255.0)
            });
            let label = if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
                // Uniform over the other labels.
                let mut wrong = rng.gen_range(0..LABEL_COUNT - 1);
                if wrong >= surface.label {
                    wrong += 1;
                }
                wrong
            } else {
                surface.label
            };
            points.push(PointObservation {
                position,
                color: Some(color),
                intensity: None,
                label: Some(label),
            });
        }
    }
    LabeledPointCloud::new(points, LABEL_COUNT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_density_doubles_count_within_three_sigma() {
        let spec1 = SynthSceneSpec {
            density: 300.0,
            seed: 5,
            ..Default::default()
        };
        let spec2 = SynthSceneSpec {
            density: 600.0,
            seed: 6,
            ..Default::default()
        };
        let n1 = generate(&spec1).unwrap().len() as f64;
        let n2 = generate(&spec2).unwrap().len() as f64;
        // Under Poisson sampling, n2 ~ Poisson(2 * E[n1]); compare against
        // the doubled observation with combined deviation.
        let expect = 2.0 * n1;
        let sigma = (expect + 4.0 * n1).sqrt();
        assert!(
            (n2 - expect).abs() <= 3.0 * sigma,
            "n1 = {n1}, n2 = {n2}"
        );
    }

    #[test]
    fn zero_noise_labels_match_surface_colors() {
        let spec = SynthSceneSpec {
            label_noise: 0.0,
            color_noise: 0.0,
            density: 120.0,
            seed: 7,
            ..Default::default()
        };
        let cloud = generate(&spec).unwrap();
        for p in &cloud.points {
            let label = p.label.unwrap();
            let color = p.color.unwrap();
            // With zero color noise the color is exactly the class base.
            for a in 0..3 {
                assert_eq!(color[a], BASE_COLORS[label][a]);
            }
        }
    }

    #[test]
    fn same_seed_identical_output() {
        let spec = SynthSceneSpec {
            seed: 11,
            density: 200.0,
            label_noise: 0.05,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn degenerate_extents_rejected() {
        let spec = SynthSceneSpec {
            room: [4.0, 0.0, 2.5],
            ..Default::default()
        };
        assert!(generate(&spec).is_err());
        let spec = SynthSceneSpec {
            density: -1.0,
            ..Default::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn every_class_present_and_inside_room() {
        let spec = SynthSceneSpec {
            seed: 3,
            ..Default::default()
        };
        let cloud = generate(&spec).unwrap();
        let mut seen = [false; LABEL_COUNT];
        for p in &cloud.points {
            seen[p.label.unwrap()] = true;
            for a in 0..3 {
                assert!(p.position[a] >= -1e-9 && p.position[a] <= spec.room[a] + 1e-9);
            }
        }
        assert!(seen.iter().all(|&s| s), "classes seen: {seen:?}");
    }

    #[test]
    fn label_noise_rate_roughly_respected() {
        let spec = SynthSceneSpec {
            label_noise: 0.2,
            color_noise: 0.0,
            density: 400.0,
            seed: 13,
            ..Default::default()
        };
        let cloud = generate(&spec).unwrap();
        // With zero color noise, the color identifies the true surface.
        let mut wrong = 0usize;
        for p in &cloud.points {
            let color = p.color.unwrap();
            let true_label = BASE_COLORS
                .iter()
                .position(|c| c.iter().zip(color.iter()).all(|(a, b)| a == b))
                .unwrap();
            if p.label.unwrap() != true_label {
                wrong += 1;
            }
        }
        let rate = wrong as f64 / cloud.len() as f64;
        assert!((rate - 0.2).abs() < 0.02, "noise rate {rate}");
    }
}
