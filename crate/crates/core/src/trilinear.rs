//! Voxel-to-point score transfer and its exact adjoint.
//!
//! Each point's score is a weighted sum over the 8 coarse-voxel centers of
//! the 2x2x2 cell bracketing it, with per-axis weights
//! `1 - |p - center| / V`. The same weights splat point gradients back onto
//! the voxels during the backward pass, making `splat` the exact adjoint of
//! `interpolate`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::voxel::GridGeom;

/// Per-point interpolation stencil: 8 linear voxel sites and their weights.
/// Neighbors falling outside the grid carry weight 0 and the remaining
/// weights are renormalized to sum to 1.
#[derive(Debug, Clone)]
pub struct InterpWeights {
    pub geom: GridGeom,
    sites: Vec<[usize; 8]>,
    weights: Vec<[f64; 8]>,
}

impl InterpWeights {
    pub fn point_count(&self) -> usize {
        self.sites.len()
    }

    /// The stencil of point `i` as `(site, weight)` pairs.
    pub fn stencil(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.sites[i]
            .iter()
            .copied()
            .zip(self.weights[i].iter().copied())
    }
}

/// Builds interpolation stencils for `points` over the coarse grid. Points
/// must lie within the grid extent (closed upper face).
pub fn compute_weights(points: &[[f64; 3]], coarse: &GridGeom) -> Result<InterpWeights> {
    let v = coarse.voxel_size;
    let dims = coarse.dims;
    let mut sites = Vec::with_capacity(points.len());
    let mut weights = Vec::with_capacity(points.len());

    for (pi, p) in points.iter().enumerate() {
        let mut base = [0isize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let rel = (p[a] - coarse.origin[a]) / v;
            if rel < 0.0 || rel > dims[a] as f64 {
                return Err(Error::InvalidInput(format!(
                    "point {pi} at {p:?} outside grid extent on axis {a}"
                )));
            }
            // Offset of the point from the lower bracketing center.
            let u = rel - 0.5;
            let b = u.floor();
            base[a] = b as isize;
            frac[a] = u - b;
        }

        let mut s = [0usize; 8];
        let mut w = [0.0f64; 8];
        let mut sum = 0.0;
        for n in 0..8 {
            let off = [(n >> 2) & 1, (n >> 1) & 1, n & 1];
            let mut weight = 1.0;
            let mut idx = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let coord = base[a] + off[a] as isize;
                if coord < 0 || coord >= dims[a] as isize {
                    inside = false;
                    break;
                }
                idx[a] = coord as usize;
                weight *= if off[a] == 0 { 1.0 - frac[a] } else { frac[a] };
            }
            if inside {
                s[n] = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
                w[n] = weight;
                sum += weight;
            }
        }
        if sum <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "point {pi} has no in-grid neighbors"
            )));
        }
        // Dropped boundary neighbors: renormalize so weights sum to 1.
        if (sum - 1.0).abs() > 1e-15 {
            for wn in w.iter_mut() {
                *wn /= sum;
            }
        }
        sites.push(s);
        weights.push(w);
    }
    Ok(InterpWeights {
        geom: *coarse,
        sites,
        weights,
    })
}

/// Transfers `(L, cx, cy, cz)` voxel scores to points, returning `(N, L)`.
pub fn interpolate(weights: &InterpWeights, voxel_scores: &Tensor) -> Result<Tensor> {
    let (l, cells) = check_voxel_shape(weights, voxel_scores)?;
    let n = weights.point_count();
    let mut out = Tensor::zeros(&[n, l]);
    let vs = voxel_scores.data();
    let od = out.data_mut();
    for i in 0..n {
        for (site, w) in weights.stencil(i) {
            if w == 0.0 {
                continue;
            }
            for li in 0..l {
                od[i * l + li] += w * vs[li * cells + site];
            }
        }
    }
    out.debug_check_finite("interpolate");
    Ok(out)
}

/// Adjoint of [`interpolate`]: accumulates `(N, L)` point gradients into a
/// `(L, cx, cy, cz)` voxel gradient with the same weights.
pub fn splat(weights: &InterpWeights, point_grads: &Tensor) -> Result<Tensor> {
    let n = weights.point_count();
    let shape = point_grads.shape();
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::Shape(format!(
            "point grads {:?} vs {} points",
            shape, n
        )));
    }
    let l = shape[1];
    let dims = weights.geom.dims;
    let cells = weights.geom.cell_count();
    let mut out = Tensor::zeros(&[l, dims[0], dims[1], dims[2]]);
    let od = out.data_mut();
    let pg = point_grads.data();
    for i in 0..n {
        for (site, w) in weights.stencil(i) {
            if w == 0.0 {
                continue;
            }
            for li in 0..l {
                od[li * cells + site] += w * pg[i * l + li];
            }
        }
    }
    Ok(out)
}

fn check_voxel_shape(weights: &InterpWeights, voxel_scores: &Tensor) -> Result<(usize, usize)> {
    let s = voxel_scores.shape();
    let dims = weights.geom.dims;
    if s.len() != 4 || s[1] != dims[0] || s[2] != dims[1] || s[3] != dims[2] {
        return Err(Error::Shape(format!(
            "voxel scores {:?} vs grid dims {:?}",
            s, dims
        )));
    }
    Ok((s[0], weights.geom.cell_count()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(dims: [usize; 3], v: f64) -> GridGeom {
        GridGeom {
            origin: [0.0; 3],
            voxel_size: v,
            dims,
        }
    }

    #[test]
    fn point_at_center_gets_unit_weight() {
        let g = geom([4, 4, 4], 1.0);
        let p = g.center(1, 2, 0);
        let w = compute_weights(&[p], &g).unwrap();
        let weights: Vec<(usize, f64)> = w.stencil(0).filter(|&(_, wn)| wn != 0.0).collect();
        let site = (1 * 4 + 2) * 4 + 0;
        assert_eq!(weights.len(), 1);
        assert_eq!(weights[0].0, site);
        assert!((weights[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equidistant_point_gets_eighth_weights() {
        let g = geom([4, 4, 4], 1.0);
        // Corner shared by cells (1..2)^3: centers at 1.5 and 2.5 per axis.
        let p = [2.0, 2.0, 2.0];
        let w = compute_weights(&[p], &g).unwrap();
        for (_, wn) in w.stencil(0) {
            assert!((wn - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn quarter_offset_along_x() {
        let g = geom([4, 4, 4], 1.0);
        let c = g.center(1, 1, 1);
        let p = [c[0] + 0.25, c[1], c[2]];
        let w = compute_weights(&[p], &g).unwrap();
        let nonzero: Vec<(usize, f64)> = w.stencil(0).filter(|&(_, wn)| wn != 0.0).collect();
        assert_eq!(nonzero.len(), 2);
        let low = (1 * 4 + 1) * 4 + 1;
        let high = (2 * 4 + 1) * 4 + 1;
        for (site, wn) in nonzero {
            if site == low {
                assert!((wn - 0.75).abs() < 1e-15);
            } else {
                assert_eq!(site, high);
                assert!((wn - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn out_of_grid_point_errors() {
        let g = geom([2, 2, 2], 0.5);
        assert!(compute_weights(&[[1.5, 0.0, 0.0]], &g).is_err());
        assert!(compute_weights(&[[-0.1, 0.0, 0.0]], &g).is_err());
        // Closed upper face is accepted.
        assert!(compute_weights(&[[1.0, 1.0, 1.0]], &g).is_ok());
    }

    #[test]
    fn interior_weights_sum_to_one() {
        let g = geom([6, 6, 6], 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Interior: at least half a coarse voxel away from the border.
        let points: Vec<[f64; 3]> = (0..500)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.1..1.1)))
            .collect();
        let w = compute_weights(&points, &g).unwrap();
        for i in 0..points.len() {
            let sum: f64 = w.stencil(i).map(|(_, wn)| wn).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_weights_renormalized() {
        let g = geom([4, 4, 4], 1.0);
        // Near the lower corner: all axes below the first center.
        let w = compute_weights(&[[0.1, 0.2, 0.3]], &g).unwrap();
        let sum: f64 = w.stencil(0).map(|(_, wn)| wn).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_stays_constant() {
        let g = geom([3, 3, 3], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points: Vec<[f64; 3]> = (0..100)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.5)))
            .collect();
        let w = compute_weights(&points, &g).unwrap();
        let vox = Tensor::filled(&[2, 3, 3, 3], 4.2);
        let out = interpolate(&w, &vox).unwrap();
        for &v in out.data() {
            assert!((v - 4.2).abs() < 1e-12);
        }
    }

    #[test]
    fn point_at_center_copies_row() {
        let g = geom([2, 2, 2], 1.0);
        let p = g.center(1, 0, 1);
        let w = compute_weights(&[p], &g).unwrap();
        let mut vox = Tensor::zeros(&[3, 2, 2, 2]);
        let site = (1 * 2 + 0) * 2 + 1;
        for l in 0..3 {
            vox.data_mut()[l * 8 + site] = (l as f64 + 1.0) * 1.5;
        }
        let out = interpolate(&w, &vox).unwrap();
        assert_eq!(out.data(), &[1.5, 3.0, 4.5]);
    }

    #[test]
    fn matches_dense_matrix_oracle() {
        let g = geom([3, 4, 2], 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                [
                    rng.gen_range(0.0..2.1),
                    rng.gen_range(0.0..2.8),
                    rng.gen_range(0.0..1.4),
                ]
            })
            .collect();
        let w = compute_weights(&points, &g).unwrap();
        let l = 4;
        let cells = g.cell_count();
        let vox = Tensor::from_vec(
            &[l, 3, 4, 2],
            (0..l * cells).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();

        // Oracle: explicit N x M weight matrix, dense multiply.
        let n = points.len();
        let mut dense = vec![0.0f64; n * cells];
        for i in 0..n {
            for (site, wn) in w.stencil(i) {
                dense[i * cells + site] += wn;
            }
        }
        let out = interpolate(&w, &vox).unwrap();
        for i in 0..n {
            for li in 0..l {
                let mut expect = 0.0;
                for cell in 0..cells {
                    expect += dense[i * cells + cell] * vox.data()[li * cells + cell];
                }
                assert!((out.data()[i * l + li] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splat_unit_gradient_at_center() {
        let g = geom([2, 2, 2], 1.0);
        let p = g.center(0, 1, 0);
        let w = compute_weights(&[p], &g).unwrap();
        let grads = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let out = splat(&w, &grads).unwrap();
        let site = (0 * 2 + 1) * 2 + 0;
        for (idx, &v) in out.data().iter().enumerate() {
            if idx == site {
                assert!((v - 1.0).abs() < 1e-15);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn coincident_points_double_the_splat() {
        let g = geom([2, 2, 2], 1.0);
        let p = [0.8, 0.9, 1.0];
        let w1 = compute_weights(&[p], &g).unwrap();
        let w2 = compute_weights(&[p, p], &g).unwrap();
        let g1 = splat(&w1, &Tensor::from_vec(&[1, 2], vec![1.0, 0.5]).unwrap()).unwrap();
        let g2 = splat(&w2, &Tensor::from_vec(&[2, 2], vec![1.0, 0.5, 1.0, 0.5]).unwrap()).unwrap();
        assert!(g2.max_abs_diff(&g1.scaled(2.0)) < 1e-14);
    }

    #[test]
    fn linear_field_reproduced_at_interior_points() {
        // Trilinear interpolation is exact on linear functions.
        let g = geom([5, 5, 5], 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = |p: [f64; 3]| 0.7 * p[0] - 1.3 * p[1] + 2.1 * p[2] + 0.25;
        let cells = g.cell_count();
        let mut vox = Tensor::zeros(&[1, 5, 5, 5]);
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    vox.data_mut()[(i * 5 + j) * 5 + k] = field(g.center(i, j, k));
                }
            }
        }
        assert_eq!(cells, 125);
        let points: Vec<[f64; 3]> = (0..200)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.21..1.79)))
            .collect();
        let w = compute_weights(&points, &g).unwrap();
        let out = interpolate(&w, &vox).unwrap();
        for (i, p) in points.iter().enumerate() {
            assert!((out.data()[i] - field(*p)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn adjoint_identity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [
                rng.gen_range(2usize..6),
                rng.gen_range(2usize..6),
                rng.gen_range(2usize..6),
            ];
            let g = geom(dims, 0.5);
            let n = rng.gen_range(1usize..80);
            let l = rng.gen_range(1usize..5);
            let points: Vec<[f64; 3]> = (0..n)
                .map(|_| std::array::from_fn(|a| rng.gen_range(0.0..dims[a] as f64 * 0.5)))
                .collect();
            let w = compute_weights(&points, &g).unwrap();
            let cells = g.cell_count();
            let x = Tensor::from_vec(
                &[l, dims[0], dims[1], dims[2]],
                (0..l * cells).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let y = Tensor::from_vec(
                &[n, l],
                (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let lhs = interpolate(&w, &x).unwrap().dot(&y);
            let rhs = x.dot(&splat(&w, &y).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        }
    }
}
