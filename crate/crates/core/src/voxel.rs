//! Regular metric voxel grids with occupancy / RGB / intensity channels.

use crate::cloud::LabeledPointCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default per-axis dimension cap (a 100x100x100 input volume at 5 cm).
pub const DEFAULT_DIMS_CAP: usize = 100;

/// Geometry of a regular grid: minimum corner, cubic cell size, cell counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeom {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridGeom {
    /// Half-open cell index of `p`, or an error when `p` lies outside the
    /// grid extent.
    pub fn locate(&self, p: [f64; 3]) -> Result<(usize, usize, usize)> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.voxel_size;
            if rel < 0.0 || rel >= self.dims[a] as f64 {
                return Err(Error::InvalidInput(format!(
                    "point {p:?} outside grid extent on axis {a}"
                )));
            }
            idx[a] = rel.floor() as usize;
        }
        Ok((idx[0], idx[1], idx[2]))
    }

    /// Center of cell `(i, j, k)`.
    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (j as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (k as f64 + 0.5) * self.voxel_size,
        ]
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Geometry of the same physical box after `factor`x downsampling.
    /// Dims must divide evenly.
    pub fn coarsened(&self, factor: usize) -> Result<GridGeom> {
        if self.dims.iter().any(|d| d % factor != 0) {
            return Err(Error::Shape(format!(
                "dims {:?} not divisible by {}",
                self.dims, factor
            )));
        }
        Ok(GridGeom {
            origin: self.origin,
            voxel_size: self.voxel_size * factor as f64,
            dims: [
                self.dims[0] / factor,
                self.dims[1] / factor,
                self.dims[2] / factor,
            ],
        })
    }
}

/// Which feature channels a grid carries beyond occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub rgb: bool,
    pub intensity: bool,
}

impl ChannelLayout {
    pub fn count(&self) -> usize {
        1 + if self.rgb { 3 } else { 0 } + if self.intensity { 1 } else { 0 }
    }
}

/// Training statistics used to normalize the sensor intensity channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityStats {
    pub mean: f64,
    pub range: f64,
}

/// A voxelized crop: channel layout `[occupancy, R, G, B, intensity]` with
/// the trailing channels optional. Occupancy is binary, RGB is the mean
/// color of contained points normalized to [0, 1], intensity is mean-centered
/// and range-normalized. Empty voxels are all-zero.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub geom: GridGeom,
    pub layout: ChannelLayout,
    /// Shape `(C, nx, ny, nz)`.
    pub channels: Tensor,
}

/// Voxelizes a crop at resolution `v` meters. The grid origin is the crop's
/// AABB minimum; dims are `ceil(extent / v)` per axis (at least 1), capped at
/// `dims_cap`.
pub fn build_grid(
    crop: &LabeledPointCloud,
    v: f64,
    stats: Option<&IntensityStats>,
    dims_cap: usize,
) -> Result<VoxelGrid> {
    if crop.is_empty() {
        return Err(Error::InvalidInput("cannot voxelize an empty crop".into()));
    }
    if v <= 0.0 {
        return Err(Error::InvalidInput(format!("voxel size {v} must be > 0")));
    }
    let has_rgb = crop.points[0].color.is_some();
    let has_intensity = crop.points[0].intensity.is_some();
    for p in &crop.points {
        if p.color.is_some() != has_rgb || p.intensity.is_some() != has_intensity {
            return Err(Error::InvalidInput(
                "mixed presence of color/intensity across points".into(),
            ));
        }
    }
    if has_intensity && stats.is_none() {
        return Err(Error::InvalidInput(
            "intensity channel present but no IntensityStats given".into(),
        ));
    }
    if let Some(s) = stats {
        if s.range <= 0.0 {
            return Err(Error::InvalidInput("intensity range must be > 0".into()));
        }
    }

    let extent = crop.bounds.extent();
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let d = (extent[a] / v).ceil().max(1.0) as usize;
        if d > dims_cap {
            return Err(Error::InvalidInput(format!(
                "grid needs {d} voxels on axis {a}, cap is {dims_cap}"
            )));
        }
        dims[a] = d;
    }
    let geom = GridGeom {
        origin: crop.bounds.min,
        voxel_size: v,
        dims,
    };

    let cells = geom.cell_count();
    let mut count = vec![0u32; cells];
    let mut color_sum = if has_rgb { vec![0.0f64; cells * 3] } else { Vec::new() };
    let mut intensity_sum = if has_intensity { vec![0.0f64; cells] } else { Vec::new() };

    for p in &crop.points {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = (p.position[a] - geom.origin[a]) / v;
            // Points on the far AABB face land in the last cell.
            idx[a] = (rel.floor() as usize).min(dims[a] - 1);
        }
        let cell = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
        count[cell] += 1;
        if let Some(c) = p.color {
            for ch in 0..3 {
                color_sum[cell * 3 + ch] += c[ch];
            }
        }
        if let Some(s) = p.intensity {
            intensity_sum[cell] += s;
        }
    }

    let layout = ChannelLayout {
        rgb: has_rgb,
        intensity: has_intensity,
    };
    let mut channels = Tensor::zeros(&[layout.count(), dims[0], dims[1], dims[2]]);
    let data = channels.data_mut();
    for cell in 0..cells {
        let n = count[cell];
        if n == 0 {
            continue;
        }
        data[cell] = 1.0;
        let mut ch = 1;
        if has_rgb {
            for c in 0..3 {
                data[(ch + c) * cells + cell] = color_sum[cell * 3 + c] / (n as f64 * 255.0);
            }
            ch += 3;
        }
        if has_intensity {
            let s = stats.expect("checked above");
            data[ch * cells + cell] = (intensity_sum[cell] / n as f64 - s.mean) / s.range;
        }
    }
    channels.debug_check_finite("build_grid");
    Ok(VoxelGrid {
        geom,
        layout,
        channels,
    })
}

impl VoxelGrid {
    /// Zero-pads the grid so each spatial dim is a multiple of `m` (pooling
    /// then divides evenly). Origin and existing cells are unchanged.
    pub fn pad_to_multiple(&self, m: usize) -> VoxelGrid {
        let dims = self.geom.dims;
        let padded = [next_multiple(dims[0], m), next_multiple(dims[1], m), next_multiple(dims[2], m)];
        if padded == dims {
            return self.clone();
        }
        let c = self.layout.count();
        let mut channels = Tensor::zeros(&[c, padded[0], padded[1], padded[2]]);
        let src = self.channels.data();
        let dst = channels.data_mut();
        for ch in 0..c {
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    let src_row = ((ch * dims[0] + x) * dims[1] + y) * dims[2];
                    let dst_row = ((ch * padded[0] + x) * padded[1] + y) * padded[2];
                    dst[dst_row..dst_row + dims[2]]
                        .copy_from_slice(&src[src_row..src_row + dims[2]]);
                }
            }
        }
        VoxelGrid {
            geom: GridGeom {
                origin: self.geom.origin,
                voxel_size: self.geom.voxel_size,
                dims: padded,
            },
            layout: self.layout,
            channels,
        }
    }

    pub fn occupancy(&self, i: usize, j: usize, k: usize) -> f64 {
        let d = self.geom.dims;
        self.channels.data()[(i * d[1] + j) * d[2] + k]
    }
}

fn next_multiple(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}
