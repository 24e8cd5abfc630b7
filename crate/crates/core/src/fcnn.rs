//! The voxel network: per-voxel class logits at `D`x spatial downsampling.
//!
//! Layer sequence: a 3x3x3 stem convolution, `log2(D)` destructive (stride-2)
//! max pools, a stack of residual blocks (conv-relu-conv plus skip, ReLU
//! after the add), two non-destructive (stride-1, edge-replicated) max pools,
//! and a 1x1x1 convolution producing the label logits. Fully convolutional:
//! any input whose padded dims divide `D` runs through the same weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::voxel::{GridGeom, VoxelGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct FcnnConfig {
    /// Input feature channels (occupancy, optional RGB, optional intensity).
    pub in_channels: usize,
    pub label_count: usize,
    /// Channel widths: stem output plus one entry per residual block.
    pub widths: Vec<usize>,
    /// Total spatial downsampling; a power of two realized by stride-2 pools.
    pub downsample_factor: usize,
    pub residual_blocks: usize,
}

impl FcnnConfig {
    pub fn new(in_channels: usize, label_count: usize) -> Self {
        FcnnConfig {
            in_channels,
            label_count,
            widths: vec![16, 32, 32, 32],
            downsample_factor: 4,
            residual_blocks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.in_channels) {
            return Err(Error::Config(format!(
                "in_channels {} outside 1..=5",
                self.in_channels
            )));
        }
        if self.label_count < 2 {
            return Err(Error::Config("label_count must be >= 2".into()));
        }
        let d = self.downsample_factor;
        if d == 0 || d & (d - 1) != 0 {
            return Err(Error::Config(format!(
                "downsample_factor {d} is not a power of two"
            )));
        }
        if self.widths.len() != self.residual_blocks + 1 {
            return Err(Error::Config(format!(
                "widths has {} entries, need residual_blocks + 1 = {}",
                self.widths.len(),
                self.residual_blocks + 1
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }

    fn destructive_pools(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

/// One parameter tensor with a stable name (checkpoint key).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// The network: configuration plus parameters in a fixed order.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: FcnnConfig,
    pub params: Vec<Param>,
}

/// Per-voxel logits on the coarse grid.
#[derive(Debug, Clone)]
pub struct VoxelScores {
    /// Shape `(L, nx/D, ny/D, nz/D)`.
    pub logits: Tensor,
    /// Geometry of the coarse grid (origin, voxel size `D * V`).
    pub geom: GridGeom,
}

/// Forward pass bound to a tape: output variable plus the parameter leaves
/// in `Network::params` order.
pub struct BoundNet {
    pub logits: VarId,
    pub param_vars: Vec<VarId>,
}

impl Network {
    /// Builds a network with He-style initialization (uniform, zero mean,
    /// scaled by fan-in) and zero biases. Deterministic in `seed`.
    pub fn build(config: FcnnConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng| {
            let fan_in = (cin * k * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let n = cout * cin * k * k * k;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                value: Tensor::from_vec(&[cout, cin, k, k, k], data).expect("sized above"),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[cout]),
            });
        };

        conv("stem", config.widths[0], config.in_channels, 3, &mut rng);
        let mut prev = config.widths[0];
        for b in 0..config.residual_blocks {
            let w = config.widths[b + 1];
            conv(&format!("block{b}.conv1"), w, prev, 3, &mut rng);
            conv(&format!("block{b}.conv2"), w, w, 3, &mut rng);
            if prev != w {
                // Channel change: 1x1x1 projection on the skip path.
                conv(&format!("block{b}.proj"), w, prev, 1, &mut rng);
            }
            prev = w;
        }
        conv("head", config.label_count, prev, 1, &mut rng);
        Ok(Network { config, params })
    }

    /// Records the forward pass on `tape`. The grid's dims must divide the
    /// downsampling factor (the voxelizer pads).
    pub fn forward(&self, tape: &mut Tape, grid: &VoxelGrid) -> Result<BoundNet> {
        let dims = grid.geom.dims;
        let d = self.config.downsample_factor;
        if dims.iter().any(|&n| n % d != 0) {
            return Err(Error::Shape(format!(
                "grid dims {dims:?} not divisible by downsample factor {d}"
            )));
        }
        if grid.channels.shape()[0] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "grid has {} channels, network expects {}",
                grid.channels.shape()[0],
                self.config.in_channels
            )));
        }
        let param_vars: Vec<VarId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let mut slot = 0usize;
        let mut next_pair = || {
            let pair = (param_vars[slot], param_vars[slot + 1]);
            slot += 2;
            pair
        };

        let x = tape.leaf(grid.channels.clone());
        let (w, b) = next_pair();
        let mut h = tape.conv3d(x, w, b, 1, 1)?;
        h = tape.relu(h);
        for _ in 0..self.config.destructive_pools() {
            h = tape.maxpool3d(h, 2)?;
        }
        let mut prev = self.config.widths[0];
        for bidx in 0..self.config.residual_blocks {
            let width = self.config.widths[bidx + 1];
            let (w1, b1) = next_pair();
            let (w2, b2) = next_pair();
            let c1 = tape.conv3d(h, w1, b1, 1, 1)?;
            let r1 = tape.relu(c1);
            let c2 = tape.conv3d(r1, w2, b2, 1, 1)?;
            let skip = if prev != width {
                let (wp, bp) = next_pair();
                tape.conv3d(h, wp, bp, 1, 0)?
            } else {
                h
            };
            let sum = tape.add(c2, skip)?;
            h = tape.relu(sum);
            prev = width;
        }
        h = tape.maxpool3d(h, 1)?;
        h = tape.maxpool3d(h, 1)?;
        let (wh, bh) = next_pair();
        let logits = tape.conv3d(h, wh, bh, 1, 0)?;
        Ok(BoundNet { logits, param_vars })
    }

    /// Inference convenience: runs a private tape and returns the coarse
    /// logits with their grid geometry.
    pub fn infer(&self, grid: &VoxelGrid) -> Result<VoxelScores> {
        let mut tape = Tape::new();
        let bound = self.forward(&mut tape, grid)?;
        Ok(VoxelScores {
            logits: tape.value(bound.logits).clone(),
            geom: grid.geom.coarsened(self.config.downsample_factor)?,
        })
    }

    /// Checkpoint entries in parameter order.
    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Restores parameters by name, validating shapes.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for param in &mut self.params {
            let found = entries
                .iter()
                .find(|(name, _)| *name == param.name)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("checkpoint missing tensor '{}'", param.name))
                })?;
            if found.1.shape() != param.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                    param.name,
                    found.1.shape(),
                    param.value.shape()
                )));
            }
            param.value = found.1.clone();
        }
        Ok(())
    }
}
