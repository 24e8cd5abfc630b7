//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every executed operation together with whatever the
//! backward pass needs. Gradients are obtained by seeding a variable with an
//! upstream gradient and traversing the records in exact reverse execution
//! order; leaves accumulate (sum) everything that reaches them.
//!
//! The operator set is exactly what the voxel network requires: 3D
//! convolution, max pooling, ReLU, elementwise addition and a softmax over
//! the label axis. All arithmetic is f64 and every reduction runs in a fixed
//! order, so results do not depend on the rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Conv3d {
        input: VarId,
        weights: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
    },
    MaxPool3d {
        input: VarId,
        /// Per output element, the linear index of the winning input element.
        argmax: Vec<usize>,
    },
    Relu {
        input: VarId,
    },
    Add {
        lhs: VarId,
        rhs: VarId,
    },
    /// Softmax over axis 0 (the label axis of `(L, ...)` tensors).
    SoftmaxLabels {
        input: VarId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Registers an input or parameter; gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: VarId) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        value.debug_check_finite("tape op");
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// 3D cross-correlation of `(C_in, X, Y, Z)` with `(C_out, C_in, k, k, k)`
    /// weights plus a `(C_out,)` bias. Output spatial dims follow
    /// `floor((X + 2*pad - k) / stride) + 1`.
    pub fn conv3d(
        &mut self,
        input: VarId,
        weights: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let (value, _) = {
            let inp = self.value(input);
            let w = self.value(weights);
            let b = self.value(bias);
            (conv3d_forward(inp, w, b, stride, pad)?, ())
        };
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                weights,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Window-2 max pooling. `stride == 2` halves each spatial dim
    /// (destructive), `stride == 1` preserves shape with edge replication
    /// (non-destructive). Ties break toward the lowest linear index.
    pub fn maxpool3d(&mut self, input: VarId, stride: usize) -> Result<VarId> {
        let (value, argmax) = maxpool3d_forward(self.value(input), stride)?;
        Ok(self.push(value, Op::MaxPool3d { input, argmax }))
    }

    pub fn relu(&mut self, input: VarId) -> VarId {
        let value = self.value(input).map(|x| x.max(0.0));
        self.push(value, Op::Relu { input })
    }

    /// Elementwise sum of two equal-shaped tensors (residual skip).
    pub fn add(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        if !self.value(lhs).same_shape(self.value(rhs)) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(lhs).shape(),
                self.value(rhs).shape()
            )));
        }
        let mut value = self.value(lhs).clone();
        value.add_assign(self.value(rhs))?;
        Ok(self.push(value, Op::Add { lhs, rhs }))
    }

    /// Per-site distribution over the label axis (axis 0) of an `(L, ...)`
    /// tensor.
    pub fn softmax_labels(&mut self, input: VarId) -> Result<VarId> {
        let t = self.value(input);
        if t.rank() < 1 || t.shape()[0] < 2 {
            return Err(Error::Shape(format!(
                "softmax needs >= 2 labels on axis 0, got {:?}",
                t.shape()
            )));
        }
        let value = softmax_axis0(t);
        Ok(self.push(value, Op::SoftmaxLabels { input }))
    }

    /// Runs reverse-mode accumulation from `seed`, whose upstream gradient is
    /// `seed_grad`. Returns one gradient slot per recorded variable.
    pub fn backward(&self, seed: VarId, seed_grad: Tensor) -> Result<Gradients> {
        if !seed_grad.same_shape(self.value(seed)) {
            return Err(Error::Shape(format!(
                "seed gradient {:?} vs value {:?}",
                seed_grad.shape(),
                self.value(seed).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(seed_grad);

        for idx in (0..=seed.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                }
                Op::Conv3d {
                    input,
                    weights,
                    bias,
                    stride,
                    pad,
                } => {
                    let (gin, gw, gb) = conv3d_backward(
                        &gout,
                        self.value(*input),
                        self.value(*weights),
                        *stride,
                        *pad,
                    );
                    accumulate(&mut grads, *input, gin);
                    accumulate(&mut grads, *weights, gw);
                    accumulate(&mut grads, *bias, gb);
                    grads[idx] = Some(gout);
                }
                Op::MaxPool3d { input, argmax } => {
                    let mut gin = Tensor::zeros(self.value(*input).shape());
                    let gd = gin.data_mut();
                    for (out_idx, &src) in argmax.iter().enumerate() {
                        gd[src] += gout.data()[out_idx];
                    }
                    accumulate(&mut grads, *input, gin);
                    grads[idx] = Some(gout);
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let mut gin = gout.clone();
                    for (g, &v) in gin.data_mut().iter_mut().zip(x.data().iter()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *input, gin);
                    grads[idx] = Some(gout);
                }
                Op::Add { lhs, rhs } => {
                    accumulate(&mut grads, *lhs, gout.clone());
                    accumulate(&mut grads, *rhs, gout.clone());
                    grads[idx] = Some(gout);
                }
                Op::SoftmaxLabels { input } => {
                    let y = &self.nodes[idx].value;
                    let gin = softmax_axis0_backward(&gout, y);
                    accumulate(&mut grads, *input, gin);
                    grads[idx] = Some(gout);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: VarId, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes agree"),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zero tensor shape is unknown here, so
    /// variables the seed does not reach return `None`.
    pub fn wrt(&self, var: VarId) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn conv3d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (cin, xs, ys, zs) = dims4(input, "conv3d input")?;
    let ws = weights.shape();
    if ws.len() != 5 {
        return Err(Error::Shape(format!("conv3d weights rank {:?}", ws)));
    }
    let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
    if ws[3] != k || ws[4] != k {
        return Err(Error::Shape("conv3d kernel must be cubic".into()));
    }
    if k % 2 == 0 {
        return Err(Error::Shape("conv3d kernel size must be odd".into()));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::Shape("conv3d stride must be 1 or 2".into()));
    }
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv3d input channels {} vs weights {}",
            cin, wcin
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape("conv3d bias shape".into()));
    }
    if xs + 2 * pad < k || ys + 2 * pad < k || zs + 2 * pad < k {
        return Err(Error::Shape("conv3d input smaller than kernel".into()));
    }
    let xo = (xs + 2 * pad - k) / stride + 1;
    let yo = (ys + 2 * pad - k) / stride + 1;
    let zo = (zs + 2 * pad - k) / stride + 1;

    let mut out = Tensor::zeros(&[cout, xo, yo, zo]);
    let in_d = input.data();
    let w_d = weights.data();
    let b_d = bias.data();
    let chan = xo * yo * zo;

    out.data_mut()
        .par_chunks_mut(chan)
        .enumerate()
        .for_each(|(co, out_c)| {
            out_c.fill(b_d[co]);
            for ci in 0..cin {
                let in_c = &in_d[ci * xs * ys * zs..(ci + 1) * xs * ys * zs];
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let w = w_d[(((co * cin + ci) * k + kx) * k + ky) * k + kz];
                            for x in 0..xo {
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs as isize {
                                    continue;
                                }
                                for y in 0..yo {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= ys as isize {
                                        continue;
                                    }
                                    let orow = (x * yo + y) * zo;
                                    let irow = ((ix as usize) * ys + iy as usize) * zs;
                                    for z in 0..zo {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        if iz < 0 || iz >= zs as isize {
                                            continue;
                                        }
                                        out_c[orow + z] += w * in_c[irow + iz as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out.debug_check_finite("conv3d");
    Ok(out)
}

fn conv3d_backward(
    gout: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let [cin, xs, ys, zs] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let [cout, _, k] = [weights.shape()[0], weights.shape()[1], weights.shape()[2]];
    let [xo, yo, zo] = [gout.shape()[1], gout.shape()[2], gout.shape()[3]];
    let go = gout.data();
    let w_d = weights.data();
    let in_d = input.data();

    // Input gradient: scatter per input channel. Each rayon task owns one
    // input-channel chunk, so accumulation order is fixed.
    let mut gin = Tensor::zeros(input.shape());
    gin.data_mut()
        .par_chunks_mut(xs * ys * zs)
        .enumerate()
        .for_each(|(ci, gin_c)| {
            for co in 0..cout {
                let go_c = &go[co * xo * yo * zo..(co + 1) * xo * yo * zo];
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let w = w_d[(((co * cin + ci) * k + kx) * k + ky) * k + kz];
                            for x in 0..xo {
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs as isize {
                                    continue;
                                }
                                for y in 0..yo {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= ys as isize {
                                        continue;
                                    }
                                    let orow = (x * yo + y) * zo;
                                    let irow = ((ix as usize) * ys + iy as usize) * zs;
                                    for z in 0..zo {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        if iz < 0 || iz >= zs as isize {
                                            continue;
                                        }
                                        gin_c[irow + iz as usize] += w * go_c[orow + z];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    // Weight gradient: one rayon task per output channel block.
    let mut gw = Tensor::zeros(weights.shape());
    gw.data_mut()
        .par_chunks_mut(cin * k * k * k)
        .enumerate()
        .for_each(|(co, gw_c)| {
            let go_c = &go[co * xo * yo * zo..(co + 1) * xo * yo * zo];
            for ci in 0..cin {
                let in_c = &in_d[ci * xs * ys * zs..(ci + 1) * xs * ys * zs];
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let mut acc = 0.0;
                            for x in 0..xo {
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs as isize {
                                    continue;
                                }
                                for y in 0..yo {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= ys as isize {
                                        continue;
                                    }
                                    let orow = (x * yo + y) * zo;
                                    let irow = ((ix as usize) * ys + iy as usize) * zs;
                                    for z in 0..zo {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        if iz < 0 || iz >= zs as isize {
                                            continue;
                                        }
                                        acc += go_c[orow + z] * in_c[irow + iz as usize];
                                    }
                                }
                            }
                            gw_c[((ci * k + kx) * k + ky) * k + kz] = acc;
                        }
                    }
                }
            }
        });

    let mut gb = Tensor::zeros(&[cout]);
    for co in 0..cout {
        gb.data_mut()[co] = go[co * xo * yo * zo..(co + 1) * xo * yo * zo].iter().sum();
    }
    (gin, gw, gb)
}

fn maxpool3d_forward(input: &Tensor, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, xs, ys, zs) = dims4(input, "maxpool3d input")?;
    let (xo, yo, zo) = match stride {
        2 => {
            if xs % 2 != 0 || ys % 2 != 0 || zs % 2 != 0 {
                return Err(Error::Shape(format!(
                    "maxpool3d stride 2 needs even dims, got ({xs},{ys},{zs})"
                )));
            }
            (xs / 2, ys / 2, zs / 2)
        }
        1 => (xs, ys, zs),
        _ => return Err(Error::Shape("maxpool3d stride must be 1 or 2".into())),
    };
    let mut out = Tensor::zeros(&[c, xo, yo, zo]);
    let mut argmax = vec![0usize; out.len()];
    let in_d = input.data();
    let out_d = out.data_mut();
    let mut oi = 0;
    for ch in 0..c {
        let base = ch * xs * ys * zs;
        for x in 0..xo {
            for y in 0..yo {
                for z in 0..zo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dx in 0..2 {
                        // Stride 1 replicates the edge by clamping.
                        let ix = (x * stride + dx).min(xs - 1);
                        for dy in 0..2 {
                            let iy = (y * stride + dy).min(ys - 1);
                            for dz in 0..2 {
                                let iz = (z * stride + dz).min(zs - 1);
                                let idx = base + (ix * ys + iy) * zs + iz;
                                let v = in_d[idx];
                                if v > best || (v == best && idx < best_idx) {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out_d[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("{what}: expected rank 4, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Softmax along axis 0 of an `(L, ...)` tensor.
pub fn softmax_axis0(t: &Tensor) -> Tensor {
    let l = t.shape()[0];
    let sites = t.len() / l;
    let mut out = Tensor::zeros(t.shape());
    let src = t.data();
    let dst = out.data_mut();
    for s in 0..sites {
        let mut max = f64::NEG_INFINITY;
        for li in 0..l {
            max = max.max(src[li * sites + s]);
        }
        let mut sum = 0.0;
        for li in 0..l {
            let e = (src[li * sites + s] - max).exp();
            dst[li * sites + s] = e;
            sum += e;
        }
        for li in 0..l {
            dst[li * sites + s] /= sum;
        }
    }
    out
}

fn softmax_axis0_backward(gout: &Tensor, y: &Tensor) -> Tensor {
    let l = y.shape()[0];
    let sites = y.len() / l;
    let mut gin = Tensor::zeros(y.shape());
    let g = gout.data();
    let yd = y.data();
    let gi = gin.data_mut();
    for s in 0..sites {
        let mut dot = 0.0;
        for li in 0..l {
            dot += g[li * sites + s] * yd[li * sites + s];
        }
        for li in 0..l {
            gi[li * sites + s] = yd[li * sites + s] * (g[li * sites + s] - dot);
        }
    }
    gin
}

/// One classical-momentum SGD update over a flat parameter slice:
/// `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

/// Momentum state for a fixed set of parameter tensors.
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, param_sizes: &[usize]) -> Self {
        SgdMomentum {
            momentum,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_slot(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        sgd_step(params, grads, &mut self.velocity[slot], lr, self.momentum);
    }
}
