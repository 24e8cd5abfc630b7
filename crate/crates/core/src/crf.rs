//! Fully connected CRF over points with Gaussian edge potentials.
//!
//! Energy: `E(x) = sum_i psi_u(x_i) + sum_{i<j} psi_p(x_i, x_j)` with
//! pairwise potentials built from a spatial kernel (positions over
//! theta_gamma) and a bilateral kernel (positions over theta_alpha, colors
//! over theta_beta), both weighted by a label compatibility matrix.
//!
//! Inference is parallel mean field unrolled for a fixed iteration count:
//! each step filters the current marginals with both kernels, applies the
//! kernel weights and the compatibility transform, adds the unary and
//! renormalizes with a softmax. All intermediates are retained so the
//! unrolled recurrence can be differentiated in reverse for joint training:
//! gradients flow to the unaries (and onward through the interpolation
//! splat into the network) and to the learnable CRF parameters `w_s`, `w_b`
//! and the compatibility matrix. The bandwidths are never learned.
//!
//! Unary sign convention: `psi_u(x_i = l) = -logit`, so with zero kernel
//! weights inference reduces to a softmax over the network's logits.

use crate::error::{Error, Result};
use crate::lattice::PermutohedralLattice;
use crate::tensor::Tensor;

use rayon::prelude::*;

/// Pairwise instances above this size are rejected on the brute-force paths.
pub const BRUTEFORCE_POINT_CAP: usize = 5000;

/// CRF parameters. Only the kernel weights and the compatibility matrix are
/// learnable; the bandwidths stay fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// Spatial kernel weight `w_s`.
    pub w_spatial: f64,
    /// Bilateral kernel weight `w_b`.
    pub w_bilateral: f64,
    /// Label compatibility matrix, row-major `(L, L)`; `compat[l][l']`
    /// scales the penalty label `l` receives from mass on `l'`.
    pub compat: Tensor,
    /// Bilateral position bandwidth, meters.
    pub theta_alpha: f64,
    /// Bilateral color bandwidth, color units.
    pub theta_beta: f64,
    /// Spatial kernel bandwidth, meters.
    pub theta_gamma: f64,
}

impl CrfParams {
    /// Manual initialization: spatial weight 3, bilateral weight 5, Potts
    /// compatibility (1 off-diagonal, 0 diagonal).
    pub fn manual_init(
        label_count: usize,
        theta_alpha: f64,
        theta_beta: f64,
        theta_gamma: f64,
    ) -> Result<Self> {
        if theta_alpha <= 0.0 || theta_beta <= 0.0 || theta_gamma <= 0.0 {
            return Err(Error::InvalidInput(
                "kernel bandwidths must be positive".into(),
            ));
        }
        Ok(CrfParams {
            w_spatial: 3.0,
            w_bilateral: 5.0,
            compat: potts(label_count),
            theta_alpha,
            theta_beta,
            theta_gamma,
        })
    }

    pub fn label_count(&self) -> usize {
        self.compat.shape()[0]
    }
}

/// Potts compatibility: penalize differing labels only.
pub fn potts(label_count: usize) -> Tensor {
    let mut t = Tensor::zeros(&[label_count, label_count]);
    for l in 0..label_count {
        for lp in 0..label_count {
            if l != lp {
                t.data_mut()[l * label_count + lp] = 1.0;
            }
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterBackend {
    BruteForce,
    Permutohedral,
}

/// Kernel feature vectors, already divided by their bandwidths.
pub struct CrfFeatures {
    n: usize,
    /// `n x 3`: positions / theta_gamma.
    spatial: Vec<f64>,
    /// `n x 6`: positions / theta_alpha then colors / theta_beta; absent
    /// when the cloud has no color ("spatial kernel only").
    bilateral: Option<Vec<f64>>,
}

impl CrfFeatures {
    pub fn prepare(
        points: &[[f64; 3]],
        colors: Option<&[[f64; 3]]>,
        params: &CrfParams,
    ) -> Result<CrfFeatures> {
        let n = points.len();
        if let Some(c) = colors {
            if c.len() != n {
                return Err(Error::InvalidInput(format!(
                    "colors length {} != points length {}",
                    c.len(),
                    n
                )));
            }
        }
        let mut spatial = Vec::with_capacity(n * 3);
        for p in points {
            for a in 0..3 {
                spatial.push(p[a] / params.theta_gamma);
            }
        }
        let bilateral = colors.map(|cols| {
            let mut f = Vec::with_capacity(n * 6);
            for (p, c) in points.iter().zip(cols.iter()) {
                for a in 0..3 {
                    f.push(p[a] / params.theta_alpha);
                }
                for a in 0..3 {
                    f.push(c[a] / params.theta_beta);
                }
            }
            f
        });
        Ok(CrfFeatures {
            n,
            spatial,
            bilateral,
        })
    }

    pub fn point_count(&self) -> usize {
        self.n
    }

    pub fn has_bilateral(&self) -> bool {
        self.bilateral.is_some()
    }
}

/// A Gaussian filter bound to one feature set; reused across mean-field
/// iterations and the backward pass.
enum FilterImpl {
    Brute { features: Vec<f64>, d: usize },
    Lattice(PermutohedralLattice),
}

pub struct GaussianFilter {
    n: usize,
    inner: FilterImpl,
}

impl GaussianFilter {
    pub fn build(features: &[f64], n: usize, d: usize, backend: FilterBackend) -> Result<Self> {
        if features.len() != n * d {
            return Err(Error::Shape(format!(
                "features length {} != n*d = {}",
                features.len(),
                n * d
            )));
        }
        let inner = match backend {
            FilterBackend::BruteForce => {
                if n > BRUTEFORCE_POINT_CAP {
                    return Err(Error::InvalidInput(format!(
                        "brute-force filter capped at {BRUTEFORCE_POINT_CAP} points, got {n}"
                    )));
                }
                FilterImpl::Brute {
                    features: features.to_vec(),
                    d,
                }
            }
            FilterBackend::Permutohedral => {
                FilterImpl::Lattice(PermutohedralLattice::new(features, n, d)?)
            }
        };
        Ok(GaussianFilter { n, inner })
    }

    /// `out_i = sum_{j != i} exp(-||f_i - f_j||^2 / 2) v_j` over `(N, L)`
    /// values. The lattice backend filters with the self term included and
    /// subtracts `exp(0) * v_i` afterwards.
    pub fn apply(&self, values: &Tensor) -> Result<Tensor> {
        self.apply_inner(values, false)
    }

    /// Transpose of [`GaussianFilter::apply`] (blur passes reversed on the
    /// lattice backend; the kernel itself is symmetric).
    pub fn apply_adjoint(&self, values: &Tensor) -> Result<Tensor> {
        self.apply_inner(values, true)
    }

    fn apply_inner(&self, values: &Tensor, reverse: bool) -> Result<Tensor> {
        let shape = values.shape();
        if shape.len() != 2 || shape[0] != self.n {
            return Err(Error::Shape(format!(
                "values {:?} vs {} points",
                shape, self.n
            )));
        }
        let c = shape[1];
        let v = values.data();
        let out_data = match &self.inner {
            FilterImpl::Brute { features, d } => {
                let n = self.n;
                let d = *d;
                let mut out = vec![0.0f64; n * c];
                out.par_chunks_mut(c).enumerate().for_each(|(i, row)| {
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let mut dist2 = 0.0;
                        for a in 0..d {
                            let diff = features[i * d + a] - features[j * d + a];
                            dist2 += diff * diff;
                        }
                        let k = (-0.5 * dist2).exp();
                        for ch in 0..c {
                            row[ch] += k * v[j * c + ch];
                        }
                    }
                });
                out
            }
            FilterImpl::Lattice(lattice) => {
                let mut out = lattice.filter(v, c, reverse);
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o -= x;
                }
                out
            }
        };
        Tensor::from_vec(shape, out_data)
    }
}

/// One-shot filtering: builds the backend for `features` `(N, d)` and
/// applies it to `values` `(N, L)`, excluding each point's own contribution.
pub fn gaussian_filter(
    values: &Tensor,
    features: &Tensor,
    backend: FilterBackend,
) -> Result<Tensor> {
    let fs = features.shape();
    if fs.len() != 2 {
        return Err(Error::Shape("features must be (N, d)".into()));
    }
    let filter = GaussianFilter::build(features.data(), fs[0], fs[1], backend)?;
    filter.apply(values)
}

/// Both kernels of one CRF instance.
pub struct Filters {
    pub spatial: GaussianFilter,
    pub bilateral: Option<GaussianFilter>,
}

impl Filters {
    pub fn build(features: &CrfFeatures, backend: FilterBackend) -> Result<Filters> {
        let spatial = GaussianFilter::build(&features.spatial, features.n, 3, backend)?;
        let bilateral = features
            .bilateral
            .as_ref()
            .map(|f| GaussianFilter::build(f, features.n, 6, backend))
            .transpose()?;
        Ok(Filters { spatial, bilateral })
    }
}

/// Per-point label marginals; rows are nonnegative and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField(pub Tensor);

impl MarginalField {
    pub fn point_count(&self) -> usize {
        self.0.shape()[0]
    }

    /// Argmax label per point.
    pub fn hard_labels(&self) -> Vec<usize> {
        let l = self.0.shape()[1];
        self.0
            .data()
            .chunks(l)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite marginals"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Row-wise softmax of an `(N, L)` tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let l = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(l) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of [`softmax_rows`]: given upstream gradient and the softmax
/// output, returns the gradient with respect to the logits.
fn softmax_rows_backward(gout: &Tensor, y: &Tensor) -> Tensor {
    let l = y.shape()[1];
    let mut gin = Tensor::zeros(y.shape());
    for ((gi, go), yo) in gin
        .data_mut()
        .chunks_mut(l)
        .zip(gout.data().chunks(l))
        .zip(y.data().chunks(l))
    {
        let dot: f64 = go.iter().zip(yo.iter()).map(|(a, b)| a * b).sum();
        for li in 0..l {
            gi[li] = yo[li] * (go[li] - dot);
        }
    }
    gin
}

/// Messages of one mean-field step.
struct Messages {
    /// Spatial kernel output `K_s Q`, `(N, L)`.
    spatial: Tensor,
    /// Bilateral kernel output `K_b Q`, when colors exist.
    bilateral: Option<Tensor>,
}

/// `combined = w_s * spatial + w_b * bilateral`, then the compatibility
/// transform `pair[i][l] = sum_l' compat[l][l'] * combined[i][l']`.
fn pairwise_term(msgs: &Messages, params: &CrfParams) -> Tensor {
    let (n, l) = (msgs.spatial.shape()[0], msgs.spatial.shape()[1]);
    let mut combined = msgs.spatial.scaled(params.w_spatial);
    if let Some(b) = &msgs.bilateral {
        for (c, x) in combined.data_mut().iter_mut().zip(b.data().iter()) {
            *c += params.w_bilateral * x;
        }
    }
    let mut pair = Tensor::zeros(&[n, l]);
    let mu = params.compat.data();
    let cd = combined.data();
    let pd = pair.data_mut();
    for i in 0..n {
        for li in 0..l {
            let mut acc = 0.0;
            for lp in 0..l {
                acc += mu[li * l + lp] * cd[i * l + lp];
            }
            pd[i * l + li] = acc;
        }
    }
    pair
}

fn step_messages(q: &Tensor, filters: &Filters) -> Result<Messages> {
    Ok(Messages {
        spatial: filters.spatial.apply(q)?,
        bilateral: filters
            .bilateral
            .as_ref()
            .map(|f| f.apply(q))
            .transpose()?,
    })
}

/// One parallel mean-field update: message passing with both kernels,
/// kernel weighting, compatibility transform, unary addition,
/// exponentiation and per-point normalization.
pub fn meanfield_step(
    q: &MarginalField,
    unary: &Tensor,
    params: &CrfParams,
    filters: &Filters,
) -> Result<MarginalField> {
    let msgs = step_messages(&q.0, filters)?;
    let pair = pairwise_term(&msgs, params);
    let mut z = unary.scaled(-1.0);
    for (zv, pv) in z.data_mut().iter_mut().zip(pair.data().iter()) {
        *zv -= pv;
    }
    Ok(MarginalField(softmax_rows(&z)))
}

/// Saved state of one unrolled iteration.
struct IterRecord {
    messages: Messages,
    /// Softmax output of this iteration.
    q_out: Tensor,
}

/// Forward record of an unrolled inference run, retained for the backward
/// pass.
pub struct MeanFieldRun {
    q0: Tensor,
    iters: Vec<IterRecord>,
}

impl MeanFieldRun {
    pub fn final_q(&self) -> &Tensor {
        match self.iters.last() {
            Some(it) => &it.q_out,
            None => &self.q0,
        }
    }
}

/// Unrolled mean-field inference: `Q0 = softmax(-psi_u)`, then `iterations`
/// update steps. Returns the final marginals and the full record needed by
/// [`crf_backward`].
pub fn crf_forward(
    unary: &Tensor,
    filters: &Filters,
    params: &CrfParams,
    iterations: usize,
) -> Result<(MarginalField, MeanFieldRun)> {
    if iterations == 0 {
        return Err(Error::InvalidInput("iterations must be >= 1".into()));
    }
    let shape = unary.shape();
    if shape.len() != 2 || shape[1] != params.label_count() {
        return Err(Error::Shape(format!(
            "unary {:?} vs {} labels",
            shape,
            params.label_count()
        )));
    }
    let q0 = softmax_rows(&unary.scaled(-1.0));
    let mut run = MeanFieldRun {
        q0: q0.clone(),
        iters: Vec::with_capacity(iterations),
    };
    let mut q = q0;
    for _ in 0..iterations {
        let messages = step_messages(&q, filters)?;
        let pair = pairwise_term(&messages, params);
        let mut z = unary.scaled(-1.0);
        for (zv, pv) in z.data_mut().iter_mut().zip(pair.data().iter()) {
            *zv -= pv;
        }
        let q_out = softmax_rows(&z);
        q_out.debug_check_finite("meanfield step");
        run.iters.push(IterRecord {
            messages,
            q_out: q_out.clone(),
        });
        q = q_out;
    }
    Ok((MarginalField(q), run))
}

/// Convenience wrapper owning feature preparation and filter construction.
pub fn crf_infer(
    unary: &Tensor,
    points: &[[f64; 3]],
    colors: Option<&[[f64; 3]]>,
    params: &CrfParams,
    iterations: usize,
    backend: FilterBackend,
) -> Result<(MarginalField, MeanFieldRun)> {
    let features = CrfFeatures::prepare(points, colors, params)?;
    let filters = Filters::build(&features, backend)?;
    crf_forward(unary, &filters, params, iterations)
}

/// Gradients produced by [`crf_backward`].
#[derive(Debug, Clone)]
pub struct CrfGrads {
    /// Gradient with respect to the unary potentials `psi_u`, `(N, L)`.
    pub d_unary: Tensor,
    pub d_w_spatial: f64,
    pub d_w_bilateral: f64,
    pub d_compat: Tensor,
}

/// Reverse-mode pass through the unrolled iterations. `d_final_q` is the
/// upstream gradient with respect to the final marginals.
pub fn crf_backward(
    run: &MeanFieldRun,
    d_final_q: &Tensor,
    params: &CrfParams,
    filters: &Filters,
) -> Result<CrfGrads> {
    let l = params.label_count();
    let n = run.q0.shape()[0];
    let mu = params.compat.data();

    // Gradient with respect to U = -psi_u (accumulated across iterations).
    let mut d_u = Tensor::zeros(&[n, l]);
    let mut d_q = d_final_q.clone();
    let mut d_w_s = 0.0;
    let mut d_w_b = 0.0;
    let mut d_mu = Tensor::zeros(&[l, l]);

    for (t, iter) in run.iters.iter().enumerate().rev() {
        // z = U - pair; q_out = softmax_rows(z).
        let dz = softmax_rows_backward(&d_q, &iter.q_out);
        d_u.add_assign(&dz)?;
        // dpair = -dz.
        let s = iter.messages.spatial.data();
        let b = iter.messages.bilateral.as_ref().map(|t| t.data());

        // Combined message M = w_s*S + w_b*B; pair = M mu^T (per point).
        // d_mu[l][l'] += sum_i dpair[i][l] * M[i][l'];
        // dM[i][l'] = sum_l mu[l][l'] * dpair[i][l].
        let mut d_m = Tensor::zeros(&[n, l]);
        {
            let dzd = dz.data();
            let dmd = d_m.data_mut();
            let dmu = d_mu.data_mut();
            for i in 0..n {
                for li in 0..l {
                    let dpair = -dzd[i * l + li];
                    for lp in 0..l {
                        let m_val = params.w_spatial * s[i * l + lp]
                            + b.map_or(0.0, |bd| params.w_bilateral * bd[i * l + lp]);
                        dmu[li * l + lp] += dpair * m_val;
                        dmd[i * l + lp] += mu[li * l + lp] * dpair;
                    }
                }
            }
        }

        // Kernel weights are scalars multiplying whole messages.
        d_w_s += d_m.dot(&iter.messages.spatial);
        if let Some(bt) = &iter.messages.bilateral {
            d_w_b += d_m.dot(bt);
        }

        // dQ_in = K_s^T (w_s dM) + K_b^T (w_b dM).
        let mut d_q_in = filters
            .spatial
            .apply_adjoint(&d_m.scaled(params.w_spatial))?;
        if let Some(bf) = &filters.bilateral {
            d_q_in.add_assign(&bf.apply_adjoint(&d_m.scaled(params.w_bilateral))?)?;
        }
        let _ = t;
        d_q = d_q_in;
    }

    // Q0 = softmax_rows(U).
    d_u.add_assign(&softmax_rows_backward(&d_q, &run.q0))?;

    Ok(CrfGrads {
        d_unary: d_u.scaled(-1.0),
        d_w_spatial: d_w_s,
        d_w_bilateral: d_w_b,
        d_compat: d_mu,
    })
}

/// Full CRF energy of a labeling: unary sum plus pairwise terms over
/// unordered pairs. Diagnostic-only, O(N^2), capped at
/// [`BRUTEFORCE_POINT_CAP`] points. The bilateral term is omitted when
/// colors are absent.
pub fn energy(
    labels: &[usize],
    unary: &Tensor,
    params: &CrfParams,
    points: &[[f64; 3]],
    colors: Option<&[[f64; 3]]>,
) -> Result<f64> {
    let n = points.len();
    if n > BRUTEFORCE_POINT_CAP {
        return Err(Error::InvalidInput(format!(
            "energy is an O(N^2) diagnostic capped at {BRUTEFORCE_POINT_CAP} points"
        )));
    }
    let l = params.label_count();
    if labels.len() != n || unary.shape() != [n, l] {
        return Err(Error::Shape("labels/unary/points sizes disagree".into()));
    }
    if labels.iter().any(|&y| y >= l) {
        return Err(Error::InvalidInput("label out of range".into()));
    }
    let mu = params.compat.data();
    let mut e = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        e += unary.data()[i * l + y];
    }
    let tg2 = 2.0 * params.theta_gamma * params.theta_gamma;
    let ta2 = 2.0 * params.theta_alpha * params.theta_alpha;
    let tb2 = 2.0 * params.theta_beta * params.theta_beta;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut p2 = 0.0;
            for a in 0..3 {
                let d = points[i][a] - points[j][a];
                p2 += d * d;
            }
            let mut pair = params.w_spatial * (-p2 / tg2).exp();
            if let Some(cols) = colors {
                let mut c2 = 0.0;
                for a in 0..3 {
                    let d = cols[i][a] - cols[j][a];
                    c2 += d * d;
                }
                pair += params.w_bilateral * (-p2 / ta2 - c2 / tb2).exp();
            }
            e += mu[labels[i] * l + labels[j]] * pair;
        }
    }
    Ok(e)
}
