//! Activation-factorization baselines: PCA, k-means and NMF bases over the
//! denoiser's first hidden layer, and sampling with activations replaced by
//! their reconstruction under a basis.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::subject::sampler::{ddpm_sample, timesteps as sampler_timesteps};
use crate::subject::{Subject, TokenId};

pub const DEFAULT_TIMESTEPS: [usize; 5] = [10, 30, 50, 70, 90];
pub const KMEANS_INITS: usize = 10;
pub const LLOYD_ITERATIONS: usize = 100;
pub const NMF_ITERATIONS: usize = 200;
/// Coordinate-descent sweeps for the nonnegative projection at inference.
pub const NMF_PROJECTION_ITERATIONS: usize = 100;
pub const RSVD_POWER_ITERATIONS: usize = 5;
pub const RSVD_OVERSAMPLES: usize = 10;
/// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMethod {
    Pca,
    Kmeans,
    Nmf,
}

impl BasisMethod {
    pub fn name(self) -> &'static str {
        match self {
            BasisMethod::Pca => "pca",
            BasisMethod::Kmeans => "kmeans",
            BasisMethod::Nmf => "nmf",
        }
    }
}

impl std::str::FromStr for BasisMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(BasisMethod::Pca),
            "kmeans" => Ok(BasisMethod::Kmeans),
            "nmf" => Ok(BasisMethod::Nmf),
            _ => Err(Error::invalid("method", format!("`{s}` is not one of pca, kmeans, nmf"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub method: BasisMethod,
    pub n_components: usize,
    pub timesteps: Vec<usize>,
    /// Number of generated concept images whose activations are recorded.
    pub images: usize,
    pub guidance: f64,
    /// Randomized SVD instead of the exact one (PCA only).
    pub randomized: bool,
    pub seed: u64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            method: BasisMethod::Pca,
            n_components: 8,
            timesteps: DEFAULT_TIMESTEPS.to_vec(),
            images: 64,
            guidance: crate::subject::sampler::DEFAULT_GUIDANCE,
            randomized: false,
            seed: 1024,
        }
    }
}

/// How a basis was fitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub n_requested: usize,
    pub samples: usize,
    pub dim: usize,
    pub init: String,
    pub iterations: usize,
    /// Squared reconstruction error summed over the fitted rows.
    pub error: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub singular_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    // Filled in by `fit_activation_basis`.
    #[serde(default)]
    pub concept: String,
    #[serde(default)]
    pub subject_hash: String,
    #[serde(default)]
    pub timesteps: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationBasis {
    pub method: BasisMethod,
    /// One row per component.
    pub components: Vec<Vec<f64>>,
    /// Activation mean (PCA); empty otherwise.
    pub mean: Vec<f64>,
    pub meta: FitMetadata,
}

fn to_dmatrix(x: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

fn sq_dist(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max_c` bounds the component count: the dimension for PCA and NMF, the
/// sample count for k-means.
fn check_fit_inputs(x: ArrayView2<f64>, n_c: usize, max_c: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::invalid("samples", "no activation rows"));
    }
    if n_c == 0 || n_c > max_c {
        return Err(Error::invalid("n_components", format!("{n_c} outside 1..={max_c}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("samples", "non-finite activation"));
    }
    Ok(())
}

impl ActivationBasis {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    fn component_matrix(&self) -> Array2<f64> {
        let (k, d) = (self.components.len(), self.meta.dim);
        Array2::from_shape_fn((k, d), |(i, j)| self.components[i][j])
    }

    /// Principal directions of the centered rows of `x`, by exact SVD or
    /// (with `randomized = Some(seed)`) by randomized SVD.
    pub fn fit_pca(x: ArrayView2<f64>, n_c: usize, randomized: Option<u64>) -> Result<Self> {
        check_fit_inputs(x, n_c, x.ncols())?;
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let centered = &x - &mean;
        let c = to_dmatrix(centered.view());
        let (sv, vt, init) = match randomized {
            None => {
                let svd = c.svd(false, true);
                (svd.singular_values, svd.v_t.expect("v_t requested"), "exact svd".to_string())
            }
            Some(seed) => {
                let (sv, vt) = randomized_svd(&c, n_c, seed);
                (
                    sv,
                    vt,
                    format!("randomized svd, {RSVD_POWER_ITERATIONS} power iterations, {RSVD_OVERSAMPLES} oversamples, seed {seed}"),
                )
            }
        };
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
        let top = order.first().map(|&i| sv[i]).unwrap_or(0.0);
        let rank = order.iter().take_while(|&&i| sv[i] > RANK_TOL * top && sv[i] > 0.0).count();
        let mut warnings = Vec::new();
        if rank < n_c {
            let msg = format!("activation matrix has rank {rank} < {n_c}; fitting {rank} components");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let k = rank.min(n_c);
        let components: Vec<Vec<f64>> = order[..k].iter().map(|&i| vt.row(i).iter().copied().collect()).collect();
        let mut basis = ActivationBasis {
            method: BasisMethod::Pca,
            components,
            mean: mean.to_vec(),
            meta: FitMetadata {
                n_requested: n_c,
                samples: x.nrows(),
                dim: x.ncols(),
                init,
                iterations: 0,
                error: 0.0,
                singular_values: order.iter().map(|&i| sv[i]).collect(),
                warnings,
                ..Default::default()
            },
        };
        basis.meta.error = basis.reconstruction_error(x);
        Ok(basis)
    }

    /// Best of [`KMEANS_INITS`] k-means++ seedings, each refined by up to
    /// [`LLOYD_ITERATIONS`] Lloyd iterations.
    pub fn fit_kmeans(x: ArrayView2<f64>, n_c: usize, seed: u64) -> Result<Self> {
        check_fit_inputs(x, n_c, x.nrows())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(f64, Vec<Vec<f64>>, usize)> = None;
        for _ in 0..KMEANS_INITS {
            let init = kmeans_pp(x, n_c, &mut rng);
            let (centroids, inertia, iters) = lloyd(x, init);
            if best.as_ref().is_none_or(|b| inertia < b.0) {
                best = Some((inertia, centroids, iters));
            }
        }
        let (inertia, components, iterations) = best.expect("at least one init");
        Ok(ActivationBasis {
            method: BasisMethod::Kmeans,
            components,
            mean: Vec::new(),
            meta: FitMetadata {
                n_requested: n_c,
                samples: x.nrows(),
                dim: x.ncols(),
                init: format!("k-means++ x{KMEANS_INITS}, seed {seed}"),
                iterations,
                error: inertia,
                ..Default::default()
            },
        })
    }

    /// NMF of the rows with negative entries set to zero: NNDSVD start, then
    /// [`NMF_ITERATIONS`] coordinate-descent sweeps over both factors.
    pub fn fit_nmf(x: ArrayView2<f64>, n_c: usize) -> Result<Self> {
        check_fit_inputs(x, n_c, x.ncols())?;
        let xp = x.mapv(|v| if v > 0.0 { v } else { 0.0 });
        let (mut w, mut h) = nndsvd(&xp, n_c);
        for _ in 0..NMF_ITERATIONS {
            // H rows given W
            let wtw = w.t().dot(&w);
            let wtx = w.t().dot(&xp);
            hals_rows(&mut h, &wtw, &wtx);
            // W columns given H, as rows of W^T
            let hht = h.dot(&h.t());
            let hxt = h.dot(&xp.t());
            let mut wt = w.t().to_owned();
            hals_rows(&mut wt, &hht, &hxt);
            w = wt.t().to_owned();
        }
        let mut warnings = Vec::new();
        let zero_rows = h.rows().into_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
        if zero_rows > 0 {
            let msg = format!("{zero_rows} of {n_c} NMF components are zero");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let error = (&xp - &w.dot(&h)).mapv(|v| v * v).sum();
        Ok(ActivationBasis {
            method: BasisMethod::Nmf,
            components: h.rows().into_iter().map(|r| r.to_vec()).collect(),
            mean: Vec::new(),
            meta: FitMetadata {
                n_requested: n_c,
                samples: x.nrows(),
                dim: x.ncols(),
                init: "nndsvd".into(),
                iterations: NMF_ITERATIONS,
                error,
                warnings,
                ..Default::default()
            },
        })
    }

    pub fn fit(method: BasisMethod, x: ArrayView2<f64>, n_c: usize, randomized: bool, seed: u64) -> Result<Self> {
        match method {
            BasisMethod::Pca => Self::fit_pca(x, n_c, randomized.then_some(seed)),
            BasisMethod::Kmeans => Self::fit_kmeans(x, n_c, seed),
            BasisMethod::Nmf => Self::fit_nmf(x, n_c),
        }
    }

    /// Replaces each row by its reconstruction under the basis.
    pub fn project(&self, h: &mut Array2<f64>) -> Result<()> {
        if h.ncols() != self.meta.dim {
            return Err(Error::shape("basis projection", self.meta.dim, h.ncols()));
        }
        match self.method {
            BasisMethod::Pca => {
                let g = self.component_matrix();
                let mean = ArrayView1::from(&self.mean);
                let centered = &*h - &mean;
                let recon = centered.dot(&g.t()).dot(&g) + mean;
                *h = recon;
            }
            BasisMethod::Kmeans => {
                for mut row in h.rows_mut() {
                    let nearest = nearest(row.view(), &self.components).0;
                    row.assign(&ArrayView1::from(&self.components[nearest]));
                }
            }
            BasisMethod::Nmf => {
                let g = self.component_matrix();
                let hp = h.mapv(|v| if v > 0.0 { v } else { 0.0 });
                let ggt = g.dot(&g.t());
                let b = g.dot(&hp.t());
                let mut coef = Array2::<f64>::zeros((g.nrows(), h.nrows()));
                for _ in 0..NMF_PROJECTION_ITERATIONS {
                    hals_rows(&mut coef, &ggt, &b);
                }
                *h = coef.t().dot(&g);
            }
        }
        Ok(())
    }

    /// Squared reconstruction error summed over the rows of `x`.
    pub fn reconstruction_error(&self, x: ArrayView2<f64>) -> f64 {
        let mut r = x.to_owned();
        if self.project(&mut r).is_err() {
            return f64::NAN;
        }
        let target = match self.method {
            BasisMethod::Nmf => x.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            _ => x.to_owned(),
        };
        (&target - &r).mapv(|v| v * v).sum()
    }
}

fn randomized_svd(x: &DMatrix<f64>, k: usize, seed: u64) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let l = (k + RSVD_OVERSAMPLES).min(x.nrows()).min(x.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(x.ncols(), l, |_, _| StandardNormal.sample(&mut rng));
    let mut q = (x * omega).qr().q();
    for _ in 0..RSVD_POWER_ITERATIONS {
        let z = (x.transpose() * &q).qr().q();
        q = (x * z).qr().q();
    }
    let b = q.transpose() * x;
    let svd = b.svd(false, true);
    (svd.singular_values, svd.v_t.expect("v_t requested"))
}

fn nearest(row: ArrayView1<f64>, centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = x.nrows();
    let mut centroids = vec![x.row(rng.random_range(0..m)).to_vec()];
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            while d2[idx] == 0.0 {
                idx -= 1;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        let c = x.row(pick).to_vec();
        for (d, r) in d2.iter_mut().zip(x.rows()) {
            *d = d.min(sq_dist(r, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations until assignments stop changing; returns centroids,
/// inertia and the number of iterations run.
fn lloyd(x: ArrayView2<f64>, mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, f64, usize) {
    let (m, d) = x.dim();
    let mut assign = vec![usize::MAX; m];
    let mut iterations = 0;
    for _ in 0..LLOYD_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (a, r) in assign.iter_mut().zip(x.rows()) {
            let c = nearest(r, &centroids).0;
            changed |= *a != c;
            *a = c;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&a, r) in assign.iter().zip(x.rows()) {
            counts[a] += 1;
            sums[a].iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            // an emptied cluster keeps its previous centroid
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    let inertia = x.rows().into_iter().map(|r| nearest(r, &centroids).1).sum();
    (centroids, inertia, iterations)
}

/// Nonnegative double SVD initialization of `x ≈ W H` with `k` components.
fn nndsvd(x: &Array2<f64>, k: usize) -> (Array2<f64>, Array2<f64>) {
    let (m, p) = x.dim();
    let svd = to_dmatrix(x.view()).svd(true, true);
    let (u, vt, s) = (svd.u.expect("u"), svd.v_t.expect("v_t"), svd.singular_values);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut w = Array2::<f64>::zeros((m, k));
    let mut h = Array2::<f64>::zeros((k, p));
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for (j, &idx) in order.iter().take(k).enumerate() {
        let sj = s[idx];
        let uj: Vec<f64> = u.column(idx).iter().copied().collect();
        let vj: Vec<f64> = vt.row(idx).iter().copied().collect();
        if j == 0 {
            let sign = if uj.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            for i in 0..m {
                w[[i, 0]] = (sj.sqrt() * sign * uj[i]).max(0.0);
            }
            for i in 0..p {
                h[[0, i]] = (sj.sqrt() * sign * vj[i]).max(0.0);
            }
            continue;
        }
        let pos = |v: &[f64]| v.iter().map(|&a| a.max(0.0)).collect::<Vec<_>>();
        let neg = |v: &[f64]| v.iter().map(|&a| (-a).max(0.0)).collect::<Vec<_>>();
        let (up, un, vp, vn) = (pos(&uj), neg(&uj), pos(&vj), neg(&vj));
        let (nup, nun, nvp, nvn) = (norm(&up), norm(&un), norm(&vp), norm(&vn));
        let (mp, mn) = (nup * nvp, nun * nvn);
        let (uu, vv, mass, nu, nv) = if mp >= mn { (up, vp, mp, nup, nvp) } else { (un, vn, mn, nun, nvn) };
        if mass == 0.0 {
            continue;
        }
        let lbd = (sj * mass).sqrt();
        for i in 0..m {
            w[[i, j]] = lbd * uu[i] / nu;
        }
        for i in 0..p {
            h[[j, i]] = lbd * vv[i] / nv;
        }
    }
    (w, h)
}

/// One coordinate-descent sweep over the rows of `a` for
/// `min_{a >= 0} 0.5 tr(a^T G a) - tr(a^T B)`, with `G` symmetric.
fn hals_rows(a: &mut Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) {
    for k in 0..a.nrows() {
        let gkk = g[[k, k]];
        if gkk <= 0.0 {
            continue;
        }
        let grad = &b.row(k) - &g.row(k).dot(&*a);
        let mut row = a.row_mut(k);
        row.zip_mut_with(&grad, |v, &gr| {
            let nv = *v + gr / gkk;
            *v = if nv > 0.0 { nv } else { 0.0 };
        });
    }
}

/// Runs the sampler, calling `hook(t, is_conditional, h)` on the first
/// hidden layer of every denoiser evaluation.
#[allow(clippy::type_complexity)]
fn sample_hooked(
    subject: &Subject,
    cond: ArrayView1<f64>,
    seeds: &[u64],
    guidance: f64,
    hook: &mut dyn FnMut(usize, bool, &mut Array2<f64>) -> Result<()>,
) -> Result<Vec<Image>> {
    let uncond = subject.unconditional()?;
    let conds = cond.broadcast((seeds.len(), cond.len())).unwrap().to_owned();
    let model = subject.model();
    let mut err = None;
    let mut predict = |z: ArrayView2<f64>, t: &[usize], c: ArrayView2<f64>| {
        let is_cond = c.row(0) == cond;
        let mut inner = |h: &mut Array2<f64>| {
            if err.is_none() {
                if let Err(e) = hook(t[0], is_cond, h) {
                    err = Some(e);
                }
            }
        };
        model.forward_hooked(z, t, c, &mut inner)
    };
    let steps = subject.schedule().steps();
    let images = ddpm_sample(&mut predict, subject.schedule(), subject.image_shape(), conds.view(), uncond.view(), guidance, steps, seeds)?;
    match err {
        Some(e) => Err(e),
        None => Ok(images),
    }
}

/// Conditional-branch first-hidden-layer activations recorded at
/// `timesteps` while sampling `[template, concept]` for each seed; rows are
/// ordered by timestep (as visited), then seed.
pub fn record_activations(
    subject: &Subject,
    concept: TokenId,
    seeds: &[u64],
    timesteps: &[usize],
    guidance: f64,
) -> Result<Array2<f64>> {
    let steps = subject.schedule().steps();
    let visited = sampler_timesteps(steps, steps);
    if timesteps.is_empty() || timesteps.iter().any(|t| !visited.contains(t)) {
        return Err(Error::invalid("timesteps", format!("need timesteps in 1..={steps}")));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("images", "need at least one image"));
    }
    let cond = subject.token_cond(concept)?;
    let hidden = subject.model().config().hidden;
    let mut rows: Vec<f64> = Vec::new();
    let mut hook = |t: usize, is_cond: bool, h: &mut Array2<f64>| {
        if is_cond && timesteps.contains(&t) {
            rows.extend(h.iter());
        }
        Ok(())
    };
    sample_hooked(subject, cond.view(), seeds, guidance, &mut hook)?;
    let n = rows.len() / hidden;
    Ok(Array2::from_shape_vec((n, hidden), rows).expect("whole rows"))
}

/// Seeds of the images whose activations a basis is fitted on.
pub fn basis_seeds(config: &BasisConfig) -> Vec<u64> {
    (0..config.images as u64).map(|i| (config.seed << 20) | (1 << 19) | i).collect()
}

pub fn fit_activation_basis(subject: &Subject, concept: &str, config: &BasisConfig) -> Result<ActivationBasis> {
    let hidden = subject.model().config().hidden;
    if config.n_components == 0 || config.n_components > hidden {
        return Err(Error::invalid("n_components", format!("{} outside 1..={hidden}", config.n_components)));
    }
    let token = subject.vocab().id(concept)?;
    let seeds = basis_seeds(config);
    let x = record_activations(subject, token, &seeds, &config.timesteps, config.guidance)?;
    let mut basis = ActivationBasis::fit(config.method, x.view(), config.n_components, config.randomized, config.seed)?;
    basis.meta.concept = concept.to_string();
    basis.meta.subject_hash = subject.weights_hash().to_string();
    basis.meta.timesteps = config.timesteps.clone();
    basis.meta.seeds = seeds;
    Ok(basis)
}

/// Samples `cond` with every first-hidden-layer activation (both guidance
/// branches, every step) replaced by its reconstruction under `basis`.
pub fn sample_with_basis(
    subject: &Subject,
    cond: ArrayView1<f64>,
    basis: &ActivationBasis,
    seeds: &[u64],
    guidance: f64,
) -> Result<Vec<Image>> {
    let hidden = subject.model().config().hidden;
    if basis.dim() != hidden {
        return Err(Error::shape("activation basis dimension", hidden, basis.dim()));
    }
    if !basis.meta.subject_hash.is_empty() {
        crate::persist::check_hash("basis subject_hash", &basis.meta.subject_hash, subject.weights_hash())?;
    }
    let mut hook = |_t: usize, _c: bool, h: &mut Array2<f64>| basis.project(h);
    sample_hooked(subject, cond, seeds, guidance, &mut hook)
}

/// Per-component activation, for inspection: mean coefficient of `x`'s
/// rows along each component (PCA), or cluster shares (k-means).
pub fn component_usage(basis: &ActivationBasis, x: ArrayView2<f64>) -> Vec<f64> {
    let k = basis.n_components();
    match basis.method {
        BasisMethod::Kmeans => {
            let mut counts = vec![0.0; k];
            for r in x.rows() {
                counts[nearest(r, &basis.components).0] += 1.0;
            }
            counts.iter().map(|c| c / x.nrows() as f64).collect()
        }
        _ => {
            let g = basis.component_matrix();
            let mean = if basis.mean.is_empty() { Array1::zeros(basis.dim()) } else { Array1::from(basis.mean.clone()) };
            let proj = (&x - &mean).dot(&g.t());
            proj.mapv(f64::abs).mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
        }
    }
}
