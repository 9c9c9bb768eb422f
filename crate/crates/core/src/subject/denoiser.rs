//! Residual fully-connected noise predictor `eps_theta(z_t, t, c)`.
//!
//! Layout: the flattened image and an embedding `e = [time(t), c]` feed a
//! SiLU input layer; each residual block adds `silu(h W + e U + b)`; a linear
//! head maps back to image space and a learned per-timestep gain `s[t]` adds
//! `s[t] z_t` on top. Rows of every matrix are batch items.
//!
//! The skip term carries the full-rank part of the target: at high noise the
//! noise is nearly `z_t` itself, which a 256-wide head cannot express.

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageShape;

/// Scalar types the network can run in.
pub trait Real:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + Debug + Send + Sync + std::ops::AddAssign + std::ops::MulAssign + 'static
{
    fn to_f32_lossy(self) -> f32;
}

impl Real for f32 {
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image: ImageShape,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Number of diffusion steps `T`; the skip gain has `T + 1` entries.
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn new(image: ImageShape, cond_dim: usize, steps: usize) -> Self {
        Self {
            image,
            hidden: 256,
            blocks: 2,
            time_dim: 32,
            cond_dim,
            steps,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.time_dim + self.cond_dim
    }

    fn validate(&self) -> Result<()> {
        if self.image.is_empty() || self.hidden == 0 || self.cond_dim == 0 || self.steps == 0 {
            return Err(Error::invalid("denoiser", "dimensions must be positive"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_dim", "must be even"));
        }
        Ok(())
    }
}

/// Network parameters. The same structure doubles as a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<F> {
    config: DenoiserConfig,
    pub(crate) in_w: Array2<F>,
    pub(crate) in_cw: Array2<F>,
    pub(crate) in_b: Array1<F>,
    pub(crate) blk_w: Vec<Array2<F>>,
    pub(crate) blk_cw: Vec<Array2<F>>,
    pub(crate) blk_b: Vec<Array1<F>>,
    pub(crate) out_w: Array2<F>,
    pub(crate) out_b: Array1<F>,
    pub(crate) out_skip: Array1<F>,
}

/// Intermediate values kept for the backward pass.
pub struct Tape<F> {
    t: Vec<usize>,
    emb: Array2<F>,
    pre: Vec<Array2<F>>,
    hidden: Vec<Array2<F>>,
}

/// A named, shaped view of one parameter tensor.
pub struct ParamBlock<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s + x * s * (F::one() - s)
}

fn uniform<F: Real, R: Rng>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<F> {
    Array2::from_shape_simple_fn(shape, || F::from_f64(rng.random_range(-bound..bound)).unwrap())
}

impl<F: Real> Denoiser<F> {
    pub fn zeros(config: DenoiserConfig) -> Self {
        let (d, h, e) = (config.image.len(), config.hidden, config.embed_dim());
        Self {
            config,
            in_w: Array2::zeros((d, h)),
            in_cw: Array2::zeros((e, h)),
            in_b: Array1::zeros(h),
            blk_w: vec![Array2::zeros((h, h)); config.blocks],
            blk_cw: vec![Array2::zeros((e, h)); config.blocks],
            blk_b: vec![Array1::zeros(h); config.blocks],
            out_w: Array2::zeros((h, d)),
            out_b: Array1::zeros(d),
            out_skip: Array1::zeros(config.steps + 1),
        }
    }

    /// Uniform fan-in initialization; the output head and skip gain start at
    /// zero.
    pub fn init<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h, e) = (config.image.len(), config.hidden, config.embed_dim());
        let mut m = Self::zeros(config);
        let b_in = 1.0 / ((d + e) as f64).sqrt();
        m.in_w = uniform(rng, (d, h), b_in);
        m.in_cw = uniform(rng, (e, h), b_in);
        let b_blk = 1.0 / ((h + e) as f64).sqrt();
        for k in 0..config.blocks {
            m.blk_w[k] = uniform(rng, (h, h), b_blk);
            m.blk_cw[k] = uniform(rng, (e, h), b_blk);
        }
        Ok(m)
    }

    /// Sets the skip gain to the best linear noise estimate from `z_t` alone
    /// for data of per-pixel standard deviation `sigma_data`:
    /// `s[t] = sqrt(1 - a_t) / (1 - a_t + a_t sigma_data^2)`.
    pub fn init_skip(&mut self, alpha_bar: &[f64], sigma_data: f64) -> Result<()> {
        if alpha_bar.len() != self.out_skip.len() {
            return Err(Error::shape("skip gain schedule", self.out_skip.len(), alpha_bar.len()));
        }
        for (s, &a) in self.out_skip.iter_mut().zip(alpha_bar) {
            let v = (1.0 - a) + a * sigma_data * sigma_data;
            *s = F::from_f64((1.0 - a).sqrt() / v).unwrap();
        }
        Ok(())
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap());
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap());
        Denoiser {
            config: self.config,
            in_w: c2(&self.in_w),
            in_cw: c2(&self.in_cw),
            in_b: c1(&self.in_b),
            blk_w: self.blk_w.iter().map(c2).collect(),
            blk_cw: self.blk_cw.iter().map(c2).collect(),
            blk_b: self.blk_b.iter().map(c1).collect(),
            out_w: c2(&self.out_w),
            out_b: c1(&self.out_b),
            out_skip: c1(&self.out_skip),
        }
    }

    pub fn param_blocks(&self) -> Vec<ParamBlock<'_, F>> {
        fn block<'a, F, D: ndarray::Dimension>(name: String, a: &'a ndarray::Array<F, D>) -> ParamBlock<'a, F> {
            ParamBlock {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        let mut out = vec![
            block("input.weight".into(), &self.in_w),
            block("input.cond_weight".into(), &self.in_cw),
            block("input.bias".into(), &self.in_b),
        ];
        for k in 0..self.config.blocks {
            out.push(block(format!("block{k}.weight"), &self.blk_w[k]));
            out.push(block(format!("block{k}.cond_weight"), &self.blk_cw[k]));
            out.push(block(format!("block{k}.bias"), &self.blk_b[k]));
        }
        out.push(block("output.weight".into(), &self.out_w));
        out.push(block("output.bias".into(), &self.out_b));
        out.push(block("output.skip".into(), &self.out_skip));
        out
    }

    /// Mutable parameter slices in the same order as [`Self::param_blocks`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            self.in_w.as_slice_mut().unwrap(),
            self.in_cw.as_slice_mut().unwrap(),
            self.in_b.as_slice_mut().unwrap(),
        ];
        for ((w, cw), b) in self.blk_w.iter_mut().zip(self.blk_cw.iter_mut()).zip(self.blk_b.iter_mut()) {
            out.push(w.as_slice_mut().unwrap());
            out.push(cw.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out.push(self.out_w.as_slice_mut().unwrap());
        out.push(self.out_b.as_slice_mut().unwrap());
        out.push(self.out_skip.as_slice_mut().unwrap());
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_blocks().iter().map(|b| b.data.len()).sum()
    }

    /// SHA-256 over every block's name, shape and little-endian f32 values.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for block in self.param_blocks() {
            h.update((block.name.len() as u32).to_le_bytes());
            h.update(block.name.as_bytes());
            h.update((block.shape.len() as u32).to_le_bytes());
            for &d in &block.shape {
                h.update((d as u32).to_le_bytes());
            }
            for v in block.data {
                h.update(v.to_f32_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Sinusoidal time features concatenated with the conditioning rows.
    fn embed(&self, t: &[usize], cond: ArrayView2<F>) -> Array2<F> {
        let half = self.config.time_dim / 2;
        let mut emb = Array2::<F>::zeros((t.len(), self.config.embed_dim()));
        for (i, &ti) in t.iter().enumerate() {
            for k in 0..half {
                let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
                let arg = ti as f64 * freq;
                emb[[i, k]] = F::from_f64(arg.sin()).unwrap();
                emb[[i, half + k]] = F::from_f64(arg.cos()).unwrap();
            }
        }
        emb.slice_mut(s![.., self.config.time_dim..]).assign(&cond);
        emb
    }

    fn check_inputs(&self, z: &ArrayView2<F>, t: &[usize], cond: &ArrayView2<F>) -> Result<()> {
        let b = z.nrows();
        if z.ncols() != self.config.image.len() {
            return Err(Error::shape("denoiser image input", self.config.image.len(), z.ncols()));
        }
        if cond.ncols() != self.config.cond_dim {
            return Err(Error::shape("denoiser conditioning", self.config.cond_dim, cond.ncols()));
        }
        if t.len() != b || cond.nrows() != b {
            return Err(Error::shape("denoiser batch", b, format!("{} steps, {} conditionings", t.len(), cond.nrows())));
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti > self.config.steps) {
            return Err(Error::invalid("t", format!("{bad} outside 0..={}", self.config.steps)));
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        z: ArrayView2<F>,
        t: &[usize],
        cond: ArrayView2<F>,
        keep: bool,
        hook: Option<&mut dyn FnMut(&mut Array2<F>)>,
    ) -> Result<(Array2<F>, Option<Tape<F>>)> {
        self.check_inputs(&z, t, &cond)?;
        let emb = self.embed(t, cond);
        let mut pre = z.dot(&self.in_w) + emb.dot(&self.in_cw);
        pre += &self.in_b;
        let mut h = pre.mapv(silu);
        if let Some(hook) = hook {
            hook(&mut h);
        }
        let mut pres = Vec::new();
        let mut hiddens = Vec::new();
        if keep {
            pres.push(pre);
        }
        for k in 0..self.config.blocks {
            let mut p = h.dot(&self.blk_w[k]) + emb.dot(&self.blk_cw[k]);
            p += &self.blk_b[k];
            let next = &h + &p.mapv(silu);
            if keep {
                pres.push(p);
                hiddens.push(std::mem::replace(&mut h, next));
            } else {
                h = next;
            }
        }
        let mut out = h.dot(&self.out_w);
        out += &self.out_b;
        for ((mut row, zr), &ti) in out.rows_mut().into_iter().zip(z.rows()).zip(t) {
            let g = self.out_skip[ti];
            row.zip_mut_with(&zr, |o, &zi| *o += g * zi);
        }
        let tape = keep.then(|| {
            hiddens.push(h);
            Tape {
                t: t.to_vec(),
                emb,
                pre: pres,
                hidden: hiddens,
            }
        });
        Ok((out, tape))
    }

    /// Predicted noise for a batch.
    pub fn forward(&self, z: ArrayView2<F>, t: &[usize], cond: ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.run(z, t, cond, false, None)?.0)
    }

    /// Forward pass with `hook` applied in place to the first hidden layer's
    /// activations (after the nonlinearity).
    pub fn forward_hooked(
        &self,
        z: ArrayView2<F>,
        t: &[usize],
        cond: ArrayView2<F>,
        hook: &mut dyn FnMut(&mut Array2<F>),
    ) -> Result<Array2<F>> {
        Ok(self.run(z, t, cond, false, Some(hook))?.0)
    }

    pub fn forward_tape(&self, z: ArrayView2<F>, t: &[usize], cond: ArrayView2<F>) -> Result<(Array2<F>, Tape<F>)> {
        let (out, tape) = self.run(z, t, cond, true, None)?;
        Ok((out, tape.expect("tape requested")))
    }

    /// Backpropagates `d_out` to the embedding rows; when `grads` is given,
    /// parameter gradients are written into it (overwriting).
    fn backward_impl(
        &self,
        z: Option<ArrayView2<F>>,
        tape: &Tape<F>,
        d_out: &Array2<F>,
        mut grads: Option<&mut Denoiser<F>>,
    ) -> Array2<F> {
        let blocks = self.config.blocks;
        let top = &tape.hidden[blocks];
        if let Some(g) = grads.as_deref_mut() {
            g.out_w = top.t().dot(d_out);
            g.out_b = d_out.sum_axis(Axis(0));
        }
        let mut dh = d_out.dot(&self.out_w.t());
        let mut d_emb = Array2::<F>::zeros(tape.emb.raw_dim());
        for k in (0..blocks).rev() {
            let mut dpre = tape.pre[k + 1].mapv(silu_grad);
            dpre *= &dh;
            if let Some(g) = grads.as_deref_mut() {
                g.blk_w[k] = tape.hidden[k].t().dot(&dpre);
                g.blk_cw[k] = tape.emb.t().dot(&dpre);
                g.blk_b[k] = dpre.sum_axis(Axis(0));
            }
            d_emb += &dpre.dot(&self.blk_cw[k].t());
            dh += &dpre.dot(&self.blk_w[k].t());
        }
        let mut dpre = tape.pre[0].mapv(silu_grad);
        dpre *= &dh;
        if let Some(g) = grads {
            let z = z.expect("image input required for parameter gradients");
            g.out_skip.fill(F::zero());
            for ((dr, zr), &ti) in d_out.rows().into_iter().zip(z.rows()).zip(&tape.t) {
                g.out_skip[ti] += dr.dot(&zr);
            }
            g.in_w = z.t().dot(&dpre);
            g.in_cw = tape.emb.t().dot(&dpre);
            g.in_b = dpre.sum_axis(Axis(0));
        }
        d_emb += &dpre.dot(&self.in_cw.t());
        d_emb
    }

    /// Parameter gradients of `<d_out, output>`; returns the conditioning
    /// gradient as well.
    pub fn backward(&self, z: ArrayView2<F>, tape: &Tape<F>, d_out: &Array2<F>, grads: &mut Denoiser<F>) -> Array2<F> {
        let d_emb = self.backward_impl(Some(z), tape, d_out, Some(grads));
        d_emb.slice(s![.., self.config.time_dim..]).to_owned()
    }

    /// Gradient of `<d_out, output>` with respect to the conditioning rows.
    pub fn backward_cond(&self, tape: &Tape<F>, d_out: &Array2<F>) -> Array2<F> {
        let d_emb = self.backward_impl(None, tape, d_out, None);
        d_emb.slice(s![.., self.config.time_dim..]).to_owned()
    }
}

/// The interface the decomposition objective needs from a frozen model:
/// batched prediction and a conditioning vector-Jacobian product.
pub trait NoisePredictor {
    fn image_len(&self) -> usize;
    fn cond_dim(&self) -> usize;

    fn predict(&self, z_t: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Returns the prediction and `d(<g, prediction>)/d cond` where
    /// `g = upstream(prediction)`.
    fn predict_cond_vjp(
        &self,
        z_t: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
        upstream: &mut dyn FnMut(&Array2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

impl NoisePredictor for Denoiser<f64> {
    fn image_len(&self) -> usize {
        self.config.image.len()
    }

    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn predict(&self, z_t: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(z_t, t, cond)
    }

    fn predict_cond_vjp(
        &self,
        z_t: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
        upstream: &mut dyn FnMut(&Array2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (out, tape) = self.forward_tape(z_t, t, cond)?;
        let g = upstream(&out);
        let dc = self.backward_cond(&tape, &g);
        Ok((out, dc))
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_and_grad<F: Real>(pred: &Array2<F>, target: ArrayView2<F>) -> (F, Array2<F>) {
    let n = F::from_usize(pred.len()).unwrap();
    let mut diff = pred - &target;
    let loss = diff.iter().fold(F::zero(), |acc, &d| acc + d * d) / n;
    let scale = F::from_f64(2.0).unwrap() / n;
    Zip::from(&mut diff).for_each(|d| *d *= scale);
    (loss, diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            image: ImageShape::new(2, 2, 3),
            hidden: 6,
            blocks: 2,
            time_dim: 4,
            cond_dim: 3,
            steps: 40,
        }
    }

    fn randomized(seed: u64) -> Denoiser<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Denoiser::<f64>::init(small(), &mut rng).unwrap();
        // give the zero-initialized head some weight so gradients flow
        m.out_w = uniform(&mut rng, m.out_w.dim(), 0.5);
        m.out_b = Array1::from_shape_simple_fn(m.out_b.len(), || rng.random_range(-0.1..0.1));
        m.out_skip = Array1::from_shape_simple_fn(m.out_skip.len(), || rng.random_range(0.0..1.0));
        m
    }

    fn inputs(seed: u64, b: usize) -> (Array2<f64>, Vec<usize>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = uniform(&mut rng, (b, 12), 1.0);
        let c = uniform(&mut rng, (b, 3), 1.0);
        let t = (0..b).map(|i| 3 + 7 * i).collect();
        (z, t, c)
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Denoiser::<f64>::init(small(), &mut rng).unwrap();
        let (z, t, c) = inputs(1, 3);
        let out = m.forward(z.view(), &t, c.view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_tape_matches() {
        let m = randomized(2);
        let (z, t, c) = inputs(3, 4);
        let a = m.forward(z.view(), &t, c.view()).unwrap();
        let b = m.forward(z.view(), &t, c.view()).unwrap();
        let (c2, _) = m.forward_tape(z.view(), &t, c.view()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c2);
    }

    #[test]
    fn conditioning_gradient_matches_finite_differences() {
        let m = randomized(4);
        let (z, t, c) = inputs(5, 3);
        let target = uniform::<f64, _>(&mut ChaCha8Rng::seed_from_u64(6), (3, 12), 1.0);
        let loss = |c: &Array2<f64>| {
            let out = m.forward(z.view(), &t, c.view()).unwrap();
            mse_and_grad(&out, target.view()).0
        };
        let (out, tape) = m.forward_tape(z.view(), &t, c.view()).unwrap();
        let (_, g) = mse_and_grad(&out, target.view());
        let dc = m.backward_cond(&tape, &g);
        let h = 1e-6;
        for idx in [[0, 0], [1, 2], [2, 1]] {
            let mut plus = c.clone();
            plus[idx] += h;
            let mut minus = c.clone();
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (fd - dc[idx]).abs() / fd.abs().max(dc[idx].abs()).max(1e-8);
            assert!(rel < 1e-6, "{idx:?}: fd {fd} vs {}", dc[idx]);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let m = randomized(7);
        let (z, t, c) = inputs(8, 2);
        let target = uniform::<f64, _>(&mut ChaCha8Rng::seed_from_u64(9), (2, 12), 1.0);
        let (out, tape) = m.forward_tape(z.view(), &t, c.view()).unwrap();
        let (_, g) = mse_and_grad(&out, target.view());
        let mut grads = Denoiser::zeros(*m.config());
        m.backward(z.view(), &tape, &g, &mut grads);

        let names: Vec<String> = m.param_blocks().iter().map(|b| b.name.clone()).collect();
        let analytic: Vec<Vec<f64>> = grads.param_blocks().iter().map(|b| b.data.to_vec()).collect();
        let h = 1e-6;
        for (bi, name) in names.iter().enumerate() {
            for j in [0, analytic[bi].len() / 2, analytic[bi].len() - 1] {
                let eval = |delta: f64| {
                    let mut p = m.clone();
                    p.param_slices_mut()[bi][j] += delta;
                    let out = p.forward(z.view(), &t, c.view()).unwrap();
                    mse_and_grad(&out, target.view()).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[bi][j];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-5, "{name}[{j}]: fd {fd} vs {a}");
            }
        }
    }

    #[test]
    fn hook_sees_first_hidden_layer() {
        let m = randomized(10);
        let (z, t, c) = inputs(11, 2);
        let mut seen = None;
        let out = m
            .forward_hooked(z.view(), &t, c.view(), &mut |h| seen = Some(h.dim()))
            .unwrap();
        assert_eq!(seen, Some((2, 6)));
        assert_eq!(out, m.forward(z.view(), &t, c.view()).unwrap());
    }

    #[test]
    fn shape_errors() {
        let m = randomized(12);
        let (z, t, c) = inputs(13, 2);
        assert!(m.forward(z.view(), &t[..1], c.view()).is_err());
        assert!(m.forward(c.view(), &t, c.view()).is_err());
    }

    #[test]
    fn hash_changes_with_weights() {
        let m = randomized(14);
        let mut m2 = m.clone();
        assert_eq!(m.weights_hash(), m2.weights_hash());
        m2.in_b[0] += 1.0;
        assert_ne!(m.weights_hash(), m2.weights_hash());
        assert_eq!(m.cast::<f32>().weights_hash(), m.weights_hash());
    }
}
